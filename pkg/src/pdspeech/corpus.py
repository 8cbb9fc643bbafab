"""Dataset ingestion: manifests, audio canonicalization, segmentation, fold planning.

The unit of ingestion is a CSV manifest with one row per clip:

    clip_id,speaker_id,path,label,gender,task,sample_rate,duration_s

``label`` is ``PD`` or ``HC``, ``gender`` is ``M`` or ``F``, ``task`` is one of
``ddk``, ``sentence``, ``monologue``. A row may leave ``label`` and ``gender``
blank when the speaker was already defined by an earlier row; a blank pair for
a never-seen speaker is a dangling reference. Relative ``path`` values resolve
against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import AudioError, ManifestError, PlanningError

MANIFEST_COLUMNS = ("clip_id", "speaker_id", "path", "label", "gender",
                    "task", "sample_rate", "duration_s")
LABELS = {"PD": 1, "HC": 0}
LABEL_NAMES = {1: "PD", 0: "HC"}
GENDERS = ("M", "F")
TASKS = ("ddk", "sentence", "monologue")

SAMPLE_RATE = 16000
SEGMENT_SECONDS = 10.0
SEGMENT_SAMPLES = int(SAMPLE_RATE * SEGMENT_SECONDS)


@dataclass
class SpeakerRecord:
    speaker_id: str
    label: int  # PD = 1, HC = 0
    gender: str  # "M" or "F"
    age: int | None = None


@dataclass
class ClipRecord:
    clip_id: str
    speaker_id: str
    path: str
    task: str
    sample_rate: int
    duration_s: float


@dataclass
class Segment:
    """One fixed-duration training window: exactly 10 s of 16 kHz mono audio.

    ``valid_len`` counts the samples that came from the source clip;
    ``pad_len`` counts the zeros appended to fill the window.
    """

    clip_id: str
    index: int
    samples: np.ndarray
    pad_len: int
    valid_len: int

    def __post_init__(self) -> None:
        if len(self.samples) != SEGMENT_SAMPLES:
            raise AudioError(
                f"segment must hold {SEGMENT_SAMPLES} samples, got {len(self.samples)}")
        if self.pad_len + self.valid_len != SEGMENT_SAMPLES:
            raise AudioError("pad_len + valid_len must equal the segment length")
        if self.pad_len >= SEGMENT_SAMPLES:
            raise AudioError("a segment must contain at least one real sample")


@dataclass
class FoldPlan:
    """Speaker-to-fold assignment for speaker-independent cross-validation."""

    n_folds: int
    seed: int
    assignments: dict[str, int] = field(default_factory=dict)

    def speakers_in_fold(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def to_json(self) -> str:
        payload = {"n_folds": self.n_folds, "seed": self.seed,
                   "assignments": self.assignments}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, payload: dict) -> "FoldPlan":
        try:
            plan = cls(n_folds=int(payload["n_folds"]), seed=int(payload["seed"]),
                       assignments={str(k): int(v)
                                    for k, v in payload["assignments"].items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanningError(f"malformed fold plan: {exc}") from exc
        for speaker, fold in plan.assignments.items():
            if not 0 <= fold < plan.n_folds:
                raise PlanningError(
                    f"speaker {speaker} assigned to out-of-range fold {fold}")
        return plan

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_manifest(path: str | Path) -> tuple[list[SpeakerRecord], list[ClipRecord]]:
    """Parse a manifest CSV into speaker and clip records, in file order.

    Raises :class:`ManifestError` naming the offending row for schema
    violations: wrong columns, duplicate clip ids, unknown label/gender/task
    tokens, conflicting speaker attributes, or dangling speaker references.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base_dir = path.parent
    speakers: dict[str, SpeakerRecord] = {}
    order: list[str] = []
    clips: list[ClipRecord] = []
    seen_clips: set[str] = set()
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            if any(row.get(col) is None for col in MANIFEST_COLUMNS):
                raise ManifestError(f"row {lineno}: wrong number of fields")
            clip_id = row["clip_id"].strip()
            speaker_id = row["speaker_id"].strip()
            if not clip_id or not speaker_id:
                raise ManifestError(f"row {lineno}: empty clip_id or speaker_id")
            if clip_id in seen_clips:
                raise ManifestError(f"row {lineno}: duplicate clip_id {clip_id!r}")
            seen_clips.add(clip_id)

            label_tok = row["label"].strip()
            gender_tok = row["gender"].strip()
            if not label_tok and not gender_tok:
                if speaker_id not in speakers:
                    raise ManifestError(
                        f"row {lineno}: clip {clip_id!r} references unknown "
                        f"speaker {speaker_id!r} (dangling reference)")
            else:
                if label_tok not in LABELS:
                    raise ManifestError(
                        f"row {lineno}: unknown label token {label_tok!r} "
                        f"(expected PD or HC)")
                if gender_tok not in GENDERS:
                    raise ManifestError(
                        f"row {lineno}: unknown gender token {gender_tok!r} "
                        f"(expected M or F)")
                label = LABELS[label_tok]
                existing = speakers.get(speaker_id)
                if existing is None:
                    speakers[speaker_id] = SpeakerRecord(speaker_id, label, gender_tok)
                    order.append(speaker_id)
                elif existing.label != label or existing.gender != gender_tok:
                    raise ManifestError(
                        f"row {lineno}: speaker {speaker_id!r} redefined with "
                        f"conflicting label/gender")

            task = row["task"].strip()
            if task not in TASKS:
                raise ManifestError(
                    f"row {lineno}: unknown task {task!r} (expected one of {TASKS})")
            try:
                sample_rate = int(row["sample_rate"])
                duration_s = float(row["duration_s"])
            except ValueError as exc:
                raise ManifestError(f"row {lineno}: {exc}") from exc
            clip_path = Path(row["path"].strip())
            if not clip_path.is_absolute():
                clip_path = base_dir / clip_path
            clips.append(ClipRecord(clip_id, speaker_id, str(clip_path),
                                    task, sample_rate, duration_s))
    return [speakers[s] for s in order], clips


def canonicalize(samples: np.ndarray, rate: int) -> np.ndarray:
    """Convert a waveform to the canonical form: mono, 16 kHz, peak <= 1.

    Multi-channel input is mixed by channel mean. Rates above 16 kHz are
    resampled with a band-limited polyphase filter (Kaiser-windowed sinc,
    ``scipy.signal.resample_poly``); rates below 16 kHz are refused rather
    than fabricating bandwidth. Idempotent on canonical input.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise AudioError("empty waveform")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise AudioError(f"waveform must be 1-D or 2-D, got shape {samples.shape}")
    if rate < SAMPLE_RATE:
        raise AudioError(
            f"unsupported rate {rate} Hz: below {SAMPLE_RATE} Hz (upsampling refused)")
    if rate != SAMPLE_RATE:
        gcd = math.gcd(rate, SAMPLE_RATE)
        samples = resample_poly(samples, SAMPLE_RATE // gcd, rate // gcd)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return samples


def segment_clip(clip: ClipRecord, waveform: np.ndarray) -> list[Segment]:
    """Cut a canonical waveform into consecutive non-overlapping 10 s windows.

    The final window is zero-padded to full length; a clip therefore yields
    ``ceil(duration / 10 s)`` segments and no audio is discarded.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise AudioError(f"clip {clip.clip_id}: zero-length waveform")
    n_segments = math.ceil(len(waveform) / SEGMENT_SAMPLES)
    segments = []
    for idx in range(n_segments):
        chunk = waveform[idx * SEGMENT_SAMPLES:(idx + 1) * SEGMENT_SAMPLES]
        valid = len(chunk)
        if valid < SEGMENT_SAMPLES:
            chunk = np.concatenate([chunk, np.zeros(SEGMENT_SAMPLES - valid)])
        segments.append(Segment(clip_id=clip.clip_id, index=idx, samples=chunk,
                                pad_len=SEGMENT_SAMPLES - valid, valid_len=valid))
    return segments


def plan_folds(speakers: list[SpeakerRecord], n_folds: int, seed: int) -> FoldPlan:
    """Assign speakers to folds with exact class balance and near gender balance.

    Within each class the (seed-shuffled) males and females are dealt
    round-robin across folds as one sequence, which keeps every fold's
    per-class count exact and its gender split within one speaker.
    """
    if n_folds < 2:
        raise PlanningError(f"n_folds must be >= 2, got {n_folds}")
    ids = [s.speaker_id for s in speakers]
    if len(set(ids)) != len(ids):
        raise PlanningError("duplicate speaker_id in roster")
    by_class: dict[int, list[SpeakerRecord]] = {0: [], 1: []}
    for s in speakers:
        by_class[s.label].append(s)
    n_pd, n_hc = len(by_class[1]), len(by_class[0])
    if n_pd != n_hc:
        raise PlanningError(
            f"per-fold class balance impossible: {n_pd} PD vs {n_hc} HC speakers")
    for label, members in by_class.items():
        if len(members) % n_folds != 0:
            raise PlanningError(
                f"{LABEL_NAMES[label]} speaker count {len(members)} is not "
                f"divisible by n_folds={n_folds}")

    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for label in (1, 0):
        males = sorted(s.speaker_id for s in by_class[label] if s.gender == "M")
        females = sorted(s.speaker_id for s in by_class[label] if s.gender == "F")
        shuffled = ([males[i] for i in rng.permutation(len(males))]
                    + [females[i] for i in rng.permutation(len(females))])
        # Dealing males then females as one round-robin sequence spreads each
        # gender as evenly as folds allow.
        for pos, speaker_id in enumerate(shuffled):
            assignments[speaker_id] = pos % n_folds

    plan = FoldPlan(n_folds=n_folds, seed=seed, assignments=assignments)
    _check_gender_balance(plan, speakers)
    return plan


def _check_gender_balance(plan: FoldPlan, speakers: list[SpeakerRecord]) -> None:
    cells: dict[tuple[int, int], dict[str, int]] = {}
    by_id = {s.speaker_id: s for s in speakers}
    for speaker_id, fold in plan.assignments.items():
        s = by_id[speaker_id]
        cell = cells.setdefault((fold, s.label), {"M": 0, "F": 0})
        cell[s.gender] += 1
    for (fold, label), cell in sorted(cells.items()):
        if abs(cell["M"] - cell["F"]) > 1:
            raise PlanningError(
                f"fold {fold} class {LABEL_NAMES[label]} gender split "
                f"{cell['M']}M/{cell['F']}F exceeds the +-1 balance bound")


def materialize_fold(plan: FoldPlan, fold: int,
                     clips: list[ClipRecord]) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Split clips into (train, test) lists induced by the speaker partition."""
    if not 0 <= fold < plan.n_folds:
        raise PlanningError(f"fold index {fold} out of range for {plan.n_folds} folds")
    train, test = [], []
    for clip in clips:
        if clip.speaker_id not in plan.assignments:
            raise PlanningError(
                f"clip {clip.clip_id} references speaker {clip.speaker_id} "
                f"absent from the fold plan")
        (test if plan.assignments[clip.speaker_id] == fold else train).append(clip)
    return train, test
