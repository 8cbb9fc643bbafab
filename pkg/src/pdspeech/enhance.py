"""Test-time speech enhancement: VAD trim, dereverberation, denoising.

Stages run in a fixed canonical order (vad -> dereverb -> denoise; any subset)
on 16 kHz mono waveforms. The built-in VAD and spectral-gate denoiser are
documented stand-ins with the same I/O contract as the published enhancers
they replace; heavyweight models attach through the external-executable
adapter instead of being reimplemented here. Training code never calls this
module: enhancement is a testing-phase step only.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import istft, stft

from . import audio
from .corpus import SAMPLE_RATE, canonicalize
from .errors import PipelineError, StageError

STAGE_KINDS = ("vad", "dereverb", "denoise", "external")
_CANONICAL_ORDER = {"vad": 0, "dereverb": 1, "denoise": 2}

_VAD_DEFAULTS = {"frame_ms": 25.0, "hop_ms": 10.0, "margin_db": 9.0,
                 "percentile": 10.0, "hangover_ms": 200.0,
                 "merge_gap_ms": 300.0, "min_segment_ms": 200.0,
                 "mode": "trim"}
_DENOISE_DEFAULTS = {"frame_ms": 25.0, "hop_ms": 10.0, "g_min": 0.1,
                     "kappa": 1.5, "noise_fraction": 0.10}
_DEREVERB_DEFAULTS = {"timeout_s": 300.0}
_EXTERNAL_DEFAULTS = {"timeout_s": 300.0}
_DEFAULTS = {"vad": _VAD_DEFAULTS, "denoise": _DENOISE_DEFAULTS,
             "dereverb": _DEREVERB_DEFAULTS, "external": _EXTERNAL_DEFAULTS}


@dataclass
class StageConfig:
    kind: str
    params: dict = field(default_factory=dict)
    command_template: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in STAGE_KINDS:
            raise PipelineError(f"unknown stage kind {self.kind!r}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise PipelineError(
                f"stage {self.kind!r} does not accept parameters {sorted(unknown)}")
        if self.kind == "external" and not self.command_template:
            raise PipelineError("external stages require a command_template")
        if self.kind in ("vad", "denoise") and self.command_template:
            raise PipelineError(f"stage {self.kind!r} cannot take a command_template")
        if self.command_template is not None:
            _check_template(self.command_template)

    def resolved_params(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.params}

    def to_dict(self) -> dict:
        payload: dict = {"kind": self.kind}
        if self.params:
            payload["params"] = self.params
        if self.command_template is not None:
            payload["command_template"] = self.command_template
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "StageConfig":
        extra = set(payload) - {"kind", "params", "command_template"}
        if extra:
            raise PipelineError(f"unknown stage fields: {sorted(extra)}")
        return cls(kind=payload.get("kind", ""), params=payload.get("params", {}),
                   command_template=payload.get("command_template"))


@dataclass
class PipelineConfig:
    stages: list[StageConfig] = field(default_factory=list)
    provenance: bool = True

    def __post_init__(self) -> None:
        # named stages must follow vad -> dereverb -> denoise, each at most
        # once; external stages are opaque and may sit anywhere
        last = -1
        for stage in self.stages:
            rank = _CANONICAL_ORDER.get(stage.kind)
            if rank is None:
                continue
            if rank <= last:
                raise PipelineError(
                    "stages must follow the order vad -> dereverb -> denoise "
                    f"with no repeats; {stage.kind!r} is misplaced")
            last = rank

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages],
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        extra = set(payload) - {"stages", "provenance"}
        if extra:
            raise PipelineError(f"unknown pipeline fields: {sorted(extra)}")
        stages = [StageConfig.from_dict(s) for s in payload.get("stages", [])]
        return cls(stages=stages, provenance=bool(payload.get("provenance", True)))


def pipeline_tag(cfg: PipelineConfig) -> str:
    return "+".join(s.kind for s in cfg.stages) if cfg.stages else "none"


def _check_template(template: str) -> None:
    if "{in}" not in template or "{out}" not in template:
        raise PipelineError(
            "command_template must contain both {in} and {out} placeholders")


def _frame_energies_db(waveform: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(waveform) < frame:
        padded = np.concatenate([waveform, np.zeros(frame - len(waveform))])
        frames = padded[np.newaxis, :]
    else:
        frames = np.lib.stride_tricks.sliding_window_view(waveform, frame)[::hop]
    return 10.0 * np.log10(np.mean(frames ** 2, axis=1) + 1e-12)


def _runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open frame-index intervals."""
    runs = []
    start = None
    for i, flag in enumerate(active):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(active)))
    return runs


def _bridge_gaps(runs: list[tuple[int, int]], max_gap: int) -> list[tuple[int, int]]:
    if not runs:
        return []
    merged = [runs[0]]
    for start, end in runs[1:]:
        if start - merged[-1][1] < max_gap:
            merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    return merged


def vad_trim(waveform: np.ndarray, params: dict | None = None
             ) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Energy-threshold voice activity detection over 25 ms / 10 ms frames.

    A frame is speech when its log energy exceeds the 10th-percentile frame
    energy by ``margin_db``. Raw decisions are smoothed: silences shorter
    than the hangover are held open, gaps under ``merge_gap_ms`` merge, and
    segments under ``min_segment_ms`` drop. Retained segments (concatenated
    in ``mode="trim"``, zeroed-out context in ``mode="zero"``) are returned
    with their sample boundaries, which land on the 10 ms hop grid.

    The hangover is a hold (gap bridging), not a trailing extension, so
    detected boundaries stay within a frame or two of the true ones.
    """
    p = {**_VAD_DEFAULTS, **(params or {})}
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise StageError("vad: empty waveform")
    if p["mode"] not in ("trim", "zero"):
        raise PipelineError(f"vad mode must be trim or zero, got {p['mode']!r}")
    frame = int(round(p["frame_ms"] * SAMPLE_RATE / 1000.0))
    hop = int(round(p["hop_ms"] * SAMPLE_RATE / 1000.0))
    energies = _frame_energies_db(waveform, frame, hop)
    threshold = np.percentile(energies, p["percentile"]) + p["margin_db"]
    active = energies > threshold

    to_frames = lambda ms: max(1, int(round(ms / p["hop_ms"])))
    runs = _runs(active)
    runs = _bridge_gaps(runs, to_frames(p["hangover_ms"]))
    runs = _bridge_gaps(runs, to_frames(p["merge_gap_ms"]))
    min_frames = to_frames(p["min_segment_ms"])
    runs = [(s, e) for s, e in runs if e - s >= min_frames]
    if not runs:
        raise StageError(
            "vad: no speech found (no frame exceeded the energy threshold)")

    n = len(waveform)
    # a run reaching the last frame owns the signal tail, which the hop
    # grid cannot address (the final window extends past the last hop)
    boundaries = [(s * hop, n if e == len(active) else min(n, e * hop))
                  for s, e in runs]
    if p["mode"] == "zero":
        out = np.zeros_like(waveform)
        for s, e in boundaries:
            out[s:e] = waveform[s:e]
        return out, boundaries
    return np.concatenate([waveform[s:e] for s, e in boundaries]), boundaries


def denoise_spectral_gate(waveform: np.ndarray,
                          params: dict | None = None) -> np.ndarray:
    """Spectral noise gate: STFT, per-bin noise profile, bounded gain, overlap-add.

    The noise profile is the per-bin median magnitude over the lowest-energy
    10% of frames; each bin's gain is ``max(g_min, 1 - kappa * noise / |X|)``,
    which never exceeds one, so the total energy cannot grow. Output length
    equals input length exactly.
    """
    p = {**_DENOISE_DEFAULTS, **(params or {})}
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise StageError("denoise: empty waveform")
    n = len(waveform)
    nperseg = int(round(p["frame_ms"] * SAMPLE_RATE / 1000.0))
    hop = int(round(p["hop_ms"] * SAMPLE_RATE / 1000.0))
    if n < nperseg:
        # shrink the window for very short inputs; keep 50% overlap so the
        # Hann overlap-add stays invertible
        nperseg = n
        hop = max(1, n // 2)
    _, _, spec = stft(waveform, fs=SAMPLE_RATE, window="hann", nperseg=nperseg,
                      noverlap=nperseg - hop, boundary="zeros", padded=True)
    magnitude = np.abs(spec)
    frame_energy = np.sum(magnitude ** 2, axis=0)
    k = max(1, int(np.ceil(p["noise_fraction"] * spec.shape[1])))
    quietest = np.argsort(frame_energy, kind="stable")[:k]
    noise = np.median(magnitude[:, quietest], axis=1)
    gain = np.maximum(p["g_min"],
                      1.0 - p["kappa"] * noise[:, None] / np.maximum(magnitude, 1e-12))
    _, restored = istft(spec * gain, fs=SAMPLE_RATE, window="hann",
                        nperseg=nperseg, noverlap=nperseg - hop, boundary=True)
    if len(restored) < n:
        restored = np.concatenate([restored, np.zeros(n - len(restored))])
    return restored[:n]


def run_external_stage(waveform: np.ndarray, command_template: str,
                       timeout_s: float = 300.0) -> np.ndarray:
    """Round-trip a waveform through an external enhancer executable.

    The waveform is written as 16 kHz mono PCM16 WAV, the command template's
    ``{in}``/``{out}`` placeholders are filled, and the output WAV is read
    back and canonicalized. Nonzero exit status, a missing or malformed
    output file, or a timeout raise :class:`StageError`.
    """
    _check_template(command_template)
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise StageError("external stage: empty waveform")
    with tempfile.TemporaryDirectory(prefix="pdspeech_stage_") as tmp:
        in_path = Path(tmp) / "in.wav"
        out_path = Path(tmp) / "out.wav"
        audio.write_wav(in_path, waveform, SAMPLE_RATE, fmt="pcm16")
        args = [tok.replace("{in}", str(in_path)).replace("{out}", str(out_path))
                for tok in shlex.split(command_template)]
        try:
            proc = subprocess.run(args, capture_output=True, timeout=timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise StageError(
                f"external stage timed out after {timeout_s:.0f} s: {args[0]}") from exc
        except OSError as exc:
            raise StageError(f"external stage failed to launch: {exc}") from exc
        if proc.returncode != 0:
            tail = proc.stderr.decode(errors="replace")[-500:]
            raise StageError(
                f"external stage exited with status {proc.returncode}: {tail}")
        if not out_path.is_file():
            raise StageError("external stage produced no output file")
        try:
            samples, rate = audio.read_wav(out_path)
            return canonicalize(samples, rate)
        except Exception as exc:
            raise StageError(f"external stage output unreadable: {exc}") from exc


def dereverb(waveform: np.ndarray, params: dict | None = None,
             command_template: str | None = None,
             timeout_s: float = 300.0) -> np.ndarray:
    """Dereverberation slot: identity unless an external model is attached."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise StageError("dereverb: empty waveform")
    if command_template is None:
        return waveform
    return run_external_stage(waveform, command_template, timeout_s)


def _apply_stage(waveform: np.ndarray, stage: StageConfig
                 ) -> tuple[np.ndarray, dict]:
    extra: dict = {}
    p = stage.resolved_params()
    if stage.kind == "vad":
        out, boundaries = vad_trim(waveform, p)
        extra["boundaries"] = [[int(s), int(e)] for s, e in boundaries]
    elif stage.kind == "denoise":
        out = denoise_spectral_gate(waveform, p)
    elif stage.kind == "dereverb":
        out = dereverb(waveform, p, stage.command_template, p["timeout_s"])
    else:
        out = run_external_stage(waveform, stage.command_template,
                                 p["timeout_s"])
    return out, extra


def run_pipeline(waveform: np.ndarray,
                 cfg: PipelineConfig) -> tuple[np.ndarray, dict]:
    """Apply every configured stage in order; returns (waveform, provenance).

    Provenance records the stage sequence with parameters, per-stage sample
    counts, and wall time, so any enhanced file can be traced back to the
    exact processing it received. An empty stage list is the identity.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise StageError("pipeline: empty waveform")
    provenance: dict = {"stages": []}
    for stage in cfg.stages:
        t0 = time.perf_counter()
        in_samples = len(waveform)
        waveform, extra = _apply_stage(waveform, stage)
        entry = {"kind": stage.kind, "params": stage.resolved_params(),
                 "in_samples": in_samples, "out_samples": len(waveform),
                 "wall_ms": (time.perf_counter() - t0) * 1000.0}
        if stage.command_template is not None:
            entry["command_template"] = stage.command_template
        entry.update(extra)
        provenance["stages"].append(entry)
    return waveform, provenance
