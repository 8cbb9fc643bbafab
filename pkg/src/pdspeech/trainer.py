"""End-to-end fine-tuning per fold: Adam, warmup-decay schedule, checkpoints.

One training loop owns one model. Everything downstream of the seed is
deterministic: parameter init, per-epoch shuffles, batch order, and thus the
final checkpoint, train log, and predictions.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio
from .backbone import BackboneSpec, create_backbone
from .corpus import (ClipRecord, FoldPlan, SpeakerRecord, canonicalize,
                     materialize_fold, segment_clip)
from .enhance import PipelineConfig, pipeline_tag, run_pipeline
from .errors import ConfigError, TrainingError
from .evaluate import PredictionRecord
from .head import ClassifierHead, bce_loss, head_forward, head_logits_batch

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_frac: float = 0.10
    batch_size: int = 32
    max_epochs: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden1: int = 256
    hidden2: int = 128
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**payload)


def lr_at_step(t: int, total_steps: int, cfg: TrainConfig) -> float:
    """Warmup-decay schedule: linear ramp to ``lr_peak`` over the first
    ``ceil(warmup_frac * total_steps)`` steps, then linear decay to zero.

    Defined for 0 <= t <= total_steps with lr(0) = lr(total_steps) = 0 and
    the peak reached exactly at the end of warmup.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= t <= total_steps:
        raise ConfigError(f"step {t} outside [0, {total_steps}]")
    # the small epsilon keeps float noise in warmup_frac * total from
    # bumping an exact-integer product up one step
    warmup = math.ceil(cfg.warmup_frac * total_steps - 1e-9)
    warmup = max(warmup, 1)
    if warmup == total_steps:
        raise ConfigError(
            f"degenerate schedule: warmup ({warmup}) spans all {total_steps} steps")
    # ratio first: exactly-representable fractions stay exact (e.g. peak at t = W)
    if t <= warmup:
        return cfg.lr_peak * (t / warmup)
    return cfg.lr_peak * ((total_steps - t) / (total_steps - warmup))


@dataclass
class TrainLogEntry:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainLog:
    entries: list[TrainLogEntry] = field(default_factory=list)

    def append(self, step: int, epoch: int, lr: float, loss: float) -> None:
        if self.entries and step <= self.entries[-1].step:
            raise TrainingError("train-log steps must be strictly increasing")
        self.entries.append(TrainLogEntry(step, epoch, lr, loss))

    def epoch_mean_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for e in self.entries:
            by_epoch.setdefault(e.epoch, []).append(e.loss)
        return [float(np.mean(by_epoch[k])) for k in sorted(by_epoch)]

    def save_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as handle:
            for e in self.entries:
                handle.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                log.entries.append(TrainLogEntry(**json.loads(line)))
        return log


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model, bit-exactly."""

    backbone_state: dict
    head_state: dict
    spec: BackboneSpec
    cfg: TrainConfig
    fold: int
    step: int
    metrics: dict

    def save(self, path: str | Path) -> None:
        torch.save({"backbone_state": self.backbone_state,
                    "head_state": self.head_state,
                    "spec": self.spec.to_dict(),
                    "cfg": self.cfg.to_dict(),
                    "fold": self.fold, "step": self.step,
                    "metrics": self.metrics}, str(path))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(str(path), weights_only=False)
        return cls(backbone_state=payload["backbone_state"],
                   head_state=payload["head_state"],
                   spec=BackboneSpec.from_dict(payload["spec"]),
                   cfg=TrainConfig.from_dict(payload["cfg"]),
                   fold=payload["fold"], step=payload["step"],
                   metrics=payload["metrics"])


def _labels_by_speaker(speakers: list[SpeakerRecord]) -> dict[str, int]:
    return {s.speaker_id: s.label for s in speakers}


def _load_segments(clips: list[ClipRecord], labels: dict[str, int],
                   enhancement: PipelineConfig | None = None):
    """Read, canonicalize, optionally enhance, and segment every clip."""
    entries = []
    for clip in clips:
        if clip.speaker_id not in labels:
            raise TrainingError(
                f"clip {clip.clip_id} references speaker {clip.speaker_id} "
                f"with no roster entry")
        samples, rate = audio.read_wav(clip.path)
        wave = canonicalize(samples, rate)
        if enhancement is not None:
            wave, _ = run_pipeline(wave, enhancement)
        for seg in segment_clip(clip, wave):
            entries.append((seg, labels[clip.speaker_id], clip.speaker_id))
    return entries


def _build_model(spec: BackboneSpec, cfg: TrainConfig,
                 fold_seed: int) -> tuple[torch.nn.Module, ClassifierHead]:
    backbone = create_backbone(spec, seed=fold_seed + 1)
    backbone = backbone.to(cfg.torch_dtype())
    backbone._dtype = cfg.torch_dtype()
    head = ClassifierHead(spec.n_layers, spec.dim, cfg.hidden1, cfg.hidden2,
                          seed=fold_seed + 2, dtype=cfg.torch_dtype())
    return backbone, head


def train_fold(train_clips: list[ClipRecord], speakers: list[SpeakerRecord],
               cfg: TrainConfig, spec: BackboneSpec,
               fold: int = 0) -> tuple[Checkpoint, TrainLog]:
    """Fine-tune backbone + head on one fold's training clips.

    Runs ``max_epochs`` passes over seed-shuffled segments in batches of
    ``batch_size`` (the last partial batch is kept), stepping Adam under the
    warmup-decay schedule. The backbone's parameters join the optimizer only
    when the spec marks it trainable.
    """
    if not train_clips:
        raise TrainingError("empty training set")
    labels = _labels_by_speaker(speakers)
    entries = _load_segments(train_clips, labels)
    present = {label for _, label, _ in entries}
    if present != {0, 1}:
        raise TrainingError(
            f"training set must contain both classes, found labels {sorted(present)}")

    dtype = cfg.torch_dtype()
    fold_seed = cfg.seed * 1000 + fold
    backbone, head = _build_model(spec, cfg, fold_seed)
    params = list(head.parameters())
    if spec.trainable:
        params += list(backbone.parameters())
    optimizer = torch.optim.Adam(params, lr=0.0,
                                 betas=(cfg.adam_beta1, cfg.adam_beta2),
                                 eps=cfg.adam_eps)

    samples = torch.stack([torch.as_tensor(seg.samples, dtype=dtype)
                           for seg, _, _ in entries])
    valid_lens = torch.tensor([seg.valid_len for seg, _, _ in entries])
    targets = torch.tensor([float(label) for _, label, _ in entries], dtype=dtype)

    n = len(entries)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    lr_at_step(0, total_steps, cfg)  # validate the schedule up front

    shuffle_gen = torch.Generator().manual_seed(fold_seed + 3)
    log = TrainLog()
    step = 0
    backbone.train()
    head.train()
    for epoch in range(cfg.max_epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            step += 1
            lr = lr_at_step(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            embeddings, mask = backbone.encode_batch(samples[idx], valid_lens[idx])
            if not spec.trainable:
                embeddings = embeddings.detach()
            logits = head_logits_batch(embeddings, mask, head)
            loss = bce_loss(logits, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step} (epoch {epoch}): {loss.item()}")
            loss.backward()
            optimizer.step()
            log.append(step, epoch, float(lr), float(loss.item()))

    epoch_means = log.epoch_mean_losses()
    checkpoint = Checkpoint(
        backbone_state={k: v.detach().clone() for k, v in backbone.state_dict().items()},
        head_state={k: v.detach().clone() for k, v in head.state_dict().items()},
        spec=spec, cfg=cfg, fold=fold, step=step,
        metrics={"first_epoch_mean_loss": epoch_means[0],
                 "final_epoch_mean_loss": epoch_means[-1]})
    return checkpoint, log


def _restore_model(checkpoint: Checkpoint) -> tuple[torch.nn.Module, ClassifierHead]:
    backbone, head = _build_model(checkpoint.spec, checkpoint.cfg,
                                  checkpoint.cfg.seed * 1000 + checkpoint.fold)
    try:
        backbone.load_state_dict(checkpoint.backbone_state)
        head.load_state_dict(checkpoint.head_state)
    except RuntimeError as exc:
        raise TrainingError(f"checkpoint does not match backbone spec: {exc}") from exc
    backbone.eval()
    head.eval()
    return backbone, head


def predict_fold(checkpoint: Checkpoint, test_clips: list[ClipRecord],
                 speakers: list[SpeakerRecord],
                 enhancement: PipelineConfig | None = None,
                 enhancement_tag: str | None = None) -> list[PredictionRecord]:
    """Emit one probability per segment of every test clip.

    ``enhancement`` applies the test-time pipeline to each clip before
    re-segmentation; records are tagged with the pipeline's stage list, with
    ``enhancement_tag`` (for pre-enhanced audio), or with ``"raw"``.
    """
    labels = _labels_by_speaker(speakers)
    backbone, head = _restore_model(checkpoint)
    if enhancement is not None:
        tag = pipeline_tag(enhancement)
    else:
        tag = enhancement_tag or "raw"
    speaker_of = {c.clip_id: c.speaker_id for c in test_clips}
    records = []
    with torch.no_grad():
        for clip in test_clips:
            if clip.speaker_id not in labels:
                raise TrainingError(
                    f"clip {clip.clip_id} references speaker {clip.speaker_id} "
                    f"with no roster entry")
            samples, rate = audio.read_wav(clip.path)
            wave = canonicalize(samples, rate)
            if enhancement is not None:
                wave, _ = run_pipeline(wave, enhancement)
            for seg in segment_clip(clip, wave):
                stack = backbone.encode(seg)
                prob = head_forward(stack, head)
                records.append(PredictionRecord(
                    clip_id=clip.clip_id, speaker_id=speaker_of[clip.clip_id],
                    segment_idx=seg.index, prob=float(prob),
                    fold=checkpoint.fold, model=checkpoint.spec.name,
                    enhancement=tag))
    return records


def save_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")


ALL_DATA_FOLD = -1  # fold index used when a single model trains on all folds


@dataclass
class ProtocolResult:
    checkpoint_paths: list[Path]
    predictions: list[PredictionRecord]


def _assert_no_leakage(train_clips: list[ClipRecord], test_clips: list[ClipRecord],
                       fold: int) -> None:
    shared = ({c.speaker_id for c in train_clips}
              & {c.speaker_id for c in test_clips})
    if shared:
        raise TrainingError(
            f"speaker leakage in fold {fold}: {sorted(shared)} appear in both splits")


def run_protocol(speakers: list[SpeakerRecord], clips: list[ClipRecord],
                 plan: FoldPlan, cfg: TrainConfig, spec: BackboneSpec,
                 out_dir: str | Path, mode: str = "cv",
                 test_speakers: list[SpeakerRecord] | None = None,
                 test_clips: list[ClipRecord] | None = None,
                 val_fraction: float = 0.0,
                 test_tag: str | None = None,
                 folds: list[int] | None = None) -> ProtocolResult:
    """Run the cross-validation protocol (or the single-model variant).

    ``mode="cv"``: train one model per fold on its training split and
    predict its held-out split; every clip is predicted exactly once.
    ``mode="all_data"``: train a single model on every speaker in the plan
    (optionally holding out ``val_fraction`` of speakers per class, unused
    for model selection) and predict an external test manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_paths: list[Path] = []
    predictions: list[PredictionRecord] = []

    if mode == "cv":
        for fold in folds if folds is not None else range(plan.n_folds):
            train_c, test_c = materialize_fold(plan, fold, clips)
            _assert_no_leakage(train_c, test_c, fold)
            fold_result = run_single_fold(train_c, test_c, speakers, cfg, spec,
                                          fold, out_dir / f"fold{fold}")
            checkpoint_paths.append(fold_result[0])
            predictions.extend(fold_result[1])
    elif mode == "all_data":
        if test_clips is None or test_speakers is None:
            raise ConfigError("all_data mode needs an external test manifest")
        train_c = list(clips)
        if val_fraction > 0.0:
            train_c = _drop_validation_speakers(train_c, speakers, val_fraction,
                                                cfg.seed)
        fold_result = run_single_fold(train_c, test_clips,
                                      speakers + test_speakers, cfg, spec,
                                      ALL_DATA_FOLD, out_dir / "all",
                                      test_tag=test_tag)
        checkpoint_paths.append(fold_result[0])
        predictions.extend(fold_result[1])
    else:
        raise ConfigError(f"unknown protocol mode {mode!r}")
    return ProtocolResult(checkpoint_paths, predictions)


def run_single_fold(train_c: list[ClipRecord], test_c: list[ClipRecord],
                    speakers: list[SpeakerRecord], cfg: TrainConfig,
                    spec: BackboneSpec, fold: int, fold_dir: Path,
                    test_tag: str | None = None) -> tuple[Path, list[PredictionRecord]]:
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    checkpoint, log = train_fold(train_c, speakers, cfg, spec, fold)
    ckpt_path = fold_dir / "checkpoint.bin"
    checkpoint.save(ckpt_path)
    log.save_jsonl(fold_dir / "trainlog.jsonl")
    records = predict_fold(checkpoint, test_c, speakers, enhancement_tag=test_tag)
    save_predictions(records, fold_dir / "predictions.jsonl")
    return ckpt_path, records


def _drop_validation_speakers(clips: list[ClipRecord],
                              speakers: list[SpeakerRecord],
                              val_fraction: float, seed: int) -> list[ClipRecord]:
    """Hold out a class-stratified speaker fraction from training (logged, unused)."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    held: set[str] = set()
    for label in (0, 1):
        ids = sorted(s.speaker_id for s in speakers if s.label == label)
        k = int(round(val_fraction * len(ids)))
        held.update(ids[i] for i in rng.permutation(len(ids))[:k])
    return [c for c in clips if c.speaker_id not in held]
