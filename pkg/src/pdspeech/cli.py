"""Command-line surface: plan, train, enhance, eval, fuse.

Every command is a batch operation over files; rerunning with the same seed
into a fresh output directory reproduces the outputs byte for byte. Exit
codes: 0 success, 1 validation error, 2 partial batch failure, 3 internal
error.

Training configs are plain JSON, captured into the run directory for
provenance. They may not reference an enhancement pipeline: enhancement is
a testing-phase step, applied by ``pdspeech enhance`` to produce an
enhanced audio tree whose manifest then serves as a test manifest.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import click

from . import audio, evaluate, trainer
from .backbone import BackboneSpec
from .corpus import (ClipRecord, FoldPlan, SAMPLE_RATE, canonicalize,
                     load_manifest, materialize_fold, plan_folds)
from .enhance import PipelineConfig, run_pipeline
from .errors import ConfigError, PartialBatchFailure, PdspeechError
from .evaluate import LEVELS, build_report, render_table, report_to_json
from .trainer import TrainConfig

_ENHANCEMENT_KEYS = {"enhancement", "pipeline", "enhance", "stages"}
_RUN_CONFIG_KEYS = {"manifest", "plan", "backbone", "train", "mode",
                    "test_manifest", "val_fraction", "test_tag", "out_dir",
                    "eval_levels"}


@dataclass
class RunConfig:
    """One training run, fully described: data, plan, model, schedule, outputs."""

    manifest: Path
    plan_payload: str | dict
    spec: BackboneSpec
    train: TrainConfig
    out_dir: Path
    mode: str = "cv"
    test_manifest: Path | None = None
    val_fraction: float = 0.0
    test_tag: str | None = None
    eval_levels: tuple[str, ...] = LEVELS

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"run config not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("run config must be a JSON object")
        smuggled = _ENHANCEMENT_KEYS & set(payload)
        if smuggled:
            raise ConfigError(
                f"config attaches enhancement ({sorted(smuggled)}) to training; "
                f"enhancement is applied only in the testing phase, via "
                f"`pdspeech enhance`")
        unknown = set(payload) - _RUN_CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        for key in ("manifest", "plan", "backbone", "train", "out_dir"):
            if key not in payload:
                raise ConfigError(f"run config is missing {key!r}")
        base = path.parent

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        mode = payload.get("mode", "cv")
        if mode not in ("cv", "all_data"):
            raise ConfigError(f"mode must be cv or all_data, got {mode!r}")
        test_manifest = payload.get("test_manifest")
        if mode == "all_data" and test_manifest is None:
            raise ConfigError("all_data mode requires test_manifest")
        levels = tuple(payload.get("eval_levels", LEVELS))
        bad = set(levels) - set(LEVELS)
        if bad or not levels:
            raise ConfigError(f"eval_levels must be drawn from {LEVELS}")
        return cls(
            manifest=resolve(payload["manifest"]),
            plan_payload=payload["plan"],
            spec=BackboneSpec.from_dict(payload["backbone"]),
            train=TrainConfig.from_dict(payload["train"]),
            out_dir=resolve(payload["out_dir"]),
            mode=mode,
            test_manifest=resolve(test_manifest) if test_manifest else None,
            val_fraction=float(payload.get("val_fraction", 0.0)),
            test_tag=payload.get("test_tag"),
            eval_levels=levels,
        )

    def resolve_plan(self, speakers) -> FoldPlan:
        payload = self.plan_payload
        if isinstance(payload, str):
            q = Path(payload)
            if not q.is_absolute():
                q = self.manifest.parent / q
            return FoldPlan.load(q)
        if isinstance(payload, dict) and "assignments" in payload:
            return FoldPlan.from_dict(payload)
        if isinstance(payload, dict):
            extra = set(payload) - {"n_folds", "seed"}
            if extra:
                raise ConfigError(f"inline plan has unknown keys: {sorted(extra)}")
            return plan_folds(speakers, int(payload.get("n_folds", 10)),
                              int(payload.get("seed", 0)))
        raise ConfigError("plan must be a file path or an inline plan object")

    def captured(self, plan: FoldPlan) -> dict:
        return {"manifest": str(self.manifest),
                "plan": {"n_folds": plan.n_folds, "seed": plan.seed,
                         "assignments": plan.assignments},
                "backbone": self.spec.to_dict(),
                "train": self.train.to_dict(),
                "mode": self.mode,
                "test_manifest": str(self.test_manifest) if self.test_manifest else None,
                "val_fraction": self.val_fraction,
                "test_tag": self.test_tag,
                "out_dir": str(self.out_dir),
                "eval_levels": list(self.eval_levels)}


def _guard(func):
    """Map exceptions to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            func(*args, **kwargs)
        except PartialBatchFailure as exc:
            click.echo(f"partial failure: {exc}", err=True)
            sys.exit(2)
        except PdspeechError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except Exception as exc:
            click.echo(f"internal error: {exc!r}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
@click.version_option(package_name="pdspeech")
def main() -> None:
    """Parkinson's-disease speech detection: training, enhancement, evaluation."""


@main.command("plan")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--n-folds", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Where to write the fold-plan JSON.")
@_guard
def cmd_plan(manifest: str, n_folds: int, seed: int, out: str) -> None:
    """Plan speaker-independent, class-balanced folds for MANIFEST."""
    speakers, _ = load_manifest(manifest)
    plan = plan_folds(speakers, n_folds, seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    click.echo(f"wrote {out}: {len(plan.assignments)} speakers over {n_folds} folds")


def _cv_fold_job(args):
    train_c, test_c, speakers, cfg, spec, fold, fold_dir = args
    return fold, trainer.run_single_fold(train_c, test_c, speakers, cfg, spec,
                                         fold, fold_dir)


@main.command("train")
@click.option("--config", "config_path", required=True,
              type=click.Path(dir_okay=False), help="Run-config JSON.")
@click.option("--out", "out_override", default=None, type=click.Path(file_okay=False),
              help="Override the config's output directory.")
@click.option("--jobs", default=1, show_default=True,
              help="Parallel fold workers (cv mode).")
@_guard
def cmd_train(config_path: str, out_override: str | None, jobs: int) -> None:
    """Run the training protocol described by a run config."""
    cfg = RunConfig.from_file(config_path)
    if out_override:
        cfg.out_dir = Path(out_override)
    speakers, clips = load_manifest(cfg.manifest)
    plan = cfg.resolve_plan(speakers)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.captured(plan), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    if cfg.mode == "cv":
        if jobs > 1:
            folds = []
            for fold in range(plan.n_folds):
                train_c, test_c = materialize_fold(plan, fold, clips)
                trainer._assert_no_leakage(train_c, test_c, fold)
                folds.append((train_c, test_c, speakers, cfg.train, cfg.spec,
                              fold, out_dir / f"fold{fold}"))
            with ProcessPoolExecutor(max_workers=jobs,
                                     mp_context=get_context("spawn")) as pool:
                results = dict(pool.map(_cv_fold_job, folds))
            predictions = [rec for fold in sorted(results)
                           for rec in results[fold][1]]
        else:
            result = trainer.run_protocol(speakers, clips, plan, cfg.train,
                                          cfg.spec, out_dir, mode="cv")
            predictions = result.predictions
        report_speakers, report_clips = speakers, clips
    else:
        test_speakers, test_clips = load_manifest(cfg.test_manifest)
        if cfg.val_fraction == 0.0:
            click.echo("note: all_data mode with no held-out validation "
                       "fraction (set val_fraction to hold speakers out)")
        result = trainer.run_protocol(speakers, clips, plan, cfg.train, cfg.spec,
                                      out_dir, mode="all_data",
                                      test_speakers=test_speakers,
                                      test_clips=test_clips,
                                      val_fraction=cfg.val_fraction,
                                      test_tag=cfg.test_tag)
        predictions = result.predictions
        report_speakers, report_clips = test_speakers, test_clips

    trainer.save_predictions(predictions, out_dir / "predictions.jsonl")
    report = build_report(predictions, report_speakers, report_clips,
                          levels=cfg.eval_levels)
    (out_dir / "metrics.json").write_text(report_to_json(report), encoding="utf-8")
    (out_dir / "metrics_table.txt").write_text(render_table(report), encoding="utf-8")
    click.echo(f"run complete: {out_dir}")
    click.echo(render_table(report), nl=False)


def _enhance_clip_job(args):
    clip, pipeline_dict, out_wav = args
    pipeline = PipelineConfig.from_dict(pipeline_dict)
    samples, rate = audio.read_wav(clip.path)
    wave = canonicalize(samples, rate)
    enhanced, provenance = run_pipeline(wave, pipeline)
    audio.write_wav(out_wav, enhanced, SAMPLE_RATE, fmt="float32")
    return len(enhanced), provenance


@main.command("enhance")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--pipeline", "pipeline_path", required=True,
              type=click.Path(dir_okay=False), help="Pipeline-config JSON.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory for the enhanced audio tree.")
@click.option("--jobs", default=1, show_default=True,
              help="Parallel clip workers.")
@_guard
def cmd_enhance(manifest: str, pipeline_path: str, out: str, jobs: int) -> None:
    """Apply a test-time enhancement pipeline to every clip in MANIFEST."""
    if not Path(pipeline_path).is_file():
        raise ConfigError(f"pipeline config not found: {pipeline_path}")
    try:
        pipeline_dict = json.loads(Path(pipeline_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"pipeline config is not valid JSON: {exc}") from exc
    pipeline = PipelineConfig.from_dict(pipeline_dict)
    speakers, clips = load_manifest(manifest)
    out_dir = Path(out)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)

    jobs_args = [(clip, pipeline.to_dict(), out_dir / "wav" / f"{clip.clip_id}.wav")
                 for clip in clips]
    results: dict[str, tuple] = {}
    failures: dict[str, str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs,
                                 mp_context=get_context("spawn")) as pool:
            futures = {pool.submit(_enhance_clip_job, a): a[0] for a in jobs_args}
            for future, clip in futures.items():
                try:
                    results[clip.clip_id] = future.result()
                except Exception as exc:
                    failures[clip.clip_id] = str(exc)
    else:
        for args in jobs_args:
            try:
                results[args[0].clip_id] = _enhance_clip_job(args)
            except Exception as exc:
                failures[args[0].clip_id] = str(exc)

    speaker_by_id = {s.speaker_id: s for s in speakers}
    with (out_dir / "enhancement_provenance.jsonl").open("w", encoding="utf-8") as prov, \
            (out_dir / "manifest.csv").open("w", newline="", encoding="utf-8") as mf:
        mf.write(",".join(("clip_id", "speaker_id", "path", "label", "gender",
                           "task", "sample_rate", "duration_s")) + "\n")
        for clip in clips:
            if clip.clip_id in failures:
                prov.write(json.dumps(
                    {"clip_id": clip.clip_id, "ok": False,
                     "error": failures[clip.clip_id]}, sort_keys=True) + "\n")
                continue
            n_samples, provenance = results[clip.clip_id]
            prov.write(json.dumps(
                {"clip_id": clip.clip_id, "ok": True, **provenance},
                sort_keys=True) + "\n")
            spk = speaker_by_id[clip.speaker_id]
            mf.write(",".join([clip.clip_id, clip.speaker_id,
                               f"wav/{clip.clip_id}.wav",
                               "PD" if spk.label == 1 else "HC", spk.gender,
                               clip.task, str(SAMPLE_RATE),
                               f"{n_samples / SAMPLE_RATE:.6f}"]) + "\n")
    click.echo(f"enhanced {len(results)}/{len(clips)} clips into {out_dir}")
    if failures:
        raise PartialBatchFailure(
            f"{len(failures)} clip(s) failed: {sorted(failures)[:10]}")


@main.command("eval")
@click.argument("predictions", type=click.Path(dir_okay=False))
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--plan", "plan_path", default=None, type=click.Path(dir_okay=False),
              help="Fold plan to cross-check prediction fold assignments.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Where to write metrics.json.")
@click.option("--levels", default=",".join(LEVELS), show_default=True,
              help="Comma-separated evaluation levels.")
@click.option("--table/--no-table", default=True, show_default=True,
              help="Print the aligned metrics table.")
@_guard
def cmd_eval(predictions: str, manifest: str, plan_path: str | None, out: str,
             levels: str, table: bool) -> None:
    """Compute the five metrics per fold plus cross-fold mean and std."""
    level_tuple = tuple(x.strip() for x in levels.split(",") if x.strip())
    bad = set(level_tuple) - set(LEVELS)
    if bad or not level_tuple:
        raise ConfigError(f"levels must be drawn from {LEVELS}, got {levels!r}")
    records = evaluate.load_predictions(predictions)
    speakers, clips = load_manifest(manifest)
    if plan_path:
        plan = FoldPlan.load(plan_path)
        for rec in records:
            expected = plan.assignments.get(rec.speaker_id)
            if rec.fold != trainer.ALL_DATA_FOLD and expected not in (None, rec.fold):
                raise ConfigError(
                    f"prediction for {rec.clip_id} carries fold {rec.fold} but "
                    f"the plan assigns speaker {rec.speaker_id} to fold {expected}")
    report = build_report(records, speakers, clips, levels=level_tuple)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report_to_json(report), encoding="utf-8")
    click.echo(f"wrote {out_path}")
    if table:
        click.echo(render_table(report), nl=False)


@main.command("fuse")
@click.argument("prediction_files", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Where to write the fused predictions JSONL.")
@_guard
def cmd_fuse(prediction_files: tuple[str, ...], out: str) -> None:
    """Average the probabilities of two or more prediction files."""
    if len(prediction_files) < 2:
        raise ConfigError("fuse needs at least two prediction files")
    sets = [evaluate.load_predictions(p) for p in prediction_files]
    fused = evaluate.fuse(sets)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    trainer.save_predictions(fused, out)
    click.echo(f"wrote {out}: {len(fused)} fused records "
               f"from {len(prediction_files)} models")


if __name__ == "__main__":
    main()
