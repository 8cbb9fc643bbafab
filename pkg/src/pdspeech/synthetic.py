"""Synthetic desk-scale corpora: separable band-noise classes, on-disk WAVs.

These generators exist so the full protocol can be exercised and verified
without any access-restricted clinical data: class 0 (HC) clips are low-band
noise, class 1 (PD) clips are high-band noise, trivially separable by any
competent encoder.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import audio
from .corpus import MANIFEST_COLUMNS, SAMPLE_RATE, TASKS, SpeakerRecord

LOW_BAND = (100.0, 900.0)
HIGH_BAND = (3000.0, 6000.0)


def synthetic_roster(n_per_class: int = 50, seed: int = 0) -> list[SpeakerRecord]:
    """Balanced roster: n PD + n HC speakers, genders split as evenly as n allows."""
    rng = np.random.default_rng(seed)
    speakers = []
    for label, prefix in ((1, "pd"), (0, "hc")):
        for i in range(n_per_class):
            speakers.append(SpeakerRecord(
                speaker_id=f"{prefix}{i:03d}", label=label,
                gender="M" if i % 2 == 0 else "F",
                age=int(rng.integers(31, 87))))
    return speakers


def band_noise(rng: np.random.Generator, n_samples: int, low_hz: float,
               high_hz: float, sample_rate: int = SAMPLE_RATE,
               peak: float = 0.5) -> np.ndarray:
    """White noise band-passed to [low_hz, high_hz] by spectral masking."""
    noise = rng.standard_normal(n_samples)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate)
    spectrum[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    shaped = np.fft.irfft(spectrum, n=n_samples)
    return shaped / np.max(np.abs(shaped)) * peak


def write_corpus(out_dir: str | Path, n_per_class: int = 20,
                 clips_per_speaker: int = 3, duration_s: float = 10.0,
                 seed: int = 0, low_band: tuple[float, float] = LOW_BAND,
                 high_band: tuple[float, float] = HIGH_BAND) -> Path:
    """Write WAVs plus a manifest.csv under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = synthetic_roster(n_per_class, seed)
    n_samples = int(round(duration_s * SAMPLE_RATE))
    manifest_path = out_dir / "manifest.csv"
    with manifest_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(MANIFEST_COLUMNS)
        for speaker in speakers:
            band = high_band if speaker.label == 1 else low_band
            for k in range(clips_per_speaker):
                clip_id = f"{speaker.speaker_id}_c{k}"
                rel_path = f"wav/{clip_id}.wav"
                wave = band_noise(rng, n_samples, *band)
                audio.write_wav(wav_dir / f"{clip_id}.wav", wave, SAMPLE_RATE,
                                fmt="float32")
                writer.writerow([clip_id, speaker.speaker_id, rel_path,
                                 "PD" if speaker.label == 1 else "HC",
                                 speaker.gender, TASKS[k % len(TASKS)],
                                 SAMPLE_RATE, duration_s])
    return manifest_path
