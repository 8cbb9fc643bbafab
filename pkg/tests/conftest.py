import csv
from pathlib import Path

import numpy as np
import pytest

from pdspeech.corpus import MANIFEST_COLUMNS
from pdspeech.synthetic import write_corpus


@pytest.fixture(scope="session")
def demo_corpus(tmp_path_factory) -> Path:
    """Small on-disk corpus shared by read-only tests: 8 speakers, 1 clip each."""
    root = tmp_path_factory.mktemp("demo_corpus")
    return write_corpus(root, n_per_class=4, clips_per_speaker=1,
                        duration_s=10.0, seed=0)


def write_manifest(path: Path, rows: list[dict]) -> Path:
    """Write manifest rows (dicts keyed by column name) to a CSV file."""
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def manifest_row(clip_id: str, speaker_id: str, label: str, gender: str,
                 task: str = "sentence", path: str = "missing.wav",
                 sample_rate: int = 16000, duration_s: float = 10.0) -> dict:
    return {"clip_id": clip_id, "speaker_id": speaker_id, "path": path,
            "label": label, "gender": gender, "task": task,
            "sample_rate": sample_rate, "duration_s": duration_s}


def tone(freq_hz: float, duration_s: float, amplitude: float = 0.5,
         sample_rate: int = 16000) -> np.ndarray:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq_hz * t)
