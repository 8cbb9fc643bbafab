"""Reading and writing RIFF WAV files as float64 sample arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import AudioError

INT16_SCALE = 32768.0
INT32_SCALE = 2147483648.0


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file into float64 samples scaled to [-1, 1].

    Returns ``(samples, rate)``. Mono files come back as 1-D arrays,
    multi-channel files as ``(n_samples, n_channels)``. PCM 16-bit and
    32-bit integer data are rescaled to full-scale floats; float32/float64
    data pass through unscaled.
    """
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"unreadable WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / INT16_SCALE
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / INT32_SCALE
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample format {data.dtype} in {path}")
    return samples, int(rate)


def write_wav(path: str | Path, samples: np.ndarray, rate: int = 16000,
              fmt: str = "pcm16") -> None:
    """Write float samples in [-1, 1] to a WAV file.

    ``fmt`` is ``"pcm16"`` or ``"float32"``. PCM output rounds to the
    nearest 16-bit code with clipping, so a value read back from a PCM16
    file survives a write/read round trip bit-exactly.
    """
    path = Path(path)
    samples = np.asarray(samples)
    if samples.size == 0:
        raise AudioError("refusing to write an empty waveform")
    if fmt == "pcm16":
        codes = np.clip(np.round(samples * INT16_SCALE), -32768, 32767)
        wavfile.write(path, rate, codes.astype(np.int16))
    elif fmt == "float32":
        wavfile.write(path, rate, samples.astype(np.float32))
    else:
        raise AudioError(f"unknown WAV output format: {fmt!r}")
