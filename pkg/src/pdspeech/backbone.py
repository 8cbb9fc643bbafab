"""Encoder contract: waveform segment in, stack of per-layer frame embeddings out.

Any encoder that maps a canonical 10 s segment to a :class:`LayerStack` can be
registered by name and used by the trainer. Two things ship built in: a
deterministic toy backbone (convolutional downsampler plus a few
self-attention blocks) for desk-scale verification, and a log-mel frontend
for encoders that consume spectrograms instead of raw audio. Adapters for
large pretrained encoders plug into the same registry; their weights are not
vendored here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.signal import get_window
from torch import nn

from .corpus import SAMPLE_RATE, SEGMENT_SAMPLES, Segment
from .errors import AudioError, BackboneError

TOY_FRAME_RATE = 50.0  # conv strides multiply to 320 samples = 1/50 s at 16 kHz
TOY_CONV_LAYOUT = ((10, 10), (8, 8), (4, 4))  # (kernel, stride); kernel == stride


@dataclass
class BackboneSpec:
    """Static description of an encoder: what it eats and what it emits."""

    name: str
    input_kind: str  # "raw_waveform" or "log_mel"
    n_layers: int
    dim: int
    frame_rate: float
    trainable: bool = True

    def __post_init__(self) -> None:
        if self.input_kind not in ("raw_waveform", "log_mel"):
            raise BackboneError(
                f"input_kind must be raw_waveform or log_mel, got {self.input_kind!r}")
        if self.n_layers < 1 or self.dim < 1:
            raise BackboneError("n_layers and dim must be >= 1")

    def to_dict(self) -> dict:
        return {"name": self.name, "input_kind": self.input_kind,
                "n_layers": self.n_layers, "dim": self.dim,
                "frame_rate": self.frame_rate, "trainable": self.trainable}

    @classmethod
    def from_dict(cls, payload: dict) -> "BackboneSpec":
        try:
            return cls(name=str(payload["name"]),
                       input_kind=str(payload["input_kind"]),
                       n_layers=int(payload["n_layers"]), dim=int(payload["dim"]),
                       frame_rate=float(payload["frame_rate"]),
                       trainable=bool(payload.get("trainable", True)))
        except KeyError as exc:
            raise BackboneError(f"backbone spec missing field {exc}") from exc


@dataclass
class LayerStack:
    """Per-layer frame embeddings: (L, T, D) plus a frame-validity mask."""

    embeddings: torch.Tensor
    frame_mask: torch.Tensor
    frame_rate: float

    def __post_init__(self) -> None:
        if self.embeddings.dim() != 3:
            raise BackboneError(
                f"embeddings must be (layers, frames, dim), got {tuple(self.embeddings.shape)}")
        if self.frame_mask.dim() != 1 or len(self.frame_mask) != self.embeddings.shape[1]:
            raise BackboneError("frame_mask length must equal the frame count")
        if self.frame_mask.dtype != torch.bool:
            raise BackboneError("frame_mask must be boolean")
        if not bool(self.frame_mask.any()):
            raise BackboneError("a LayerStack needs at least one valid frame")

    @property
    def n_layers(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_frames(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


BackboneFactory = Callable[[BackboneSpec, int], "nn.Module"]
_REGISTRY: dict[str, BackboneFactory] = {}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    _REGISTRY[name] = factory


def create_backbone(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Instantiate the registered encoder named by ``spec.name``."""
    try:
        factory = _REGISTRY[spec.name]
    except KeyError:
        raise BackboneError(
            f"no backbone registered under {spec.name!r}; "
            f"known: {sorted(_REGISTRY)}") from None
    return factory(spec, seed)


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministically initialize a module's parameters from a seed.

    Linear/conv weights get uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws
    from a dedicated generator, biases likewise; LayerNorm starts at
    identity. Walk order is the module tree order, so the layout fixes the
    stream.
    """
    gen = torch.Generator().manual_seed(seed)
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv1d)):
            fan_in = sub.weight.shape[1:].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(sub, nn.LayerNorm):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.fill_(0.0)


class _AttentionBlock(nn.Module):
    """Pre-norm single-head self-attention followed by a 2x MLP, both residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, T, D)
        h = self.norm_attn(x)
        q, k, v = self.query(h), self.key(h), self.value(h)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        x = x + self.proj(attn @ v)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class _LogCompress(nn.Module):
    """Energy-style compression ``log(x^2 + eps)``, as in log-filterbank frontends."""

    def __init__(self, eps: float = 1e-4):
        super().__init__()
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log(x * x + self.eps)


class ToyBackbone(nn.Module):
    """Small trainable encoder over raw waveforms, deterministic given a seed.

    The downsampler is a learnable-filterbank frontend: a first convolution
    acts as a filterbank whose outputs are log-energy compressed, and two
    further strided convolutions mix channels and time (stride product 320,
    so 16 kHz audio lands at 50 frames/s). ``n_layers - 1`` self-attention
    blocks then refine the frames; emitted layers are the conv output plus
    every block output. Kernel sizes equal strides, so layer-0 frame ``t``
    depends on exactly the samples ``[320 t, 320 (t + 1))``.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if spec.input_kind != "raw_waveform":
            raise BackboneError("toy backbone consumes raw waveforms")
        if spec.frame_rate != TOY_FRAME_RATE:
            raise BackboneError(
                f"toy backbone emits {TOY_FRAME_RATE} frames/s, spec says {spec.frame_rate}")
        if spec.n_layers < 2:
            raise BackboneError("toy backbone needs n_layers >= 2 (conv + blocks)")
        self.spec = spec
        dim = spec.dim
        convs: list[nn.Module] = []
        in_ch = 1
        for i, (kernel, stride) in enumerate(TOY_CONV_LAYOUT):
            convs.append(nn.Conv1d(in_ch, dim, kernel_size=kernel, stride=stride))
            convs.append(_LogCompress() if i == 0 else nn.GELU())
            in_ch = dim
        self.frontend = nn.Sequential(*convs)
        self.blocks = nn.ModuleList(_AttentionBlock(dim)
                                    for _ in range(spec.n_layers - 1))
        self.samples_per_frame = int(SAMPLE_RATE / TOY_FRAME_RATE)
        seeded_init_(self, seed)
        self.to(dtype)
        self._dtype = dtype

    def conv_frontend(self, samples: torch.Tensor) -> torch.Tensor:
        """Run only the convolutional downsampler: (B, n) -> (B, T, D)."""
        feats = self.frontend(samples.unsqueeze(1))
        return feats.transpose(1, 2)

    def encode_batch(self, samples: torch.Tensor,
                     valid_lens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode (B, 160000) waveforms to ((B, L, T, D) embeddings, (B, T) mask)."""
        if samples.dim() != 2 or samples.shape[1] != SEGMENT_SAMPLES:
            raise BackboneError(
                f"expected (batch, {SEGMENT_SAMPLES}) samples, got {tuple(samples.shape)}")
        h = self.conv_frontend(samples.to(self._dtype))
        layers = [h]
        for block in self.blocks:
            h = block(h)
            layers.append(h)
        embeddings = torch.stack(layers, dim=1)  # (B, L, T, D)
        n_frames = embeddings.shape[2]
        centers = (torch.arange(n_frames, dtype=torch.float64) + 0.5) * self.samples_per_frame
        mask = centers.unsqueeze(0) < valid_lens.to(torch.float64).unsqueeze(1)
        return embeddings, mask

    def encode(self, segment: Segment) -> LayerStack:
        """Encode one canonical segment; frame mask follows receptive-field centers."""
        samples = torch.as_tensor(segment.samples, dtype=self._dtype).unsqueeze(0)
        valid = torch.tensor([segment.valid_len])
        embeddings, mask = self.encode_batch(samples, valid)
        return LayerStack(embeddings=embeddings[0], frame_mask=mask[0],
                          frame_rate=TOY_FRAME_RATE)


def toy_backbone_spec(n_layers: int = 4, dim: int = 32,
                      trainable: bool = True) -> BackboneSpec:
    return BackboneSpec(name="toy", input_kind="raw_waveform", n_layers=n_layers,
                        dim=dim, frame_rate=TOY_FRAME_RATE, trainable=trainable)


def toy_backbone_encode(segment: Segment, seed: int = 0, n_layers: int = 4,
                        dim: int = 32) -> LayerStack:
    """One-shot encode with a freshly seeded toy backbone."""
    return ToyBackbone(toy_backbone_spec(n_layers, dim), seed=seed).encode(segment)


register_backbone("toy", lambda spec, seed: ToyBackbone(spec, seed=seed))


# --- log-mel frontend -------------------------------------------------------

MEL_BANDS = 80
MEL_WINDOW = 400  # 25 ms at 16 kHz
MEL_HOP = 160  # 10 ms
MEL_FLOOR = 1e-10


def _hz_to_mel(hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = MEL_BANDS, n_fft: int = MEL_WINDOW,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_pts = np.asarray(_mel_to_hz(mel_pts))
    bank = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def log_mel_frontend(samples: np.ndarray, n_mels: int = MEL_BANDS,
                     window: int = MEL_WINDOW, hop: int = MEL_HOP,
                     floor: float = MEL_FLOOR) -> np.ndarray:
    """Log mel spectrogram of a canonical waveform: (frames, n_mels).

    25 ms Hann windows, 10 ms hop, no centering, natural-log compression
    with a power floor; frame count is ``1 + (n - window) // hop``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or len(samples) < window:
        raise AudioError(
            f"log-mel input must be a mono waveform of at least {window} samples")
    frames = np.lib.stride_tricks.sliding_window_view(samples, window)[::hop]
    win = get_window("hann", window, fftbins=True)
    power = np.abs(np.fft.rfft(frames * win, axis=1)) ** 2
    mel_power = power @ mel_filterbank(n_mels, window).T
    return np.log(np.maximum(mel_power, floor))


# segment-level convenience mirroring encode()'s precondition
def log_mel_segment(segment: Segment) -> np.ndarray:
    return log_mel_frontend(segment.samples)
