"""Classifier head: layer-weighted sum, attention pooling, two FC layers, sigmoid.

The head turns a backbone's :class:`~pdspeech.backbone.LayerStack` into a
single detection probability. Layer mixing weights and per-frame attention
scores are learned; both are normalized with a softmax, so the layer mix is
a convex combination and masked (padding) frames receive exactly zero
pooling weight. Pooling operates on the unmasked frames only, which makes
the output literally invariant to appending masked frames.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LayerStack, seeded_init_
from .errors import HeadInputError

DEFAULT_HIDDEN1 = 256
DEFAULT_HIDDEN2 = 128


class ClassifierHead(nn.Module):
    """Learnable head mapping (L, T, D) embeddings to a probability.

    Parameters: ``layer_logits`` (length L, softmax-normalized layer
    weights, initialized to a uniform mix), a D->1 affine attention scorer,
    two ReLU FC layers (D->H1->H2), and a single output node read through a
    sigmoid.
    """

    def __init__(self, n_layers: int, dim: int, hidden1: int = DEFAULT_HIDDEN1,
                 hidden2: int = DEFAULT_HIDDEN2, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if n_layers < 1 or dim < 1 or hidden1 < 1 or hidden2 < 1:
            raise HeadInputError("all head dimensions must be >= 1")
        self.n_layers = n_layers
        self.dim = dim
        self.layer_logits = nn.Parameter(torch.zeros(n_layers))
        self.attn = nn.Linear(dim, 1)
        self.fc1 = nn.Linear(dim, hidden1)
        self.fc2 = nn.Linear(hidden1, hidden2)
        self.out = nn.Linear(hidden2, 1)
        seeded_init_(self, seed)
        self.to(dtype)
        self._dtype = dtype

    def forward(self, stack: LayerStack) -> torch.Tensor:
        return head_forward(stack, self)


def layer_weights(layer_logits: torch.Tensor) -> torch.Tensor:
    """Normalized-exponential layer weights: positive, summing to one."""
    return torch.softmax(layer_logits, dim=0)


def weighted_layer_sum(embeddings: torch.Tensor,
                       layer_logits: torch.Tensor) -> torch.Tensor:
    """Convex combination over layers: (L, T, D) -> (T, D)."""
    if embeddings.dim() != 3:
        raise HeadInputError(
            f"expected (layers, frames, dim) embeddings, got {tuple(embeddings.shape)}")
    if layer_logits.dim() != 1 or len(layer_logits) != embeddings.shape[0]:
        raise HeadInputError(
            f"layer_logits length {tuple(layer_logits.shape)} does not match "
            f"{embeddings.shape[0]} layers")
    alpha = layer_weights(layer_logits).to(embeddings.dtype)
    return torch.einsum("l,ltd->td", alpha, embeddings)


def attention_pool(frames: torch.Tensor, mask: torch.Tensor,
                   attn: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool (T, D) frames to one D-vector with learned normalized scores.

    Masked frames are excluded from scoring outright (not just down-weighted),
    so they cannot perturb the result even at the last bit. Returns
    ``(pooled, beta)`` where ``beta`` is the full-length weight vector with
    zeros at masked positions.
    """
    if frames.dim() != 2:
        raise HeadInputError(f"expected (frames, dim), got {tuple(frames.shape)}")
    if mask.dim() != 1 or len(mask) != frames.shape[0]:
        raise HeadInputError("mask length must equal the frame count")
    if not bool(mask.any()):
        raise HeadInputError("attention pooling over an all-masked input is undefined")
    kept = frames[mask]
    scores = attn(kept).squeeze(-1)
    beta_kept = torch.softmax(scores, dim=0)
    pooled = beta_kept @ kept
    beta = torch.zeros(len(mask), dtype=frames.dtype, device=frames.device)
    beta[mask] = beta_kept
    return pooled, beta


def _forward_logit(stack: LayerStack, head: ClassifierHead) -> torch.Tensor:
    if stack.n_layers != head.n_layers or stack.dim != head.dim:
        raise HeadInputError(
            f"stack is {stack.n_layers} layers x dim {stack.dim}, head expects "
            f"{head.n_layers} x {head.dim}")
    embeddings = stack.embeddings.to(head._dtype)
    frames = weighted_layer_sum(embeddings, head.layer_logits)
    pooled, _ = attention_pool(frames, stack.frame_mask, head.attn)
    h = F.relu(head.fc1(pooled))
    h = F.relu(head.fc2(h))
    return head.out(h).squeeze(-1)


def head_forward(stack: LayerStack, head: ClassifierHead) -> torch.Tensor:
    """Detection probability in (0, 1) for one segment's layer stack."""
    return torch.sigmoid(_forward_logit(stack, head))


def head_forward_detail(stack: LayerStack, head: ClassifierHead
                        ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Like :func:`head_forward` but also returns (alpha, beta) for inspection."""
    embeddings = stack.embeddings.to(head._dtype)
    alpha = layer_weights(head.layer_logits)
    frames = weighted_layer_sum(embeddings, head.layer_logits)
    pooled, beta = attention_pool(frames, stack.frame_mask, head.attn)
    h = F.relu(head.fc1(pooled))
    h = F.relu(head.fc2(h))
    prob = torch.sigmoid(head.out(h).squeeze(-1))
    return prob, alpha, beta


def head_logits_batch(embeddings: torch.Tensor, mask: torch.Tensor,
                      head: ClassifierHead) -> torch.Tensor:
    """Batched training path: (B, L, T, D) embeddings + (B, T) mask -> (B,) logits.

    Masked positions score -inf before the softmax, which zeroes their
    pooling weight; every segment is guaranteed at least one valid frame.
    """
    if embeddings.dim() != 4:
        raise HeadInputError(
            f"expected (batch, layers, frames, dim), got {tuple(embeddings.shape)}")
    embeddings = embeddings.to(head._dtype)
    alpha = layer_weights(head.layer_logits).to(embeddings.dtype)
    frames = torch.einsum("l,bltd->btd", alpha, embeddings)
    scores = head.attn(frames).squeeze(-1)
    scores = scores.masked_fill(~mask, float("-inf"))
    beta = torch.softmax(scores, dim=1)
    pooled = torch.einsum("bt,btd->bd", beta, frames)
    h = F.relu(head.fc1(pooled))
    h = F.relu(head.fc2(h))
    return head.out(h).squeeze(-1)


def bce_loss(logit: torch.Tensor, label: torch.Tensor | float) -> torch.Tensor:
    """Binary cross-entropy on the sigmoid output, computed stably from logits."""
    target = torch.as_tensor(label, dtype=logit.dtype, device=logit.device)
    return F.binary_cross_entropy_with_logits(logit, target)


def head_gradients(stack: LayerStack, head: ClassifierHead,
                   label: int) -> dict[str, torch.Tensor]:
    """BCE-loss gradients for every head parameter, keyed by parameter name."""
    if label not in (0, 1):
        raise HeadInputError(f"label must be 0 or 1, got {label!r}")
    logit = _forward_logit(stack, head)
    loss = bce_loss(logit, float(label))
    if not torch.isfinite(loss):
        raise HeadInputError("non-finite loss; cannot differentiate")
    names, params = zip(*head.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return dict(zip(names, grads))
