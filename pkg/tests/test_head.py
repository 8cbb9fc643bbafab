import math

import numpy as np
import pytest
import torch

from pdspeech.backbone import LayerStack
from pdspeech.errors import HeadInputError
from pdspeech.head import (ClassifierHead, attention_pool, bce_loss,
                           head_forward, head_forward_detail, head_gradients,
                           head_logits_batch, layer_weights,
                           weighted_layer_sum)


def make_stack(layers, frames, dim, seed=0, n_masked=0,
               dtype=torch.float64) -> LayerStack:
    gen = torch.Generator().manual_seed(seed)
    emb = torch.randn(layers, frames, dim, generator=gen, dtype=dtype)
    mask = torch.ones(frames, dtype=torch.bool)
    if n_masked:
        mask[-n_masked:] = False
    return LayerStack(emb, mask, 50.0)


def make_head(layers=3, dim=4, hidden1=5, hidden2=4, seed=0,
              dtype=torch.float64) -> ClassifierHead:
    return ClassifierHead(layers, dim, hidden1, hidden2, seed=seed, dtype=dtype)


# --- independent scalar oracle: plain-python loops over extracted arrays ----

def _softmax_list(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def scalar_head_oracle(stack: LayerStack, head: ClassifierHead) -> float:
    emb = stack.embeddings.tolist()
    mask = stack.frame_mask.tolist()
    L, T, D = stack.embeddings.shape
    alpha = _softmax_list(head.layer_logits.tolist())
    frames = [[sum(alpha[l] * emb[l][t][d] for l in range(L)) for d in range(D)]
              for t in range(T)]
    kept = [frames[t] for t in range(T) if mask[t]]
    aw = head.attn.weight.squeeze(0).tolist()
    ab = float(head.attn.bias)
    beta = _softmax_list([sum(w * x for w, x in zip(aw, f)) + ab for f in kept])
    pooled = [sum(b * f[d] for b, f in zip(beta, kept)) for d in range(D)]

    def affine_relu(vec, linear, relu=True):
        weight = linear.weight.tolist()
        bias = linear.bias.tolist()
        out = [sum(w * x for w, x in zip(row, vec)) + b
               for row, b in zip(weight, bias)]
        return [max(0.0, v) for v in out] if relu else out

    h = affine_relu(pooled, head.fc1)
    h = affine_relu(h, head.fc2)
    logit = affine_relu(h, head.out, relu=False)[0]
    return 1.0 / (1.0 + math.exp(-logit))


def finite_diff_gradients(stack: LayerStack, head: ClassifierHead, label: int,
                          h: float = 1e-5) -> dict[str, torch.Tensor]:
    y = float(label)

    def loss_value() -> float:
        with torch.no_grad():
            p = float(head_forward(stack, head))
        return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))

    grads = {}
    for name, param in head.named_parameters():
        grad = torch.zeros_like(param)
        flat, gflat = param.data.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = grad
    return grads


class TestWeightedLayerSum:
    def test_identical_layers_collapse(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(6, 3, generator=gen, dtype=torch.float64)
        emb = x.expand(4, 6, 3)
        logits = torch.tensor([2.0, -1.0, 0.5, 0.0], dtype=torch.float64)
        torch.testing.assert_close(weighted_layer_sum(emb, logits), x,
                                   rtol=0, atol=1e-15)

    def test_equal_logits_give_uniform_weights(self):
        alpha = layer_weights(torch.full((4,), 1.7, dtype=torch.float64))
        torch.testing.assert_close(alpha, torch.full((4,), 0.25, dtype=torch.float64),
                                   rtol=0, atol=1e-15)

    def test_matches_double_loop_oracle(self):
        gen = torch.Generator().manual_seed(1)
        emb = torch.randn(3, 2, 2, generator=gen, dtype=torch.float64)
        logits = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64)
        got = weighted_layer_sum(emb, logits)
        alpha = _softmax_list(logits.tolist())
        for t in range(2):
            for d in range(2):
                expected = sum(alpha[l] * float(emb[l, t, d]) for l in range(3))
                assert abs(float(got[t, d]) - expected) < 1e-9

    def test_length_mismatch_rejected(self):
        with pytest.raises(HeadInputError, match="does not match"):
            weighted_layer_sum(torch.zeros(3, 2, 2),
                               torch.zeros(4, dtype=torch.float64))


class TestAttentionPool:
    def test_single_unmasked_frame_is_identity(self):
        head = make_head()
        frames = torch.randn(5, 4, dtype=torch.float64)
        mask = torch.tensor([False, False, True, False, False])
        with torch.no_grad():
            pooled, beta = attention_pool(frames, mask, head.attn)
        torch.testing.assert_close(pooled, frames[2], rtol=0, atol=0)
        assert float(beta[2]) == 1.0 and float(beta.sum()) == 1.0

    def test_equal_frames_pool_to_themselves(self):
        head = make_head()
        v = torch.randn(4, dtype=torch.float64)
        frames = v.expand(7, 4)
        pooled, _ = attention_pool(frames, torch.ones(7, dtype=torch.bool), head.attn)
        torch.testing.assert_close(pooled, v, rtol=0, atol=1e-14)

    def test_permutation_invariance(self):
        head = make_head(dim=4)
        gen = torch.Generator().manual_seed(2)
        frames = torch.randn(8, 4, generator=gen, dtype=torch.float64)
        mask = torch.tensor([True] * 6 + [False] * 2)
        perm = torch.randperm(8, generator=gen)
        a, _ = attention_pool(frames, mask, head.attn)
        b, _ = attention_pool(frames[perm], mask[perm], head.attn)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)

    def test_all_masked_rejected(self):
        head = make_head()
        with pytest.raises(HeadInputError, match="all-masked"):
            attention_pool(torch.zeros(3, 4, dtype=torch.float64),
                           torch.zeros(3, dtype=torch.bool), head.attn)


class TestHeadForward:
    def test_zero_output_map_gives_half(self):
        head = make_head()
        with torch.no_grad():
            head.out.weight.zero_()
            head.out.bias.zero_()
        prob = head_forward(make_stack(3, 6, 4), head)
        assert float(prob) == 0.5

    def test_masked_extension_exact_invariance(self):
        head = make_head()
        stack = make_stack(3, 6, 4, seed=3)
        extra = torch.randn(3, 4, 4, dtype=torch.float64)
        extended = LayerStack(
            torch.cat([stack.embeddings, extra], dim=1),
            torch.cat([stack.frame_mask, torch.zeros(4, dtype=torch.bool)]),
            stack.frame_rate)
        assert float(head_forward(stack, head)) == float(head_forward(extended, head))

    def test_matches_scalar_oracle(self):
        for seed in range(5):
            head = make_head(seed=seed)
            stack = make_stack(3, 6, 4, seed=seed, n_masked=seed % 3)
            got = float(head_forward(stack, head))
            assert abs(got - scalar_head_oracle(stack, head)) < 1e-9

    def test_output_strictly_inside_unit_interval(self):
        for seed in range(20):
            head = make_head(seed=seed)
            stack = make_stack(3, 6, 4, seed=seed)
            prob = float(head_forward(stack, head))
            assert 0.0 < prob < 1.0

    def test_normalizations_reported(self):
        head = make_head()
        stack = make_stack(3, 6, 4, seed=1, n_masked=2)
        _, alpha, beta = head_forward_detail(stack, head)
        assert abs(float(alpha.sum()) - 1.0) < 1e-12
        assert (alpha > 0).all()
        assert abs(float(beta.sum()) - 1.0) < 1e-12
        assert torch.equal(beta[~stack.frame_mask],
                           torch.zeros(2, dtype=torch.float64))

    def test_logit_shift_invariance(self):
        head = make_head()
        stack = make_stack(3, 6, 4, seed=4)
        before = float(head_forward(stack, head))
        with torch.no_grad():
            head.layer_logits += 7.5
        after = float(head_forward(stack, head))
        assert abs(before - after) < 1e-12

    def test_batched_path_agrees_with_single(self):
        head = make_head()
        stacks = [make_stack(3, 6, 4, seed=s, n_masked=s % 2) for s in range(4)]
        emb = torch.stack([s.embeddings for s in stacks])
        mask = torch.stack([s.frame_mask for s in stacks])
        batched = torch.sigmoid(head_logits_batch(emb, mask, head))
        singles = torch.stack([head_forward(s, head) for s in stacks])
        torch.testing.assert_close(batched, singles, rtol=0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        head = make_head(layers=3, dim=4)
        with pytest.raises(HeadInputError, match="head expects"):
            head_forward(make_stack(2, 6, 4), head)


class TestHeadGradients:
    def test_out_bias_gradient_sign_is_p_minus_y(self):
        for label in (0, 1):
            head = make_head(seed=6)
            stack = make_stack(3, 6, 4, seed=6)
            p = float(head_forward(stack, head))
            grad = head_gradients(stack, head, label)["out.bias"]
            assert math.copysign(1.0, float(grad)) == math.copysign(1.0, p - label)

    def test_finite_difference_match(self):
        for seed in range(10):
            head = make_head(seed=seed)
            stack = make_stack(3, 6, 4, seed=seed, n_masked=seed % 3)
            label = seed % 2
            analytic = head_gradients(stack, head, label)
            numeric = finite_diff_gradients(stack, head, label)
            for name in analytic:
                a, n = analytic[name], numeric[name]
                denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                                      torch.tensor(1e-6, dtype=torch.float64))
                assert float(((a - n).abs() / denom).max()) < 1e-4, name

    def test_identical_layers_zero_logit_gradient(self):
        head = make_head()
        gen = torch.Generator().manual_seed(9)
        x = torch.randn(6, 4, generator=gen, dtype=torch.float64)
        stack = LayerStack(x.expand(3, 6, 4).clone(),
                           torch.ones(6, dtype=torch.bool), 50.0)
        grad = head_gradients(stack, head, 1)["layer_logits"]
        assert float(grad.abs().max()) < 1e-12

    def test_bad_label_rejected(self):
        head = make_head()
        with pytest.raises(HeadInputError, match="label"):
            head_gradients(make_stack(3, 6, 4), head, 2)

    def test_bce_loss_matches_closed_form(self):
        logit = torch.tensor(0.3, dtype=torch.float64)
        p = 1.0 / (1.0 + math.exp(-0.3))
        assert abs(float(bce_loss(logit, 1.0)) - (-math.log(p))) < 1e-12
        assert abs(float(bce_loss(logit, 0.0)) - (-math.log(1 - p))) < 1e-12
