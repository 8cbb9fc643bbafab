import numpy as np
import pytest
import torch

from pdspeech.backbone import (BackboneSpec, LayerStack, ToyBackbone,
                               create_backbone, log_mel_frontend,
                               mel_filterbank, register_backbone,
                               toy_backbone_encode, toy_backbone_spec)
from pdspeech.corpus import SEGMENT_SAMPLES, Segment
from pdspeech.errors import AudioError, BackboneError


def make_segment(samples: np.ndarray, pad_len: int = 0) -> Segment:
    return Segment("clip", 0, samples, pad_len, SEGMENT_SAMPLES - pad_len)


def random_segment(seed: int = 0, pad_len: int = 0) -> Segment:
    rng = np.random.default_rng(seed)
    valid = SEGMENT_SAMPLES - pad_len
    samples = np.concatenate([rng.standard_normal(valid) * 0.1, np.zeros(pad_len)])
    return make_segment(samples, pad_len)


class TestToyBackbone:
    def test_output_shape(self):
        stack = toy_backbone_encode(random_segment(), seed=0)
        assert tuple(stack.embeddings.shape) == (4, 500, 32)
        assert stack.frame_rate == 50.0

    def test_padding_masks_trailing_frames(self):
        stack = toy_backbone_encode(random_segment(pad_len=80000), seed=0)
        mask = stack.frame_mask
        assert mask[:250].all() and not mask[250:].any()

    def test_unpadded_mask_all_true(self):
        stack = toy_backbone_encode(random_segment(), seed=0)
        assert stack.frame_mask.all()

    def test_same_seed_bitwise_identical(self):
        seg = random_segment(3)
        a = toy_backbone_encode(seg, seed=11)
        b = toy_backbone_encode(seg, seed=11)
        assert torch.equal(a.embeddings, b.embeddings)
        assert torch.equal(a.frame_mask, b.frame_mask)

    def test_different_seed_differs(self):
        seg = random_segment(3)
        a = toy_backbone_encode(seg, seed=11)
        b = toy_backbone_encode(seg, seed=12)
        assert not torch.equal(a.embeddings, b.embeddings)

    def test_zero_input_layer0_constant_across_frames(self):
        stack = toy_backbone_encode(make_segment(np.zeros(SEGMENT_SAMPLES)), seed=5)
        layer0 = stack.embeddings[0]
        assert torch.equal(layer0, layer0[0].expand_as(layer0))

    def test_swapping_one_second_blocks_changes_output(self):
        seg = random_segment(7)
        swapped = seg.samples.copy()
        swapped[:16000], swapped[16000:32000] = (seg.samples[16000:32000].copy(),
                                                 seg.samples[:16000].copy())
        a = toy_backbone_encode(seg, seed=4)
        b = toy_backbone_encode(make_segment(swapped), seed=4)
        assert not torch.equal(a.embeddings, b.embeddings)

    def test_frame_count_is_input_length_function(self):
        a = toy_backbone_encode(random_segment(1), seed=0)
        b = toy_backbone_encode(random_segment(2, pad_len=120000), seed=0)
        assert a.n_frames == b.n_frames == 500

    def test_layer0_receptive_field_is_exactly_local(self):
        # kernel == stride at every conv, so frame t sees samples
        # [320 t, 320 (t + 1)) and nothing else: the Jacobian outside that
        # window is exactly zero
        backbone = ToyBackbone(toy_backbone_spec(), seed=9, dtype=torch.float64)
        x = torch.randn(1, 3200, dtype=torch.float64, requires_grad=True)
        frames = backbone.conv_frontend(x)  # (1, 10, 32)
        frame_idx = 4
        frames[0, frame_idx].sum().backward()
        grad = x.grad[0]
        window = slice(320 * frame_idx, 320 * (frame_idx + 1))
        assert grad[window].abs().sum() > 0
        outside = torch.cat([grad[:window.start], grad[window.stop:]])
        assert torch.equal(outside, torch.zeros_like(outside))

    def test_bad_segment_shape_rejected(self):
        backbone = ToyBackbone(toy_backbone_spec(), seed=0)
        with pytest.raises(BackboneError, match="expected"):
            backbone.encode_batch(torch.zeros(1, 100), torch.tensor([100]))


class TestRegistry:
    def test_unknown_name(self):
        spec = BackboneSpec("nonexistent", "raw_waveform", 2, 8, 50.0)
        with pytest.raises(BackboneError, match="nonexistent"):
            create_backbone(spec)

    def test_toy_registered(self):
        backbone = create_backbone(toy_backbone_spec(), seed=1)
        assert isinstance(backbone, ToyBackbone)

    def test_custom_registration(self):
        calls = []

        def factory(spec, seed):
            calls.append((spec.name, seed))
            return ToyBackbone(toy_backbone_spec(), seed=seed)

        register_backbone("custom_test", factory)
        spec = BackboneSpec("custom_test", "raw_waveform", 4, 32, 50.0)
        create_backbone(spec, seed=5)
        assert calls == [("custom_test", 5)]


class TestLayerStackValidation:
    def test_mask_length_mismatch(self):
        with pytest.raises(BackboneError, match="mask"):
            LayerStack(torch.zeros(2, 5, 3), torch.ones(4, dtype=torch.bool), 50.0)

    def test_all_masked_rejected(self):
        with pytest.raises(BackboneError, match="valid frame"):
            LayerStack(torch.zeros(2, 5, 3), torch.zeros(5, dtype=torch.bool), 50.0)

    def test_spec_validation(self):
        with pytest.raises(BackboneError, match="input_kind"):
            BackboneSpec("x", "video", 2, 8, 50.0)
        with pytest.raises(BackboneError, match=">= 1"):
            BackboneSpec("x", "raw_waveform", 0, 8, 50.0)


class TestLogMel:
    def test_frame_and_band_counts(self):
        mel = log_mel_frontend(random_segment(0).samples)
        assert mel.shape == (998, 80)

    def test_all_zero_input_hits_floor(self):
        mel = log_mel_frontend(np.zeros(SEGMENT_SAMPLES))
        np.testing.assert_array_equal(mel, np.full((998, 80), np.log(1e-10)))

    def test_pure_tone_argmax_band_constant(self):
        t = np.arange(SEGMENT_SAMPLES) / 16000.0
        tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
        mel = log_mel_frontend(tone)
        argmax = np.argmax(mel, axis=1)
        assert (argmax == argmax[0]).all()
        # the winning band must actually cover 1 kHz
        bank = mel_filterbank()
        freqs = np.fft.rfftfreq(400, d=1 / 16000)
        band = bank[argmax[0]]
        covered = freqs[band > 0]
        assert covered.min() <= 1000.0 <= covered.max()

    def test_too_short_input_rejected(self):
        with pytest.raises(AudioError, match="at least"):
            log_mel_frontend(np.zeros(399))
