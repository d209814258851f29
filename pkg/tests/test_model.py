import numpy as np
import pytest
import torch

from ticnet.errors import ConfigError, ContractError, ShapeError
from ticnet.geometry import Detection, Interval
from ticnet.model import (
    ModelConfig,
    build_model,
    count_parameters,
    detect_window,
    forward_window,
    fuse_scores,
    reduced_config,
    roi_pool_1d,
)


@pytest.fixture(scope="module")
def full_model():
    return build_model(ModelConfig(), seed=0)


class TestConfig:
    def test_window_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(window=415)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="fused")

    def test_dict_roundtrip(self):
        cfg = ModelConfig(channels=5, window=64, variant="independent")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_smoke_forward_on_zeros(self, full_model):
        out = forward_window(full_model, np.zeros((17, 416), dtype=np.float32))
        assert [l.shape for l in out.det_logits] == [
            (3, 104), (3, 52), (3, 26), (3, 13)]
        assert [o.shape for o in out.det_offsets] == [
            (3, 2, 104), (3, 2, 52), (3, 2, 26), (3, 2, 13)]
        assert out.seg_probs.shape == (3, 416)

    def test_same_seed_bit_identical(self):
        a = build_model(ModelConfig(), seed=3)
        b = build_model(ModelConfig(), seed=3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_different_seed_differs(self):
        a = build_model(ModelConfig(), seed=3)
        b = build_model(ModelConfig(), seed=4)
        assert any(
            not torch.equal(va, vb)
            for va, vb in zip(a.state_dict().values(), b.state_dict().values())
        )

    def test_param_count_same_for_same_config(self):
        assert count_parameters(build_model(ModelConfig(), 0)) == count_parameters(
            build_model(ModelConfig(), 99)
        )

    def test_independent_adds_exactly_one_encoder(self):
        shared = build_model(ModelConfig(), 0)
        indep = build_model(ModelConfig(variant="independent"), 0)
        enc_params = sum(p.numel() for p in shared.encoder.parameters())
        assert count_parameters(indep) - count_parameters(shared) == enc_params

    def test_shared_variant_branches_share_tensors(self):
        shared = build_model(ModelConfig(), 0)
        assert shared.encoder_seg is None
        indep = build_model(ModelConfig(variant="independent"), 0)
        shared_ids = {id(p) for p in indep.encoder.parameters()}
        seg_ids = {id(p) for p in indep.encoder_seg.parameters()}
        assert shared_ids.isdisjoint(seg_ids)


class TestForward:
    def test_deterministic_inference(self, full_model, rng):
        x = rng.normal(size=(17, 416)).astype(np.float32)
        a = forward_window(full_model, x)
        b = forward_window(full_model, x)
        for la, lb in zip(a.det_logits, b.det_logits):
            assert torch.equal(la, lb)
        assert torch.equal(a.seg_probs, b.seg_probs)

    def test_seg_probs_in_unit_range(self, full_model, rng):
        x = rng.normal(size=(17, 416)).astype(np.float32)
        seg = forward_window(full_model, x).seg_probs
        assert float(seg.min()) >= 0.0 and float(seg.max()) <= 1.0

    def test_constant_input_gives_constant_seg(self, full_model):
        out = forward_window(full_model, np.zeros((17, 416), dtype=np.float32))
        interior = out.seg_probs[:, 104:312]
        for k in range(3):
            vals = interior[k]
            assert float(vals.max() - vals.min()) < 1e-6

    def test_shape_mismatch_raises(self, full_model):
        with pytest.raises(ShapeError):
            forward_window(full_model, np.zeros((16, 416), dtype=np.float32))
        with pytest.raises(ShapeError):
            full_model.forward_batch(torch.zeros(2, 17, 400))


class TestRoiPool:
    def test_constant_sequence_all_bins_equal(self):
        seg = torch.full((416,), 0.7, dtype=torch.float64)
        iv = torch.tensor([[13.3, 77.9], [200.0, 216.0]], dtype=torch.float64)
        bins = roi_pool_1d(seg, iv, 16)
        assert torch.allclose(bins, torch.full((2, 16), 0.7, dtype=torch.float64))

    def test_step_function_average(self):
        seg = torch.cat([torch.zeros(8), torch.ones(8)]).double()
        bins = roi_pool_1d(seg, torch.tensor([[0.0, 16.0]]).double(), 2)
        assert bins[0, 0].item() == pytest.approx(0.0)
        assert bins[0, 1].item() == pytest.approx(1.0)

    def test_fractional_edges_interpolate(self):
        seg = torch.tensor([0.0, 1.0], dtype=torch.float64)
        # one bin over [0.5, 1.5): half a zero-frame, half a one-frame
        bins = roi_pool_1d(seg, torch.tensor([[0.5, 1.5]]).double(), 1)
        assert bins[0, 0].item() == pytest.approx(0.5)

    def test_matches_quadrature_oracle(self, rng):
        seg = torch.tensor(rng.uniform(size=64), dtype=torch.float64)
        for _ in range(50):
            s = rng.uniform(0, 60)
            e = s + rng.uniform(0.5, 4.0)
            got = roi_pool_1d(seg, torch.tensor([[s, e]]).double(), 4)[0]
            # dense midpoint quadrature of the piecewise-constant sequence
            for b in range(4):
                lo = s + (e - s) * b / 4
                hi = s + (e - s) * (b + 1) / 4
                xs = np.linspace(lo, hi, 4001)[:-1] + (hi - lo) / 8000
                vals = seg.numpy()[np.clip(xs.astype(int), 0, 63)]
                assert float(got[b]) == pytest.approx(vals.mean(), abs=2e-3)


class TestFuseScores:
    def test_empty_list(self, full_model):
        seg = torch.full((416,), 0.5)
        assert fuse_scores(full_model, [], seg) == []

    def test_intervals_unchanged_and_probs_valid(self, full_model, rng):
        seg = torch.tensor(rng.uniform(size=416), dtype=torch.float32)
        dets = [
            Detection(interval=Interval(10.0 * i + 1.0, 10.0 * i + 9.0), raw_prob=0.5)
            for i in range(5)
        ]
        out = fuse_scores(full_model, dets, seg)
        assert len(out) == 5
        for before, after in zip(dets, out):
            assert after.interval is before.interval
            assert 0.0 <= after.refined_prob <= 1.0

    def test_constant_seg_gives_identical_refined(self, full_model):
        seg = torch.full((416,), 0.7)
        dets = [
            Detection(interval=Interval(5.0, 55.0), raw_prob=0.4),
            Detection(interval=Interval(300.25, 377.75), raw_prob=0.4),
        ]
        out = fuse_scores(full_model, dets, seg)
        assert out[0].refined_prob == pytest.approx(out[1].refined_prob, abs=1e-6)

    def test_out_of_window_rejected(self, full_model):
        seg = torch.full((416,), 0.5)
        with pytest.raises(ContractError):
            fuse_scores(
                full_model,
                [Detection(interval=Interval(-1.0, 30.0), raw_prob=0.5)],
                seg,
            )


class TestDetectWindow:
    def test_untrained_model_near_silent(self, full_model, tiny_anchors, rng):
        cfg = full_model.config
        anchors = _scaled_anchors(cfg.window)
        x = rng.normal(size=(17, 416)).astype(np.float32)
        dets = detect_window(full_model, x, anchors, 0.2)
        assert len(dets) <= 5  # init prior ~0.01 keeps almost everything silent

    def test_threshold_one_empty(self, full_model, rng):
        anchors = _scaled_anchors(416)
        x = rng.normal(size=(17, 416)).astype(np.float32)
        assert detect_window(full_model, x, anchors, 1.0) == []

    def test_contract_on_outputs(self, rng):
        cfg = reduced_config()
        model = build_model(cfg, 1)
        # bias the classifier so plenty of detections fire
        with torch.no_grad():
            model.head.cls.bias.fill_(1.0)
        anchors = _scaled_anchors(cfg.window)
        x = rng.normal(size=(cfg.channels, cfg.window)).astype(np.float32)
        dets = detect_window(model, x, anchors, 0.2)
        assert dets
        for d in dets:
            assert 0.0 <= d.raw_prob <= 1.0
            assert 0.0 <= d.refined_prob <= 1.0
            assert 0.0 <= d.interval.start < d.interval.end <= cfg.window
            assert 0 <= d.level < 4

    def test_saturated_logit_included_at_threshold_one(self, rng):
        cfg = reduced_config()
        model = build_model(cfg, 1)
        with torch.no_grad():
            model.head.cls.bias.fill_(50.0)  # sigmoid saturates to exactly 1.0
        anchors = _scaled_anchors(cfg.window)
        x = rng.normal(size=(cfg.channels, cfg.window)).astype(np.float32)
        dets = detect_window(model, x, anchors, 1.0)
        assert dets  # >= comparison keeps the saturated boundary

    def test_incompatible_anchor_grid(self, full_model):
        from ticnet.geometry import build_anchor_set

        bad = build_anchor_set([4.0, 9.0, 18.0, 40.0], [2, 4, 8, 16])
        with pytest.raises(ShapeError):
            detect_window(full_model, np.zeros((17, 416), dtype=np.float32), bad, 0.2)


def _scaled_anchors(window):
    from ticnet.geometry import build_anchor_set

    fracs = (0.03, 0.05, 0.08, 0.11, 0.15, 0.2, 0.26, 0.33, 0.42, 0.55, 0.7, 0.9)
    return build_anchor_set([window * f for f in fracs], [4, 8, 16, 32])


class TestNormVariants:
    def test_instance_norm_builds_and_runs_batch_one(self, rng):
        cfg = reduced_config(norm="instance")
        model = build_model(cfg, 0)
        x = torch.tensor(rng.normal(size=(1, 4, 64)), dtype=torch.float32)
        logits, offsets, seg = model.forward_batch(x)
        assert seg.shape == (1, 3, 64)
        assert all(torch.isfinite(l).all() for l in logits)
