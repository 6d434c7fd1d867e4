import numpy as np
import pytest
import torch

from gradcheck import central_diff, curve_enhancer_gradient_pairs

from amieod.enhance import (
    NUM_PARAMS,
    PARAM_RANGES,
    PARAM_SLICES,
    CurveEnhancer,
    ExpertBundle,
    ParamPredictor,
    adjust_contrast,
    apply_filters,
    gamma_correct,
    identity_params,
    map_param_ranges,
    tone_curve,
    unsharp_mask,
    white_balance,
)


def zero_head(net: CurveEnhancer) -> CurveEnhancer:
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net.eval()


class TestCurveEnhancer:
    def test_zero_head_fixture(self):
        # sigmoid(0) = 0.5 per channel: L = 0.2 + 0.5, out = 0.2 / 0.7
        net = zero_head(CurveEnhancer())
        img = torch.full((3, 32, 32), 0.2)
        out = net(img)
        assert torch.allclose(out, torch.full_like(img, 0.2 / 0.7), atol=1e-6)

    def test_bright_input_clamps_to_identity(self):
        net = zero_head(CurveEnhancer())
        img = torch.ones(3, 32, 32)
        assert torch.allclose(net(img), img, atol=1e-7)

    def test_zero_input_stays_zero(self):
        net = zero_head(CurveEnhancer())
        img = torch.zeros(3, 32, 32)
        assert torch.equal(net(img), img)

    def test_shape_and_range(self):
        net = CurveEnhancer().eval()
        img = torch.rand(2, 3, 48, 40)
        with torch.no_grad():
            out = net(img)
        assert out.shape == img.shape
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_nonfinite_reported_with_layer(self):
        net = CurveEnhancer().eval()
        with torch.no_grad():
            net.block1[0].weight.fill_(float("nan"))
        with pytest.raises(FloatingPointError, match="block1"):
            net(torch.rand(3, 32, 32))

    def test_param_gradients_match_finite_differences(self):
        for trial, (analytic, fd) in enumerate(curve_enhancer_gradient_pairs(trials=20)):
            assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-8), f"trial {trial}"


class TestParamPredictor:
    def test_zero_weights_give_range_midpoints(self):
        net = ParamPredictor(input_size=64)
        with torch.no_grad():
            net.fc2.weight.zero_()
            net.fc2.bias.zero_()
        with torch.no_grad():
            out = net(torch.rand(3, 40, 56))
        mid = PARAM_RANGES.mean(dim=1)
        assert torch.allclose(out, mid, atol=1e-6)
        gamma_mid = out[PARAM_SLICES["gamma"]]
        assert float(gamma_mid) == pytest.approx(1.65, abs=1e-6)

    @pytest.mark.parametrize("hw", [(32, 32), (48, 96), (200, 120)])
    def test_output_length_is_15_for_any_input_size(self, hw):
        net = ParamPredictor(input_size=64).eval()
        out = net(torch.rand(3, *hw))
        assert out.shape == (NUM_PARAMS,)

    def test_deterministic(self):
        net = ParamPredictor(input_size=64).eval()
        img = torch.rand(3, 64, 64)
        assert torch.equal(net(img), net(img))

    def test_mapped_within_ranges(self):
        net = ParamPredictor(input_size=64).eval()
        out = net(torch.rand(4, 3, 64, 64))
        lo, hi = PARAM_RANGES[:, 0], PARAM_RANGES[:, 1]
        assert (out >= lo).all() and (out <= hi).all()


class TestFilters:
    def test_identity_params(self):
        img = torch.rand(3, 32, 32)
        out = apply_filters(img, identity_params())
        assert torch.allclose(out, img, atol=1e-6)

    def test_gamma_fixture(self):
        p = identity_params()
        p[PARAM_SLICES["gamma"]] = 2.0
        img = torch.full((3, 32, 32), 0.25)
        out = apply_filters(img, p)
        assert torch.allclose(out, torch.full_like(img, 0.0625), atol=1e-6)

    def test_white_balance_fixture(self):
        p = identity_params()
        p[0] = 2.0  # red gain
        img = torch.full((3, 32, 32), 0.3)
        out = apply_filters(img, p)
        assert torch.allclose(out[0], torch.full((32, 32), 0.6), atol=1e-6)
        assert torch.allclose(out[1:], torch.full((2, 32, 32), 0.3), atol=1e-6)

    def test_out_of_range_rejected(self):
        p = identity_params()
        p[PARAM_SLICES["gamma"]] = 5.0
        with pytest.raises(ValueError, match="legal range"):
            apply_filters(torch.rand(3, 32, 32), p)

    def test_output_clamped(self):
        p = identity_params()
        p[PARAM_SLICES["wb_gains"]] = 2.0
        out = apply_filters(torch.rand(3, 32, 32), p)
        assert float(out.max()) <= 1.0 and float(out.min()) >= 0.0

    def test_uniform_tone_knots_identity_at_any_level(self):
        img = torch.rand(3, 16, 16, dtype=torch.float64)
        for level in (0.5, 1.25, 2.0):
            knots = torch.full((8,), level, dtype=torch.float64)
            assert torch.allclose(tone_curve(img, knots), img, atol=1e-9)

    def test_filter_param_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        filters = {
            "white_balance": (white_balance, PARAM_SLICES["wb_gains"]),
            "gamma": (gamma_correct, PARAM_SLICES["gamma"]),
            "contrast": (adjust_contrast, PARAM_SLICES["contrast"]),
            "tone": (tone_curve, PARAM_SLICES["tone_knots"]),
            "sharpen": (unsharp_mask, PARAM_SLICES["sharpen"]),
        }
        lo, hi = PARAM_RANGES[:, 0].double(), PARAM_RANGES[:, 1].double()
        for _ in range(100):
            img = torch.tensor(rng.uniform(0.1, 0.9, size=(3, 12, 12)), dtype=torch.float64)
            weight = torch.tensor(rng.standard_normal((3, 12, 12)), dtype=torch.float64)
            name = list(filters)[rng.integers(len(filters))]
            fn, sl = filters[name]
            span_lo, span_hi = lo[sl], hi[sl]
            margin = 0.05 * (span_hi - span_lo)
            params = torch.tensor(
                rng.uniform((span_lo + margin).numpy(), (span_hi - margin).numpy()),
                dtype=torch.float64, requires_grad=True)

            (fn(img, params) * weight).sum().backward()
            analytic = params.grad.clone()
            with torch.no_grad():
                fd = central_diff(lambda p: float((fn(img, p) * weight).sum()), params.detach().clone())
            for a, f in zip(analytic.tolist(), fd.tolist()):
                assert a == pytest.approx(f, rel=1e-3, abs=1e-8), f"filter {name}"


class TestExpertBundle:
    def test_forward_all_length_and_composition(self):
        torch.manual_seed(0)
        bundle = ExpertBundle(curve_width=8, pp_input_size=64).eval()
        img = torch.rand(3, 32, 32)
        views = bundle.forward_all(img)
        assert len(views) == bundle.n + 1 == 4
        assert torch.equal(views[0], img)
        assert torch.equal(views[1], bundle.piem(img))
        assert torch.equal(views[2], bundle.jiem(img))
        assert torch.equal(views[3], apply_filters(img, bundle.pp(img)))

    def test_zeroed_experts_match_single_op_fixtures(self):
        bundle = ExpertBundle(curve_width=8, pp_input_size=64).eval()
        zero_head(bundle.piem)
        zero_head(bundle.jiem)
        with torch.no_grad():
            bundle.pp.fc2.weight.zero_()
            bundle.pp.fc2.bias.zero_()
        img = torch.full((3, 32, 32), 0.2)
        views = bundle.forward_all(img)
        assert torch.allclose(views[1], torch.full_like(img, 0.2 / 0.7), atol=1e-6)
        assert torch.equal(views[1], views[2])
        mid = PARAM_RANGES.mean(dim=1)
        assert torch.allclose(views[3], apply_filters(img, mid), atol=1e-6)

    def test_outputs_stay_in_range_fuzzed(self):
        torch.manual_seed(3)
        bundle = ExpertBundle(curve_width=8, pp_input_size=32).eval()
        with torch.no_grad():
            for _ in range(20):
                batch = torch.rand(50, 3, 32, 32)
                for view in bundle.forward_all(batch):
                    assert view.shape == batch.shape
                    assert float(view.min()) >= 0.0 and float(view.max()) <= 1.0

    def test_frozen_enhancer_ignored_by_optimizer(self):
        bundle = ExpertBundle(curve_width=8, pp_input_size=64)
        bundle.freeze_pretrained()
        trainable = list(bundle.trainable_parameters())
        frozen_ids = {id(p) for p in bundle.piem.parameters()}
        assert all(id(p) not in frozen_ids for p in trainable)
        assert all(not p.requires_grad for p in bundle.piem.parameters())

    def test_invalid_expert_index(self):
        bundle = ExpertBundle(curve_width=8, pp_input_size=64)
        with pytest.raises(ValueError):
            bundle.enhance(torch.rand(3, 32, 32), 4)
