import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotedit.core_io import Rng, ValidationError
from pivotedit.scheduler import (
    GuidanceInputs,
    NoiseSchedule,
    _step_alphas,
    add_noise,
    ddim_invert_step,
    ddim_step,
    guided_epsilon,
    make_schedule,
)


def two_level_schedule(ab_low, ab_high):
    """Handcrafted two-step schedule with chosen cumulative products."""
    return NoiseSchedule(
        2, torch.tensor([ab_high, ab_low], dtype=torch.float64), [2, 1]
    )


class TestMakeSchedule:
    def test_single_step(self):
        sched = make_schedule(1, 0.1, 0.1, 1)
        assert sched.alpha_bar.tolist() == pytest.approx([0.9])
        assert sched.sampling_indices == [1]

    def test_cumulative_product_oracle(self):
        # independent plain-python product over the same linear betas
        T = 1000
        sched = make_schedule(T, 1e-4, 2e-2, 20)
        prod = 1.0
        for i in range(T):
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / (T - 1))
        assert abs(float(sched.alpha_bar[-1]) - prod) / prod < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(
        T=st.integers(1, 200),
        b0=st.floats(1e-5, 0.05),
        spread=st.floats(0.0, 0.1),
    )
    def test_strictly_decreasing(self, T, b0, spread):
        sched = make_schedule(T, b0, min(b0 + spread, 0.9), max(1, T // 3))
        ab = sched.alpha_bar
        assert ((ab > 0) & (ab <= 1)).all()
        if T > 1:
            assert (ab[1:] < ab[:-1]).all()

    def test_sampling_indices_even_and_decreasing(self):
        sched = make_schedule(1000, 1e-4, 2e-2, 20)
        assert sched.sampling_indices[0] == 1000
        assert sched.sampling_indices[-1] == 50
        diffs = {a - b for a, b in zip(sched.sampling_indices, sched.sampling_indices[1:])}
        assert diffs == {50}

    def test_full_resolution_indices(self):
        sched = make_schedule(10, 1e-3, 1e-2, 10)
        assert sched.sampling_indices == list(range(10, 0, -1))

    @pytest.mark.parametrize(
        "args",
        [(0, 0.1, 0.1, 1), (10, 0.0, 0.1, 1), (10, 0.2, 0.1, 1), (10, 0.1, 1.0, 1), (10, 0.1, 0.1, 11)],
    )
    def test_parameter_violations(self, args):
        with pytest.raises(ValidationError):
            make_schedule(*args)


class TestAddNoise:
    def test_clean_endpoint_identity(self):
        sched = make_schedule(10, 1e-3, 1e-2, 10)
        z0 = Rng(0).normal_tensor((2, 1, 2, 2))
        eps = Rng(1).normal_tensor((2, 1, 2, 2))
        assert torch.equal(add_noise(z0, 0, eps, sched), z0)

    def test_hand_value(self):
        sched = two_level_schedule(0.25, 0.64)
        z0 = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        eps = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        out = add_noise(z0, 2, eps, sched)
        assert float(out) == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)

    def test_shape_and_finiteness(self):
        sched = make_schedule(50, 1e-4, 2e-2, 10)
        z0 = Rng(2).normal_tensor((4, 2, 4, 4))
        eps = Rng(3).normal_tensor((4, 2, 4, 4))
        out = add_noise(z0, 37, eps, sched)
        assert out.shape == z0.shape
        assert torch.isfinite(out).all()

    def test_index_out_of_range(self):
        sched = make_schedule(10, 1e-3, 1e-2, 10)
        z = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ValidationError):
            add_noise(z, 11, z, sched)

    def test_shape_mismatch(self):
        sched = make_schedule(10, 1e-3, 1e-2, 10)
        with pytest.raises(ValidationError):
            add_noise(torch.zeros(1, 1, 2, 2), 1, torch.zeros(1, 1, 1, 1), sched)


class TestDdimSteps:
    def test_equal_alpha_collapse(self):
        z = Rng(4).normal_tensor((2, 2))
        eps = torch.zeros_like(z)
        assert torch.allclose(_step_alphas(z, eps, 0.5, 0.5), z)

    def test_hand_value(self):
        sched = two_level_schedule(0.25, 0.64)
        z = torch.full((1, 1, 1, 1), 1.0, dtype=torch.float64)
        eps = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        out = ddim_step(z, eps, 2, 1, sched)
        assert float(out) == pytest.approx(1.2071796769724491, abs=1e-12)

    def test_invert_hand_value(self):
        sched = two_level_schedule(0.25, 0.64)
        z = torch.full((1, 1, 1, 1), 1.2071796769724491, dtype=torch.float64)
        eps = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        out = ddim_invert_step(z, eps, 1, 2, sched)
        assert float(out) == pytest.approx(1.0, abs=1e-6)

    def test_index_order_enforced(self):
        sched = make_schedule(10, 1e-3, 1e-2, 10)
        z = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ValidationError):
            ddim_step(z, z, 3, 5, sched)
        with pytest.raises(ValidationError):
            ddim_invert_step(z, z, 5, 3, sched)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), lo=st.integers(0, 48))
    def test_round_trip_identity(self, seed, lo):
        sched = make_schedule(50, 1e-4, 2e-2, 50)
        rng = Rng(seed)
        z = rng.normal_tensor((2, 2, 4, 4))
        eps = rng.normal_tensor((2, 2, 4, 4))
        hi = lo + 1 + seed % (50 - lo)
        up = ddim_invert_step(z, eps, lo, hi, sched)
        back = ddim_step(up, eps, hi, lo, sched)
        assert float((back - z).norm() / z.norm()) < 1e-6
        down = ddim_step(z, eps, hi, lo, sched) if lo < hi else None
        if down is not None:
            again = ddim_invert_step(down, eps, lo, hi, sched)
            assert float((again - z).norm() / z.norm()) < 1e-6


class TestGuidedEpsilon:
    def test_degenerate_cfg(self):
        e = Rng(5).normal_tensor((2, 3))
        out = guided_epsilon(GuidanceInputs(e, torch.zeros_like(e), 0.0))
        assert torch.equal(out, e)

    def test_equal_branches(self):
        e = Rng(6).normal_tensor((2, 3))
        out = guided_epsilon(GuidanceInputs(e, e.clone(), 5.5))
        assert torch.allclose(out, e)

    def test_direct_substitution(self):
        one = torch.ones(1, dtype=torch.float64)
        out = guided_epsilon(
            GuidanceInputs(one, torch.zeros(1, dtype=torch.float64), 1.0,
                           torch.full((1,), 0.1, dtype=torch.float64))
        )
        assert float(out) == pytest.approx(2.1, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        omega=st.floats(0.0, 10.0),
        a=st.floats(-3, 3),
        b=st.floats(-3, 3),
    )
    def test_linear_in_each_argument(self, omega, a, b):
        rng = Rng(9)
        ec, eu, g = (rng.normal_tensor((3, 3)) for _ in range(3))
        base = guided_epsilon(GuidanceInputs(ec, eu, omega, g))
        scaled_c = guided_epsilon(GuidanceInputs(a * ec, eu, omega, g))
        mixed = guided_epsilon(GuidanceInputs(ec, eu, omega, b * g))
        assert torch.allclose(
            scaled_c - base, (a - 1) * (1 + omega) * ec, atol=1e-9
        )
        assert torch.allclose(mixed - base, (b - 1) * g, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            GuidanceInputs(torch.zeros(2), torch.zeros(3), 1.0)
        with pytest.raises(ValidationError):
            GuidanceInputs(torch.zeros(2), torch.zeros(2), 1.0, torch.zeros(3))

    def test_negative_omega_rejected(self):
        with pytest.raises(ValidationError):
            GuidanceInputs(torch.zeros(1), torch.zeros(1), -0.5)


class TestScheduleValidation:
    def test_alpha_bar_bounds(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(2, torch.tensor([1.2, 0.5]), [2, 1])

    def test_alpha_bar_monotone(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(2, torch.tensor([0.5, 0.9]), [2, 1])

    def test_sampling_indices_in_range(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(2, torch.tensor([0.9, 0.5]), [3, 1])

    def test_sampling_pairs_chain(self):
        sched = make_schedule(6, 1e-3, 1e-2, 3)
        assert sched.sampling_pairs() == [(6, 4), (4, 2), (2, 0)]
        assert sched.inversion_pairs() == [(0, 2), (2, 4), (4, 6)]
