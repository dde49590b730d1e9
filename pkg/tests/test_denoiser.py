import math

import numpy as np
import pytest
import torch

from pivotedit.core_io import Rng, ValidationError
from pivotedit.denoiser import (
    AttentionRecord,
    DenoiserConfig,
    GaussianOracle,
    VideoDenoiser,
    encode_text,
    load_weights,
    oracle_epsilon,
    save_weights,
    sinusoid,
    train_toy,
)
from pivotedit.scheduler import make_schedule

TINY = DenoiserConfig(
    frames=4, channels=2, height=4, width=4, model_width=16, text_len=4,
    text_dim=8, num_blocks=2, seed=5,
)


@pytest.fixture(scope="module")
def model():
    return VideoDenoiser(TINY)


@pytest.fixture(scope="module")
def latent():
    return Rng(21).normal_tensor((4, 2, 4, 4))


class TestEncodeText:
    def test_deterministic(self):
        a = encode_text("A Bright Square", TINY)
        b = encode_text("a bright square", TINY)
        assert torch.equal(a.vectors, b.vectors)

    def test_empty_prompt_all_zero(self):
        emb = encode_text("", TINY)
        assert torch.equal(emb.vectors, torch.zeros(4, 8, dtype=torch.float64))
        assert emb.tokens == [""] * 4

    def test_shared_token_row(self):
        cat = encode_text("a cat", TINY)
        dog = encode_text("a dog", TINY)
        assert torch.equal(cat.vectors[0], dog.vectors[0])
        assert not torch.equal(cat.vectors[1], dog.vectors[1])

    def test_truncation(self):
        emb = encode_text("one two three four five six", TINY)
        assert emb.tokens == ["one", "two", "three", "four"]

    def test_padding_rows_zero(self):
        emb = encode_text("word", TINY)
        assert torch.equal(emb.vectors[1:], torch.zeros(3, 8, dtype=torch.float64))


class TestDenoise:
    def test_bit_identical_repeats(self, model, latent):
        text = model.encode("a dim disk moves left")
        a, _ = model.denoise(latent, 3, text)
        b, _ = model.denoise(latent, 3, text)
        assert torch.equal(a, b)

    def test_output_shape(self, model, latent):
        eps, _ = model.denoise(latent, 7)
        assert eps.shape == latent.shape

    def test_softmax_rows_normalized(self, model, latent):
        _, rec = model.denoise(latent, 7, model.encode("x y"), record=True)
        for field in ("temporal_maps", "self_maps", "cross_maps"):
            for maps in getattr(rec, field):
                sums = maps.sum(dim=-1)
                assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_record_shapes(self, model, latent):
        _, rec = model.denoise(latent, 7, record=True)
        hw, h, d = 16, TINY.attention_heads, TINY.model_width
        assert rec.temporal_maps[0].shape == (hw * h, 4, 4)
        assert rec.self_keys[0].shape == (4, hw, d)
        assert rec.self_maps[0].shape == (4 * h, hw, hw)
        assert rec.cross_maps[0].shape == (4 * h, hw, TINY.text_len)
        assert len(rec.temporal_maps) == TINY.num_blocks

    def test_shape_mismatch(self, model):
        with pytest.raises(ValidationError):
            model.denoise(torch.zeros(2, 2, 4, 4, dtype=torch.float64), 1)

    def test_record_with_control_rejected(self, model, latent):
        class Hook:
            pass

        with pytest.raises(ValidationError):
            model.forward(latent, 1, record=AttentionRecord(), control=Hook())

    def test_per_frame_text_accepted(self, model, latent):
        per_frame = Rng(3).normal_tensor((4, 4, 8))
        eps, _ = model.denoise(latent, 2, per_frame)
        assert eps.shape == latent.shape

    def test_temporal_maps_change_under_frame_permutation(self, model):
        rng = Rng(33)
        z = rng.normal_tensor((4, 2, 4, 4))
        perm = torch.tensor([1, 0, 3, 2])
        _, rec = model.denoise(z, 5, record=True)
        _, rec_p = model.denoise(z[perm], 5, record=True)
        assert not torch.allclose(rec.temporal_maps[0], rec_p.temporal_maps[0])

    def test_spatial_site_local_to_frame(self, model):
        # block-0 spatial keys of frame 0 ignore the other frames entirely
        rng = Rng(34)
        z = rng.normal_tensor((4, 2, 4, 4))
        other = z.clone()
        other[1:] = rng.normal_tensor((3, 2, 4, 4))
        _, rec_a = model.denoise(z, 5, record=True)
        _, rec_b = model.denoise(other, 5, record=True)
        assert torch.equal(rec_a.self_keys[0][0], rec_b.self_keys[0][0])
        assert torch.equal(rec_a.self_maps[0][:2], rec_b.self_maps[0][:2])


class TestGradWrtLatent:
    def test_zero_cotangent(self, model, latent):
        _, rec = model.denoise(latent, 3, record=True)
        cot = torch.zeros(TINY.num_blocks, *rec.temporal_maps[0].shape)
        g = model.grad_wrt_latent(latent, 3, None, "temporal_maps", cot)
        assert torch.equal(g, torch.zeros_like(latent))

    def test_gradient_shape(self, model, latent):
        _, rec = model.denoise(latent, 3, record=True)
        cot = torch.ones(TINY.num_blocks, *rec.self_keys[0].shape)
        g = model.grad_wrt_latent(latent, 3, None, "self_keys", cot)
        assert g.shape == latent.shape

    def test_unknown_selector(self, model, latent):
        with pytest.raises(ValidationError):
            model.grad_wrt_latent(latent, 3, None, "patch_norms", torch.zeros(1))

    def test_cotangent_shape_checked(self, model, latent):
        with pytest.raises(ValidationError):
            model.grad_wrt_latent(latent, 3, None, "self_keys", torch.zeros(3, 3))

    @pytest.mark.parametrize("selector", ["temporal_maps", "self_keys"])
    def test_matches_finite_differences(self, model, latent, selector):
        rng = Rng(55)
        text = model.encode("a bright square moves right")
        _, rec = model.denoise(latent, 6, text, record=True)
        feats = torch.stack(getattr(rec, selector))
        cot = rng.normal_tensor(tuple(feats.shape))
        grad = model.grad_wrt_latent(latent, 6, text, selector, cot)
        h = 1e-3
        for _ in range(5):
            idx = tuple(
                int(i) for i in rng.integers(0, 4, (4,)) * np.array([1, 0, 1, 1])
            )
            zp, zm = latent.clone(), latent.clone()
            zp[idx] += h
            zm[idx] -= h
            _, rp = model.denoise(zp, 6, text, record=True)
            _, rm = model.denoise(zm, 6, text, record=True)
            fd = float(
                (
                    (torch.stack(getattr(rp, selector)) - torch.stack(getattr(rm, selector)))
                    * cot
                ).sum()
                / (2 * h)
            )
            an = float(grad[idx])
            assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-8)

    def test_multiple_cotangents_single_forward(self, model, latent):
        _, rec = model.denoise(latent, 3, record=True)
        shape = (TINY.num_blocks, *rec.temporal_maps[0].shape)
        c1 = Rng(1).normal_tensor(shape)
        c2 = Rng(2).normal_tensor(shape)
        g1, g2 = model.grad_wrt_latent(latent, 3, None, "temporal_maps", [c1, c2])
        assert torch.equal(g1, model.grad_wrt_latent(latent, 3, None, "temporal_maps", c1))
        assert torch.equal(g2, model.grad_wrt_latent(latent, 3, None, "temporal_maps", c2))


class TestOracle:
    def test_zero_at_scaled_mean(self):
        sched = make_schedule(10, 1e-3, 2e-2, 10)
        mu = Rng(8).normal_tensor((2, 1, 2, 2))
        oracle = GaussianOracle(mean=mu, variance=0.7)
        ab = sched.alpha_bar_at(5)
        eps = oracle_epsilon(math.sqrt(ab) * mu, 5, oracle, sched)
        assert float(eps.abs().max()) < 1e-12

    def test_point_mass_limit(self):
        sched = make_schedule(10, 1e-3, 2e-2, 10)
        mu = Rng(9).normal_tensor((2, 1, 2, 2))
        z = Rng(10).normal_tensor((2, 1, 2, 2))
        ab = sched.alpha_bar_at(7)
        eps = oracle_epsilon(z, 7, GaussianOracle(mean=mu, variance=1e-12), sched)
        expected = (z - math.sqrt(ab) * mu) / math.sqrt(1 - ab)
        assert torch.allclose(eps, expected, atol=1e-9)

    def test_clean_endpoint_rejected(self):
        sched = make_schedule(10, 1e-3, 2e-2, 10)
        z = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
        with pytest.raises(ValidationError):
            oracle_epsilon(z, 0, GaussianOracle(mean=z, variance=1.0), sched)

    def test_variance_positive(self):
        with pytest.raises(ValidationError):
            GaussianOracle(mean=torch.zeros(1), variance=0.0)

    def test_monte_carlo_conditional_mean(self):
        # kernel estimate of E[noise | z_t] around z_t = 1 for scalar
        # Gaussian data; the analytic predictor must match within 1e-2
        ab = 0.5
        gen = np.random.Generator(np.random.Philox(key=424242))
        z0 = gen.standard_normal(1_000_000)
        eps = gen.standard_normal(1_000_000)
        z_t = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * eps
        window = np.abs(z_t - 1.0) < 0.05
        mc = eps[window].mean()
        sched = make_schedule(2, 0.292893218813452, 0.292893218813452, 2)
        assert sched.alpha_bar_at(2) == pytest.approx(0.5, abs=1e-12)
        z = torch.full((1, 1, 1, 1), 1.0, dtype=torch.float64)
        oracle = GaussianOracle(mean=torch.zeros(1, 1, 1, 1), variance=1.0)
        analytic = float(oracle_epsilon(z, 2, oracle, sched))
        assert analytic == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert abs(mc - analytic) < 1e-2


class TestTrainToy:
    def test_zero_steps_keeps_initialization(self):
        sched = make_schedule(10, 1e-3, 2e-2, 5)
        data = [Rng(1).normal_tensor((4, 2, 4, 4))]
        trained, losses = train_toy(data, 0, sched, Rng(0), cfg=TINY)
        fresh = VideoDenoiser(TINY)
        for (_, a), (_, b) in zip(trained.named_parameters(), fresh.named_parameters()):
            assert torch.equal(a, b)
        assert losses == []

    def test_seed_reproducibility(self):
        sched = make_schedule(10, 1e-3, 2e-2, 5)
        data = [Rng(1).normal_tensor((4, 2, 4, 4)) for _ in range(3)]
        m1, l1 = train_toy(data, 20, sched, Rng(77), cfg=TINY)
        m2, l2 = train_toy(data, 20, sched, Rng(77), cfg=TINY)
        assert l1 == l2
        for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
            assert torch.equal(a, b)

    def test_loss_descends(self):
        sched = make_schedule(100, 1e-3, 2e-2, 10)
        rng = Rng(5)
        data = [0.5 * rng.normal_tensor((4, 2, 4, 4)) for _ in range(8)]
        _, losses = train_toy(
            data, 200, sched, Rng(6), cfg=TINY, prompts=["a b"] * 8
        )
        assert sum(losses[-25:]) / 25 < sum(losses[:25]) / 25

    def test_empty_dataset_rejected(self):
        sched = make_schedule(10, 1e-3, 2e-2, 5)
        with pytest.raises(ValidationError):
            train_toy([], 1, sched, Rng(0), cfg=TINY)


class TestWeightsIO:
    def test_save_load_save_idempotent(self, model, tmp_path):
        save_weights(model, tmp_path / "w1")
        loaded = load_weights(tmp_path / "w1")
        save_weights(loaded, tmp_path / "w2")
        for f in sorted((tmp_path / "w1").iterdir()):
            assert (tmp_path / "w2" / f.name).read_bytes() == f.read_bytes()

    def test_loaded_model_runs(self, model, latent, tmp_path):
        save_weights(model, tmp_path / "w")
        loaded = load_weights(tmp_path / "w")
        a, _ = loaded.denoise(latent, 3)
        b, _ = loaded.denoise(latent, 3)
        assert torch.equal(a, b)
        assert loaded.cfg == model.cfg


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(model_width=30, attention_heads=4)

    def test_positive_dims(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(frames=0)

    def test_sinusoid_shape(self):
        out = sinusoid(torch.arange(5), 8)
        assert out.shape == (5, 8)
        assert torch.isfinite(out).all()
