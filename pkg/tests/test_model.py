import numpy as np
import pytest

from conftest import randomized_state, random_batch, small_backbone
from fairfed.adapter import AdapterConfig, GroupGate, init_adapter, sgd_step
from fairfed.data import Sample
from fairfed.errors import ConfigError, ShapeError
from fairfed.linalg import Rng, random_normal
from fairfed.model import build_backbone, forward, loss_and_grads, predict


class TestBackbone:
    def test_same_seed_identical(self):
        a = build_backbone(6, 4, tau=10.0, seed=1)
        b = build_backbone(6, 4, tau=10.0, seed=1)
        assert np.array_equal(a.W0, b.W0)
        assert np.array_equal(a.prototypes, b.prototypes)

    def test_different_seeds_differ(self):
        a = build_backbone(6, 4, seed=1)
        b = build_backbone(6, 4, seed=2)
        assert not np.array_equal(a.W0, b.W0)

    def test_prototypes_unit_norm(self):
        bb = build_backbone(9, 5, seed=3)
        np.testing.assert_allclose(np.linalg.norm(bb.prototypes, axis=1), 1.0, atol=1e-9)

    def test_arrays_write_protected(self):
        bb = build_backbone(4, 4, seed=4)
        with pytest.raises(ValueError):
            bb.W0[0, 0] = 1.0

    def test_fingerprint_detects_state(self):
        bb = build_backbone(4, 4, seed=5)
        assert bb.verify_integrity()


class TestForward:
    def test_fresh_adapter_matches_backbone_only(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = init_adapter(cfg, 6)
        x = random_normal(Rng(7), 1, 4)[0]
        logits = forward(bb, state, GroupGate.one_hot(1, 2), x)
        z = bb.W0 @ x
        expected = bb.tau * (bb.prototypes @ z) / np.linalg.norm(z)
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_zero_input_gives_zero_logits(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=5, in_dim=4)
        state = init_adapter(cfg, 8)
        assert np.array_equal(forward(bb, state, GroupGate.one_hot(0, 1), np.zeros(4)), np.zeros(2))

    def test_scale_invariance_in_input(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = randomized_state(cfg, 9)
        x = random_normal(Rng(10), 1, 4)[0]
        a = forward(bb, state, GroupGate.one_hot(0, 2), x)
        b = forward(bb, state, GroupGate.one_hot(0, 2), 2.0 * x)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_dimension_mismatch(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=5, in_dim=4)
        state = init_adapter(cfg, 11)
        with pytest.raises(ShapeError):
            forward(bb, state, GroupGate.one_hot(0, 1), np.zeros(5))


class TestLossAndGrads:
    def test_separable_sample_with_huge_tau_saturates(self):
        bb = build_backbone(5, 4, tau=10000.0, seed=12)
        cfg = AdapterConfig(variant="dense", rank=1, out_dim=5, in_dim=4)
        state = init_adapter(cfg, 13)
        # craft x whose embedding aligns with the positive prototype
        x = np.linalg.lstsq(bb.W0, bb.prototypes[1], rcond=None)[0]
        loss, _ = loss_and_grads(bb, state, [(x, 1, 0)])
        assert loss < 1e-6

    def test_single_group_batch_gates_ds(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=3)
        state = randomized_state(cfg, 14)
        batch = [(random_normal(Rng(15 + i), 1, 4)[0], i % 2, 1) for i in range(4)]
        _, grads = loss_and_grads(bb, state, batch)
        assert np.all(grads.dS[0] == 0.0) and np.all(grads.dS[2] == 0.0)
        assert np.any(grads.dS[1] != 0.0)

    def test_batch_loss_is_mean_of_singles(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = randomized_state(cfg, 16)
        batch = random_batch(Rng(17), 4, 6, 2)
        whole, _ = loss_and_grads(bb, state, batch)
        singles = [loss_and_grads(bb, state, [item])[0] for item in batch]
        assert abs(whole - np.mean(singles)) < 1e-10

    def test_batch_grads_are_mean_of_singles(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = randomized_state(cfg, 18)
        batch = random_batch(Rng(19), 4, 5, 2)
        _, whole = loss_and_grads(bb, state, batch)
        parts = [loss_and_grads(bb, state, [item])[1] for item in batch]
        for name in ("dU", "dV", "dS"):
            summed = sum(getattr(p, name) for p in parts) / len(batch)
            np.testing.assert_allclose(getattr(whole, name), summed, atol=1e-12)

    def test_empty_batch_rejected(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=5, in_dim=4)
        with pytest.raises(ConfigError):
            loss_and_grads(bb, init_adapter(cfg, 20), [])

    @pytest.mark.parametrize("variant,groups", [("fairlora", 3), ("svd_lora", 1), ("lora", 1), ("dense", 1)])
    def test_end_to_end_finite_differences(self, variant, groups):
        bb = build_backbone(4, 3, tau=5.0, seed=21)
        cfg = AdapterConfig(variant=variant, rank=2, lora_alpha=1.3, out_dim=4, in_dim=3, num_groups=groups)
        state = randomized_state(cfg, 22)
        batch = random_batch(Rng(23), 3, 3, groups)
        _, grads = loss_and_grads(bb, state, batch)
        eps = 1e-5
        pairs = {"U": grads.dU, "V": grads.dV, "S": grads.dS, "dense": grads.d_dense}
        for name, analytic in pairs.items():
            if analytic is None:
                continue
            param = getattr(state, name)
            for idx in np.ndindex(param.shape):
                up = state.copy()
                getattr(up, name)[idx] += eps
                down = state.copy()
                getattr(down, name)[idx] -= eps
                fd = (loss_and_grads(bb, up, batch)[0] - loss_and_grads(bb, down, batch)[0]) / (2 * eps)
                a = analytic[idx]
                if abs(a) < 1e-8 and abs(fd) < 1e-8:
                    continue
                rel = abs(a - fd) / max(abs(a), abs(fd))
                assert rel < 1e-4, f"{variant}.{name}[{idx}]: {a} vs {fd}"

    def test_backbone_untouched_by_training(self):
        bb = small_backbone()
        before = (bb.W0.tobytes(), bb.prototypes.tobytes())
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = randomized_state(cfg, 24)
        rng = Rng(25)
        for _ in range(10):
            _, grads = loss_and_grads(bb, state, random_batch(rng, 4, 4, 2))
            state = sgd_step(state, grads, 0.1)
        assert (bb.W0.tobytes(), bb.prototypes.tobytes()) == before
        assert bb.verify_integrity()


def _samples(rng, n_features, count, num_groups):
    out = []
    for i in range(count):
        x = np.array([rng.normal() for _ in range(n_features)])
        out.append(Sample(id=f"s{i}", site=0, group=i % num_groups, label=i % 2, features=x))
    return out


class TestPredict:
    def test_fresh_adapter_policies_identical(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=3)
        state = init_adapter(cfg, 26)
        samples = _samples(Rng(27), 4, 9, 3)
        oracle = predict(bb, state, samples, "oracle_group")
        mixture = predict(bb, state, samples, "population_mixture", pi=np.array([0.2, 0.3, 0.5]))
        for a, b in zip(oracle, mixture):
            assert a.score == b.score

    def test_single_group_policies_identical_even_when_trained(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="svd_lora", rank=2, out_dim=5, in_dim=4)
        state = randomized_state(cfg, 28)
        samples = _samples(Rng(29), 4, 6, 1)
        oracle = predict(bb, state, samples, "oracle_group")
        mixture = predict(bb, state, samples, "population_mixture")
        for a, b in zip(oracle, mixture):
            assert a.score == b.score

    def test_scores_in_open_unit_interval(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = randomized_state(cfg, 30)
        for p in predict(bb, state, _samples(Rng(31), 4, 20, 2), "oracle_group"):
            assert 0.0 < p.score < 1.0
            assert np.isfinite(p.logits).all()

    def test_score_is_positive_class_softmax(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=5, in_dim=4)
        state = randomized_state(cfg, 32)
        for p in predict(bb, state, _samples(Rng(33), 4, 5, 1), "oracle_group"):
            expected = np.exp(p.logits[1]) / np.exp(p.logits).sum()
            assert p.score == pytest.approx(expected, abs=1e-9)

    def test_unknown_group_index_rejected(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=5, in_dim=4, num_groups=2)
        state = init_adapter(cfg, 34)
        bad = [Sample(id="x", site=0, group=5, label=0, features=np.zeros(4))]
        with pytest.raises(ConfigError):
            predict(bb, state, bad, "oracle_group")

    def test_empty_samples_rejected(self):
        bb = small_backbone()
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=5, in_dim=4)
        with pytest.raises(ConfigError):
            predict(bb, init_adapter(cfg, 35), [], "oracle_group")
