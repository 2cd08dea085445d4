import numpy as np
import pytest

from conftest import randomized_state
from fairfed.adapter import (
    AdapterConfig,
    GroupGate,
    adapter_grads,
    delta_weights,
    effective_S,
    init_adapter,
    init_singular_values,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    zero_grads,
)
from fairfed.errors import ConfigError, NumericError, ShapeError
from fairfed.linalg import Rng, linspace, random_normal


class TestConfig:
    def test_rank_exceeding_dims_rejected(self):
        with pytest.raises(ConfigError, match="rank"):
            AdapterConfig(variant="lora", rank=9, out_dim=8, in_dim=16)

    def test_non_fair_variants_force_single_group(self):
        cfg = AdapterConfig(variant="svd_lora", rank=2, out_dim=4, in_dim=4, num_groups=5)
        assert cfg.num_groups == 1

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            AdapterConfig(variant="qlora", rank=2, out_dim=4, in_dim=4)


class TestInit:
    def test_u_zero_v_seeded_normal(self):
        cfg = AdapterConfig(variant="fairlora", rank=3, out_dim=5, in_dim=4, num_groups=2)
        state = init_adapter(cfg, seed=11)
        assert np.all(state.U == 0.0)
        assert np.array_equal(state.V, random_normal(Rng(11), 3, 4))

    def test_half_half_cyclic_shared_head(self):
        S = init_singular_values(12, 3, "half_half_cyclic")
        base = linspace(0.5, 0.1, 12)
        for g in range(3):
            assert np.array_equal(S[g, :6], base[:6])
        assert S[0, 0] == 0.5 and S[1, 5] == base[5] and S[2, 5] == base[5]

    def test_half_half_cyclic_distinct_tail_peaks(self):
        S = init_singular_values(12, 3, "half_half_cyclic")
        peaks = [int(np.argmax(S[g, 6:])) for g in range(3)]
        assert len(set(peaks)) == 3

    def test_full_cyclic_block_shift(self):
        S = init_singular_values(6, 2, "full_cyclic")
        base = linspace(0.5, 0.1, 6)
        assert np.array_equal(S[0], base)
        assert np.array_equal(S[1], np.roll(base, -3))

    def test_single_group_collapses_all_schemes(self):
        base = linspace(0.5, 0.1, 7)
        for scheme in ("uniform_linspace", "full_cyclic", "half_half_cyclic"):
            S = init_singular_values(7, 1, scheme)
            assert np.array_equal(S[0], base)

    def test_dense_initializes_to_zeros(self):
        cfg = AdapterConfig(variant="dense", rank=1, out_dim=3, in_dim=4)
        state = init_adapter(cfg, seed=0)
        assert np.all(state.dense == 0.0)
        assert state.U is None and state.V is None and state.S is None

    def test_same_seed_reproducible(self):
        cfg = AdapterConfig(variant="fairlora", rank=4, out_dim=6, in_dim=5, num_groups=3)
        a, b = init_adapter(cfg, 5), init_adapter(cfg, 5)
        assert a.allclose(b, tol=0.0)


class TestDeltaWeights:
    def test_zero_u_means_zero_delta(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=4, in_dim=3, num_groups=3)
        state = init_adapter(cfg, 1)
        for g in range(3):
            assert np.all(delta_weights(state, GroupGate.one_hot(g, 3)) == 0.0)

    def test_one_hot_equals_indicator_mixture(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=4, in_dim=3, num_groups=3)
        state = randomized_state(cfg, 2)
        for g in range(3):
            pi = np.zeros(3)
            pi[g] = 1.0
            a = delta_weights(state, GroupGate.one_hot(g, 3))
            b = delta_weights(state, GroupGate.mixture(pi))
            assert np.array_equal(a, b)

    def test_scalar_case(self):
        cfg = AdapterConfig(variant="fairlora", rank=1, lora_alpha=1.0, out_dim=1, in_dim=1)
        state = init_adapter(cfg, 0)
        state.U[0, 0] = 2.0
        state.V[0, 0] = 3.0
        state.S[0, 0] = 0.5
        assert delta_weights(state, GroupGate.one_hot(0, 1))[0, 0] == pytest.approx(3.0)

    def test_gate_group_mismatch(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=4, in_dim=3, num_groups=3)
        state = init_adapter(cfg, 1)
        with pytest.raises(ShapeError):
            delta_weights(state, GroupGate.one_hot(0, 2))

    def test_mixture_linearity(self):
        cfg = AdapterConfig(variant="fairlora", rank=3, out_dim=5, in_dim=4, num_groups=3)
        state = randomized_state(cfg, 3)
        pi = np.array([0.2, 0.5, 0.3])
        mixed = delta_weights(state, GroupGate.mixture(pi))
        summed = sum(pi[g] * delta_weights(state, GroupGate.one_hot(g, 3)) for g in range(3))
        np.testing.assert_allclose(mixed, summed, atol=1e-10)

    def test_lora_variant_scaling(self):
        cfg = AdapterConfig(variant="lora", rank=2, lora_alpha=4.0, out_dim=3, in_dim=3)
        state = randomized_state(cfg, 4)
        expected = (4.0 / 2.0) * state.U @ state.V
        np.testing.assert_allclose(delta_weights(state, GroupGate.one_hot(0, 1)), expected)

    def test_dense_returns_stored_matrix(self):
        cfg = AdapterConfig(variant="dense", rank=1, out_dim=3, in_dim=2)
        state = randomized_state(cfg, 5)
        out = delta_weights(state, GroupGate.one_hot(0, 1))
        assert np.array_equal(out, state.dense)
        out[0, 0] += 1.0  # returned matrix is a copy
        assert out[0, 0] != state.dense[0, 0]


class TestEffectiveS:
    def test_one_hot_selects_exact_row(self):
        cfg = AdapterConfig(variant="fairlora", rank=4, out_dim=5, in_dim=5, num_groups=3)
        state = init_adapter(cfg, 6)
        pi = np.array([0.0, 1.0, 0.0])
        assert np.array_equal(effective_S(state, pi), state.S[1])

    def test_identical_rows_any_mixture(self):
        cfg = AdapterConfig(
            variant="fairlora", rank=4, out_dim=5, in_dim=5, num_groups=3, s_init="uniform_linspace"
        )
        state = init_adapter(cfg, 7)
        out = effective_S(state, np.array([0.2, 0.3, 0.5]))
        np.testing.assert_allclose(out, state.S[0], atol=1e-15)

    def test_weighted_average(self):
        cfg = AdapterConfig(variant="fairlora", rank=1, out_dim=2, in_dim=2, num_groups=2)
        state = init_adapter(cfg, 8)
        state.S[0, 0] = 0.4
        state.S[1, 0] = 0.2
        assert effective_S(state, np.array([0.75, 0.25]))[0] == pytest.approx(0.35)

    def test_length_mismatch(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=3, in_dim=3, num_groups=2)
        state = init_adapter(cfg, 9)
        with pytest.raises(ShapeError):
            effective_S(state, np.array([1.0]))


def linear_loss_grads_oracle(state, gate, weights, eps=1e-5):
    """Central finite differences of loss(state) = sum(delta * weights)."""

    def loss(s):
        return float(np.sum(delta_weights(s, gate) * weights))

    out = {}
    for name in ("U", "V", "S", "dense"):
        param = getattr(state, name)
        if param is None:
            continue
        grad = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            up = state.copy()
            getattr(up, name)[idx] += eps
            down = state.copy()
            getattr(down, name)[idx] -= eps
            grad[idx] = (loss(up) - loss(down)) / (2 * eps)
        out[name] = grad
    return out


def relative_error(a, b, floor=1e-8):
    if abs(a) < floor and abs(b) < floor:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


class TestAdapterGrads:
    def test_zero_upstream_zero_grads(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=4, in_dim=3, num_groups=2)
        state = randomized_state(cfg, 10)
        g = adapter_grads(state, GroupGate.one_hot(0, 2), np.zeros((4, 3)))
        assert np.all(g.dU == 0.0) and np.all(g.dV == 0.0) and np.all(g.dS == 0.0)

    def test_one_hot_gates_inactive_groups_exactly_zero(self):
        cfg = AdapterConfig(variant="fairlora", rank=3, out_dim=4, in_dim=5, num_groups=3)
        state = randomized_state(cfg, 11)
        upstream = random_normal(Rng(12), 4, 5)
        g = adapter_grads(state, GroupGate.one_hot(1, 3), upstream)
        assert np.all(g.dS[0] == 0.0) and np.all(g.dS[2] == 0.0)
        assert np.any(g.dS[1] != 0.0)

    @pytest.mark.parametrize("variant,groups", [("fairlora", 3), ("svd_lora", 1), ("lora", 1), ("dense", 1)])
    def test_matches_finite_differences(self, variant, groups):
        cfg = AdapterConfig(variant=variant, rank=2, out_dim=4, in_dim=3, num_groups=groups)
        state = randomized_state(cfg, 13)
        gate = GroupGate.one_hot(groups - 1, groups)
        weights = random_normal(Rng(14), 4, 3)
        analytic = adapter_grads(state, gate, weights)
        numeric = linear_loss_grads_oracle(state, gate, weights)
        pairs = {"U": analytic.dU, "V": analytic.dV, "S": analytic.dS, "dense": analytic.d_dense}
        for name, fd in numeric.items():
            a = pairs[name]
            worst = max(
                relative_error(a[idx], fd[idx])
                for idx in np.ndindex(fd.shape)
            )
            assert worst < 1e-5, f"{variant}.{name}: rel err {worst}"

    def test_hundred_random_instances_against_finite_differences(self):
        rng = Rng(15)
        for trial in range(100):
            m = 1 + rng.randbelow(8)
            n = 1 + rng.randbelow(8)
            r = 1 + rng.randbelow(min(m, n))
            groups = 1 + rng.randbelow(3)
            cfg = AdapterConfig(
                variant="fairlora", rank=r, lora_alpha=0.5 + rng.uniform(),
                out_dim=m, in_dim=n, num_groups=groups,
            )
            state = randomized_state(cfg, 1000 + trial)
            pi = np.array([rng.uniform() + 0.05 for _ in range(groups)])
            gate = GroupGate.mixture(pi / pi.sum())
            weights = random_normal(rng, m, n)
            analytic = adapter_grads(state, gate, weights)
            numeric = linear_loss_grads_oracle(state, gate, weights)
            for name, fd in numeric.items():
                a = {"U": analytic.dU, "V": analytic.dV, "S": analytic.dS}[name]
                for idx in np.ndindex(fd.shape):
                    assert relative_error(a[idx], fd[idx]) < 1e-5

    def test_upstream_shape_mismatch(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=4, in_dim=3, num_groups=2)
        state = init_adapter(cfg, 16)
        with pytest.raises(ShapeError):
            adapter_grads(state, GroupGate.one_hot(0, 2), np.zeros((3, 4)))


class TestSgdStep:
    def test_zero_lr_leaves_state_bitwise(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=3, in_dim=3, num_groups=2)
        state = randomized_state(cfg, 17)
        grads = adapter_grads(state, GroupGate.one_hot(0, 2), random_normal(Rng(18), 3, 3))
        stepped = sgd_step(state, grads, 0.0)
        assert stepped.allclose(state, tol=0.0)

    def test_zero_grads_leave_state_bitwise(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=3, in_dim=3, num_groups=2)
        state = randomized_state(cfg, 19)
        stepped = sgd_step(state, zero_grads(cfg), 0.5)
        assert stepped.allclose(state, tol=0.0)

    def test_scalar_arithmetic(self):
        cfg = AdapterConfig(variant="dense", rank=1, out_dim=1, in_dim=1)
        state = init_adapter(cfg, 0)
        state.dense[0, 0] = 1.0
        grads = zero_grads(cfg)
        grads.d_dense[0, 0] = 2.0
        assert sgd_step(state, grads, 0.1).dense[0, 0] == pytest.approx(0.8)

    def test_non_finite_gradient_names_tensor(self):
        cfg = AdapterConfig(variant="fairlora", rank=2, out_dim=3, in_dim=3, num_groups=2)
        state = init_adapter(cfg, 20)
        grads = zero_grads(cfg)
        grads.dV[0, 0] = float("nan")
        with pytest.raises(NumericError, match="'V'"):
            sgd_step(state, grads, 0.1)

    def test_gating_exclusivity_over_many_steps(self):
        cfg = AdapterConfig(variant="fairlora", rank=3, out_dim=4, in_dim=4, num_groups=3)
        state = init_adapter(cfg, 21)
        initial_S = state.S.copy()
        rng = Rng(22)
        for _ in range(40):
            upstream = random_normal(rng, 4, 4)
            grads = adapter_grads(state, GroupGate.one_hot(1, 3), upstream)
            state = sgd_step(state, grads, 0.05)
        assert np.array_equal(state.S[0], initial_S[0])
        assert np.array_equal(state.S[2], initial_S[2])
        assert not np.array_equal(state.S[1], initial_S[1])


class TestCheckpoint:
    @pytest.mark.parametrize("variant,groups", [("fairlora", 3), ("svd_lora", 1), ("lora", 1), ("dense", 1)])
    def test_round_trip(self, tmp_path, variant, groups):
        cfg = AdapterConfig(variant=variant, rank=2, lora_alpha=1.5, out_dim=4, in_dim=3, num_groups=groups)
        state = randomized_state(cfg, 23)
        path = tmp_path / "adapter.bin"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert loaded.config.variant == variant
        assert loaded.config.rank == 2
        assert loaded.config.lora_alpha == 1.5
        assert loaded.config.num_groups == cfg.num_groups
        assert loaded.allclose(state, tol=0.0)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ConfigError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = AdapterConfig(variant="lora", rank=2, out_dim=4, in_dim=3)
        state = randomized_state(cfg, 24)
        path = tmp_path / "adapter.bin"
        save_checkpoint(state, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ConfigError, match="truncated"):
            load_checkpoint(path)
