import numpy as np
import pytest

from fairfed.adapter import AdapterConfig, init_adapter
from fairfed.data import AttributeSchema, SiteSpec, SyntheticSpec, generate_synthetic, split
from fairfed.linalg import Rng, derive_seed, random_normal
from fairfed.model import build_backbone


@pytest.fixture
def schema3():
    return AttributeSchema(name="race", groups=("Asian", "Black", "White"))


def tiny_dataset(schema, n_per_site=120, sites=2, seed=7, feature_dim=6, label_noise=0.0):
    """Small skewed synthetic dataset for fast federation tests."""
    props = [(0.3, 0.3, 0.4), (0.1, 0.2, 0.7)]
    spec = SyntheticSpec(
        feature_dim=feature_dim,
        sites=tuple(
            SiteSpec(n_samples=n_per_site, group_proportions=props[i % len(props)], label_noise=label_noise)
            for i in range(sites)
        ),
        signal_strength=1.0,
        group_shift_scale=0.5,
        noise_sigma=1.0,
        seed=seed,
    )
    return generate_synthetic(spec, schema)


def tiny_splits(schema, **kwargs):
    seed = kwargs.pop("split_seed", 3)
    dataset = tiny_dataset(schema, **kwargs)
    return split(dataset, seed=seed)


def randomized_state(config: AdapterConfig, seed: int):
    """Adapter with nonzero U (and dense) so gradients flow through every factor."""
    state = init_adapter(config, seed)
    rng = Rng(derive_seed(seed, "perturb"))
    if state.U is not None:
        state.U = 0.5 * random_normal(rng, config.out_dim, config.rank)
    if state.dense is not None:
        state.dense = 0.5 * random_normal(rng, config.out_dim, config.in_dim)
    return state


def small_backbone(m=5, n=4, tau=6.0, seed=99):
    return build_backbone(m=m, n=n, tau=tau, seed=seed)


def random_batch(rng: Rng, n: int, size: int, num_groups: int):
    batch = []
    for i in range(size):
        x = np.array([rng.normal() for _ in range(n)])
        batch.append((x, i % 2, i % num_groups))
    return batch
