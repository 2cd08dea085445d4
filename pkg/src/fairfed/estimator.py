"""scikit-learn style front end for the federated adapter pipeline.

``FederatedFairLoraClassifier`` wraps dataset assembly, backbone
construction, and the federated round loop behind the usual
fit/predict/predict_proba surface, so the algorithm slots into sklearn
tooling (clone, get_params grids, metrics). Group and site metadata ride
along as optional fit/predict keyword arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapter import AdapterConfig
from .data import Sample, SiteSplit
from .errors import ConfigError
from .federation import FederationConfig, population_proportions, run_federation_training
from .linalg import derive_seed
from .model import build_backbone, predict


def _metadata_column(values, n: int, name: str) -> np.ndarray:
    if values is None:
        return np.zeros(n, dtype=int)
    arr = np.asarray(values, dtype=int)
    if arr.shape != (n,):
        raise ConfigError(f"{name} must have shape ({n},), got {arr.shape}")
    if np.any(arr < 0):
        raise ConfigError(f"{name} indices must be nonnegative")
    return arr


class FederatedFairLoraClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier trained by federated low-rank adaptation.

    Parameters
    ----------
    variant : {"fairlora", "svd_lora", "lora", "dense"}
        Adapter family. Only "fairlora" keeps per-group singular values.
    rank, lora_alpha : low-rank size and scaling numerator.
    s_init : singular-value initialization scheme.
    embed_dim, tau, backbone_seed : frozen-backbone geometry.
    rounds, client_fraction, ema_decay, alpha_mode, local_epochs,
    batch_size, lr, lr_decay_factor, lr_decay_at : federation schedule.
    threshold : score cutoff used by :meth:`predict`.
    seed : master seed for everything except the backbone.

    After ``fit``, ``predict_proba(X)`` scores with the population-mixture
    gate unless per-sample ``groups`` are supplied.
    """

    def __init__(
        self,
        variant: str = "fairlora",
        rank: int = 12,
        lora_alpha: float = 2.0,
        s_init: str = "half_half_cyclic",
        embed_dim: int = 16,
        tau: float = 10.0,
        backbone_seed: int = 2024,
        rounds: int = 50,
        client_fraction: float = 2.0 / 3.0,
        ema_decay: float = 0.9,
        alpha_mode: str = "data_size",
        local_epochs: int = 1,
        batch_size: int = 32,
        lr: float = 0.001,
        lr_decay_factor: float = 0.1,
        lr_decay_at: float = 0.8,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.variant = variant
        self.rank = rank
        self.lora_alpha = lora_alpha
        self.s_init = s_init
        self.embed_dim = embed_dim
        self.tau = tau
        self.backbone_seed = backbone_seed
        self.rounds = rounds
        self.client_fraction = client_fraction
        self.ema_decay = ema_decay
        self.alpha_mode = alpha_mode
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_at = lr_decay_at
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y, groups=None, sites=None):
        """Train on (X, y) partitioned by ``sites`` with group gates from ``groups``.

        Omitting ``sites`` trains a single client; omitting ``groups``
        collapses every sample into one demographic group.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if not np.all(np.isin(classes, (0, 1))):
            raise ConfigError(f"labels must be binary 0/1, got classes {classes}")
        n = X.shape[0]
        groups = _metadata_column(groups, n, "groups")
        sites = _metadata_column(sites, n, "sites")
        num_groups = int(groups.max()) + 1 if groups.size else 1

        site_splits: dict[int, SiteSplit] = {}
        for site in sorted(set(sites.tolist())):
            idx = np.flatnonzero(sites == site)
            samples = [
                Sample(
                    id=f"fit-{site}-{i}",
                    site=int(site),
                    group=int(groups[i]),
                    label=int(y[i]),
                    features=X[i],
                )
                for i in idx
            ]
            site_splits[int(site)] = SiteSplit(train=samples, val=[], test=[])

        adapter_cfg = AdapterConfig(
            variant=self.variant,
            rank=self.rank,
            lora_alpha=self.lora_alpha,
            out_dim=self.embed_dim,
            in_dim=X.shape[1],
            num_groups=num_groups if self.variant == "fairlora" else 1,
            s_init=self.s_init,
        )
        fed_cfg = FederationConfig(
            num_clients=len(site_splits),
            rounds=self.rounds,
            client_fraction=self.client_fraction,
            ema_decay=self.ema_decay,
            alpha_mode=self.alpha_mode,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr_initial=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_at=self.lr_decay_at,
            seed=derive_seed(self.seed, "federation"),
        )
        backbone = build_backbone(
            m=self.embed_dim, n=X.shape[1], tau=self.tau, seed=self.backbone_seed
        )
        state = run_federation_training(fed_cfg, site_splits, backbone, adapter_cfg)

        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.num_groups_ = adapter_cfg.num_groups
        self.backbone_ = backbone
        self.global_state_ = state
        self.adapter_ = state.ema
        self.population_pi_ = population_proportions(site_splits, adapter_cfg.num_groups)
        return self

    def _score_samples(self, X, groups) -> np.ndarray:
        check_is_fitted(self, "adapter_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {X.shape[1]} features but the model was fit with {self.n_features_in_}"
            )
        n = X.shape[0]
        if groups is not None:
            groups = _metadata_column(groups, n, "groups")
            policy, pi = "oracle_group", None
        else:
            groups = np.zeros(n, dtype=int)
            policy, pi = "population_mixture", self.population_pi_
        samples = [
            Sample(id=f"pred-{i}", site=0, group=int(groups[i]), label=0, features=X[i])
            for i in range(n)
        ]
        preds = predict(self.backbone_, self.adapter_, samples, gate_policy=policy, pi=pi)
        return np.array([p.score for p in preds])

    def predict_proba(self, X, groups=None) -> np.ndarray:
        """Column-stacked [P(y=0), P(y=1)] per sample."""
        scores = self._score_samples(X, groups)
        return np.column_stack([1.0 - scores, scores])

    def decision_function(self, X, groups=None) -> np.ndarray:
        return self._score_samples(X, groups)

    def predict(self, X, groups=None) -> np.ndarray:
        return (self._score_samples(X, groups) >= self.threshold).astype(int)
