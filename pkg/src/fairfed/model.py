"""Frozen-backbone similarity classifier with a trainable low-rank adapter.

The backbone is a fixed random projection W0 (features -> embedding) plus
two fixed unit-norm class prototypes. A sample is scored by the
temperature-scaled cosine similarity between its projected embedding
z = (W0 + delta) x and each prototype; training minimizes cross-entropy
over those logits and only the adapter receives gradients. cos(0, p) is
defined as 0 so degenerate embeddings stay finite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import AdapterGrads, FairLoraState, GroupGate, adapter_grads, delta_weights, zero_grads
from .errors import ConfigError, NumericError, ShapeError
from .linalg import Rng, random_normal, random_unit_vector

GATE_POLICIES = ("oracle_group", "population_mixture")


@dataclass
class FrozenBackbone:
    """Immutable projection + prototypes; arrays are write-protected."""

    W0: np.ndarray  # m x n
    prototypes: np.ndarray  # C x m, unit rows
    tau: float

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError("prototypes must be unit-norm")
        self.W0.setflags(write=False)
        self.prototypes.setflags(write=False)
        self._fingerprint = self.fingerprint()

    @property
    def out_dim(self) -> int:
        return self.W0.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W0.shape[1]

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.W0.tobytes())
        digest.update(self.prototypes.tobytes())
        return digest.hexdigest()

    def verify_integrity(self) -> bool:
        return self.fingerprint() == self._fingerprint


@dataclass
class Prediction:
    sample_id: str
    group: int
    label: int
    score: float  # positive-class probability
    logits: np.ndarray


def build_backbone(m: int, n: int, tau: float = 10.0, seed: int = 0) -> FrozenBackbone:
    """W0 ~ N(0, 1/n) entrywise, two random unit prototypes, all seeded."""
    if m < 1 or n < 1:
        raise ConfigError(f"backbone dims must be positive, got {m}x{n}")
    rng = Rng(seed)
    W0 = random_normal(rng, m, n) / np.sqrt(n)
    prototypes = np.stack([random_unit_vector(rng, m) for _ in range(2)])
    return FrozenBackbone(W0=W0, prototypes=prototypes, tau=tau)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    return exp / exp.sum()


def _logits_from_embedding(backbone: FrozenBackbone, z: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        return np.zeros(backbone.num_classes)
    return backbone.tau * (backbone.prototypes @ z) / norm


def forward(
    backbone: FrozenBackbone,
    adapter: FairLoraState,
    gate: GroupGate,
    x: np.ndarray,
) -> np.ndarray:
    """Class logits tau * cos((W0 + delta) x, prototype_c)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (backbone.in_dim,):
        raise ShapeError(f"input shape {x.shape} does not match feature dim {backbone.in_dim}")
    W = backbone.W0 + delta_weights(adapter, gate)
    return _logits_from_embedding(backbone, W @ x)


def _effective_group(adapter: FairLoraState, group: int) -> int:
    """Map a sample's group onto the adapter's gate index.

    Adapters with a single shared parameter set (plain LoRA, SVD-LoRA,
    dense, or a one-group configuration) ignore the sample's group.
    """
    if adapter.config.num_groups == 1:
        return 0
    if not 0 <= group < adapter.config.num_groups:
        raise ConfigError(
            f"sample group {group} out of range for adapter with "
            f"{adapter.config.num_groups} groups"
        )
    return group


def loss_and_grads(
    backbone: FrozenBackbone,
    adapter: FairLoraState,
    batch: Sequence[tuple[np.ndarray, int, int]],
) -> tuple[float, AdapterGrads]:
    """Mean cross-entropy over the batch and its adapter gradients.

    Each sample is gated one-hot on its own group; per-sample gradient
    contributions are summed and divided by the batch size. The chain rule
    runs through softmax, the cosine scores, and the linear projection;
    with zhat = z/|z| the cosine Jacobian is
        d(logit_c)/dz = (tau/|z|) * (p_c - (p_c . zhat) zhat).
    """
    if len(batch) == 0:
        raise ConfigError("loss_and_grads requires a nonempty batch")
    cfg = adapter.config
    # upstream dL/d(delta) accumulated per effective group
    upstream: dict[int, np.ndarray] = {}
    deltas: dict[int, np.ndarray] = {}
    total_loss = 0.0
    for x, label, group in batch:
        x = np.asarray(x, dtype=np.float64)
        if label not in (0, 1):
            raise ConfigError(f"labels must be 0 or 1, got {label!r}")
        g = _effective_group(adapter, group)
        if g not in deltas:
            deltas[g] = delta_weights(adapter, GroupGate.one_hot(g, cfg.num_groups))
        W = backbone.W0 + deltas[g]
        z = W @ x
        logits = _logits_from_embedding(backbone, z)
        probs = _softmax(logits)
        total_loss += -float(np.log(probs[label]))
        dlogits = probs.copy()
        dlogits[label] -= 1.0
        norm = float(np.linalg.norm(z))
        if norm == 0.0:
            continue  # logits are constant 0 here; gradient convention: 0
        zhat = z / norm
        # d(logit_c)/dz = tau * (p_c - (p_c . zhat) zhat) / |z|
        coeff = backbone.tau / norm
        dz = coeff * (
            backbone.prototypes.T @ dlogits
            - zhat * float((backbone.prototypes @ zhat) @ dlogits)
        )
        contribution = np.outer(dz, x)
        if g in upstream:
            upstream[g] += contribution
        else:
            upstream[g] = contribution
    grads = zero_grads(cfg)
    for g, up in sorted(upstream.items()):
        grads.add_(adapter_grads(adapter, GroupGate.one_hot(g, cfg.num_groups), up))
    grads = grads.scaled(1.0 / len(batch))
    loss = total_loss / len(batch)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss!r}")
    return loss, grads


def predict(
    backbone: FrozenBackbone,
    adapter: FairLoraState,
    samples,
    gate_policy: str = "oracle_group",
    pi: np.ndarray | None = None,
) -> list[Prediction]:
    """Score samples with either true-group gates or one fixed mixture.

    ``oracle_group`` gates each sample on its recorded group;
    ``population_mixture`` uses the supplied proportions ``pi`` for every
    sample (the fallback when demographics are unknown at inference).
    """
    if gate_policy not in GATE_POLICIES:
        raise ConfigError(f"unknown gate policy {gate_policy!r}, expected one of {GATE_POLICIES}")
    samples = list(samples)
    if not samples:
        raise ConfigError("predict requires a nonempty sample list")
    cfg = adapter.config
    gates: dict[int, np.ndarray] = {}
    if gate_policy == "population_mixture":
        if cfg.num_groups == 1:
            mixture_gate = GroupGate.one_hot(0, 1)
        else:
            if pi is None:
                raise ConfigError("population_mixture requires group proportions pi")
            mixture_gate = GroupGate.mixture(pi)
            if mixture_gate.num_groups != cfg.num_groups:
                raise ShapeError(
                    f"pi has {mixture_gate.num_groups} entries but adapter has "
                    f"{cfg.num_groups} groups"
                )
        shared_W = backbone.W0 + delta_weights(adapter, mixture_gate)
    out: list[Prediction] = []
    for s in samples:
        if gate_policy == "oracle_group":
            g = _effective_group(adapter, s.group)
            if g not in gates:
                gates[g] = backbone.W0 + delta_weights(adapter, GroupGate.one_hot(g, cfg.num_groups))
            W = gates[g]
        else:
            W = shared_W
        logits = _logits_from_embedding(backbone, W @ s.features)
        score = float(_softmax(logits)[1])
        out.append(
            Prediction(sample_id=s.id, group=s.group, label=s.label, score=score, logits=logits)
        )
    return out
