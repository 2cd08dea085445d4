"""Federated training loop: sampling, local SGD, weighted aggregation, EMA.

One round samples a client subset, resets each sampled client to the
current EMA global adapter, runs local mini-batch SGD with per-sample
group gates, aggregates the returned factors with data-size (or uniform)
weights renormalized over the sampled subset, and folds the aggregate into
the EMA shadow that the next round's clients receive.

Determinism contract: every stream is derived from the master seed as
derive_seed(seed, purpose, round, client), so results are independent of
thread scheduling. FAIRFED_THREADS caps the worker pool.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterConfig, FairLoraState, init_adapter, sgd_step
from .data import Sample, SiteSplit
from .errors import ConfigError, ShapeError
from .linalg import Rng, derive_seed
from .metrics import FairnessReport, auc, build_report
from .model import FrozenBackbone, loss_and_grads, predict

ALPHA_MODES = ("data_size", "uniform")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    rounds: int = 50
    client_fraction: float = 2.0 / 3.0
    ema_decay: float = 0.9
    alpha_mode: str = "data_size"
    local_epochs: int = 1
    batch_size: int = 32
    lr_initial: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must be in (0,1], got {self.client_fraction}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0,1), got {self.ema_decay}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}, expected one of {ALPHA_MODES}")
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_initial <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.lr_decay_at <= 1.0:
            raise ConfigError(f"lr_decay_at must be in (0,1], got {self.lr_decay_at}")

    def learning_rate(self, round_idx: int) -> float:
        """Step-decayed schedule: drop by lr_decay_factor at round ceil(lr_decay_at * T)."""
        if self.rounds == 0:
            return self.lr_initial
        decay_round = math.ceil(self.lr_decay_at * self.rounds)
        if round_idx >= decay_round:
            return self.lr_initial * self.lr_decay_factor
        return self.lr_initial


@dataclass
class ClientState:
    id: int
    splits: SiteSplit
    adapter: FairLoraState
    alpha: float


@dataclass
class ClientUpdate:
    client_id: int
    adapter: FairLoraState
    num_samples: int
    mean_loss: float | None


@dataclass
class RoundRecord:
    round: int
    selected_clients: list[int]
    lr: float
    mean_local_loss: float | None
    eval_overall_auc: float | None = None

    def to_dict(self) -> dict:
        record = {
            "round": self.round,
            "selected_clients": self.selected_clients,
            "lr": self.lr,
            "mean_local_loss": self.mean_local_loss,
        }
        if self.eval_overall_auc is not None:
            record["eval"] = {"overall_auc": self.eval_overall_auc}
        return record


@dataclass
class GlobalState:
    round: int
    aggregate: FairLoraState
    ema: FairLoraState
    history: list[RoundRecord] = field(default_factory=list)


def sample_clients(rng: Rng, num_clients: int, fraction: float) -> list[int]:
    """Uniform subset of max(1, round(fraction * K)) distinct client indices."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"client fraction must be in (0,1], got {fraction}")
    size = max(1, int(round(fraction * num_clients)))
    size = min(size, num_clients)
    return sorted(rng.sample_indices(num_clients, size))


def _batches(order: list[int], batch_size: int) -> list[list[int]]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def local_update(
    client: ClientState,
    start: FairLoraState,
    cfg: FederationConfig,
    round_idx: int,
    lr: float,
    backbone: FrozenBackbone,
) -> ClientUpdate:
    """Local mini-batch SGD from ``start`` over the client's training split.

    The shuffle stream is derived from (seed, round, client id), so the
    trajectory is independent of which thread runs it.
    """
    train = client.splits.train
    if not train:
        raise ConfigError(f"client {client.id} has an empty training split")
    adapter = start.copy()
    rng = Rng(derive_seed(cfg.seed, "local", round_idx, client.id))
    loss_sum = 0.0
    sample_count = 0
    for _ in range(cfg.local_epochs):
        order = list(range(len(train)))
        rng.shuffle(order)
        for batch_idx in _batches(order, cfg.batch_size):
            batch = [(train[i].features, train[i].label, train[i].group) for i in batch_idx]
            loss, grads = loss_and_grads(backbone, adapter, batch)
            adapter = sgd_step(adapter, grads, lr)
            loss_sum += loss * len(batch)
            sample_count += len(batch)
    mean_loss = loss_sum / sample_count if sample_count else None
    return ClientUpdate(
        client_id=client.id,
        adapter=adapter,
        num_samples=len(train),
        mean_loss=mean_loss,
    )


def aggregation_weights(updates: list[ClientUpdate], alpha_mode: str) -> np.ndarray:
    """Per-update weights, renormalized over the participating subset."""
    if not updates:
        raise ConfigError("cannot aggregate an empty update list")
    if alpha_mode == "uniform":
        return np.full(len(updates), 1.0 / len(updates))
    if alpha_mode == "data_size":
        sizes = np.array([u.num_samples for u in updates], dtype=np.float64)
        return sizes / sizes.sum()
    raise ConfigError(f"unknown alpha_mode {alpha_mode!r}")


def aggregate(updates: list[ClientUpdate], alpha_mode: str = "data_size") -> FairLoraState:
    """Weighted sum of the clients' adapter tensors.

    Every group's singular values are averaged whether or not a client
    trained that group (clients return their unchanged copy). Identical
    updates aggregate to themselves bit-exactly. Data-size weighting is
    computed as (sum_k n_k X_k) / N so the weights sum to 1 exactly.
    """
    if not updates:
        raise ConfigError("cannot aggregate an empty update list")
    first = updates[0].adapter
    for u in updates[1:]:
        for (name, a), (_, b) in zip(first.named_tensors(), u.adapter.named_tensors()):
            if a.shape != b.shape:
                raise ShapeError(
                    f"client {u.client_id} tensor {name} has shape {b.shape}, expected {a.shape}"
                )
    if all(u.adapter.allclose(first, tol=0.0) for u in updates[1:]):
        return first.copy()
    tensors: dict[str, np.ndarray] = {}
    if alpha_mode == "data_size":
        total = float(sum(u.num_samples for u in updates))
        for name, _ in first.named_tensors():
            acc = sum(u.num_samples * getattr(u.adapter, name) for u in updates)
            tensors[name] = acc / total
    else:
        weights = aggregation_weights(updates, alpha_mode)
        for name, _ in first.named_tensors():
            tensors[name] = sum(w * getattr(u.adapter, name) for w, u in zip(weights, updates))
    return first.with_tensors(tensors)


def ema_update(state: GlobalState, fresh: FairLoraState, beta: float) -> GlobalState:
    """Fold a fresh aggregate into the EMA shadow and advance the round.

    shadow <- beta * shadow + (1 - beta) * fresh, computed per tensor.
    A fresh aggregate identical to the shadow leaves it untouched
    bit-for-bit; beta = 0 adopts the fresh aggregate exactly.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"ema decay must be in [0,1), got {beta}")
    state.aggregate = fresh.copy()
    if beta == 0.0 or fresh.allclose(state.ema, tol=0.0):
        state.ema = fresh.copy()
    else:
        blended = {
            name: beta * getattr(state.ema, name) + (1.0 - beta) * getattr(fresh, name)
            for name, _ in fresh.named_tensors()
        }
        state.ema = fresh.with_tensors(blended)
    state.round += 1
    return state


def _worker_count(num_tasks: int) -> int:
    env = os.environ.get("FAIRFED_THREADS")
    if env is not None:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"FAIRFED_THREADS must be an integer, got {env!r}")
        if cap < 1:
            raise ConfigError(f"FAIRFED_THREADS must be >= 1, got {cap}")
        return min(cap, max(1, num_tasks))
    return 1


def _build_clients(
    site_splits: dict[int, SiteSplit], init_state: FairLoraState
) -> list[ClientState]:
    total = sum(len(s.train) for s in site_splits.values())
    if total == 0:
        raise ConfigError("all training splits are empty")
    clients = []
    for site in sorted(site_splits):
        splits = site_splits[site]
        clients.append(
            ClientState(
                id=site,
                splits=splits,
                adapter=init_state.copy(),
                alpha=len(splits.train) / total,
            )
        )
    return clients


def population_proportions(site_splits: dict[int, SiteSplit], num_groups: int) -> np.ndarray:
    """Group mix of the pooled training data (the mixture-gate fallback).

    Group-agnostic adapters (num_groups == 1) collapse every sample onto
    gate index 0, mirroring how training and prediction gate them.
    """
    if num_groups == 1:
        return np.array([1.0])
    counts = np.zeros(num_groups, dtype=np.float64)
    for splits in site_splits.values():
        for s in splits.train:
            if 0 <= s.group < num_groups:
                counts[s.group] += 1
            else:
                raise ConfigError(f"sample {s.id} has group {s.group}, schema allows {num_groups}")
    if counts.sum() == 0:
        raise ConfigError("no training samples to infer group proportions from")
    return counts / counts.sum()


def run_federation_training(
    cfg: FederationConfig,
    site_splits: dict[int, SiteSplit],
    backbone: FrozenBackbone,
    adapter_cfg: AdapterConfig,
    eval_every: int = 0,
    gate_policy: str = "oracle_group",
) -> GlobalState:
    """The round loop alone: train and return the global state (no report).

    Each round samples a client subset, runs the sampled clients' local
    updates (possibly concurrently; results are identical either way),
    aggregates, and EMA-smooths.
    """
    if len(site_splits) != cfg.num_clients:
        raise ConfigError(
            f"config expects {cfg.num_clients} clients but {len(site_splits)} site splits given"
        )
    init_state = init_adapter(adapter_cfg, derive_seed(cfg.seed, "init"))
    clients = _build_clients(site_splits, init_state)
    state = GlobalState(round=0, aggregate=init_state.copy(), ema=init_state.copy())
    pi = population_proportions(site_splits, max(1, adapter_cfg.num_groups))
    for t in range(1, cfg.rounds + 1):
        lr = cfg.learning_rate(t)
        select_rng = Rng(derive_seed(cfg.seed, "select", t))
        selected = sample_clients(select_rng, cfg.num_clients, cfg.client_fraction)
        start = state.ema
        chosen = [clients[i] for i in selected]
        workers = _worker_count(len(chosen))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(
                    pool.map(lambda c: local_update(c, start, cfg, t, lr, backbone), chosen)
                )
        else:
            updates = [local_update(c, start, cfg, t, lr, backbone) for c in chosen]
        updates.sort(key=lambda u: u.client_id)
        for c, u in zip(chosen, updates):
            c.adapter = u.adapter
        fresh = aggregate(updates, cfg.alpha_mode)
        state = ema_update(state, fresh, cfg.ema_decay)
        weighted = [u for u in updates if u.mean_loss is not None]
        if weighted:
            total = sum(u.num_samples for u in weighted)
            mean_loss = sum(u.mean_loss * u.num_samples for u in weighted) / total
        else:
            mean_loss = None
        record = RoundRecord(
            round=t,
            selected_clients=[clients[i].id for i in selected],
            lr=lr,
            mean_local_loss=mean_loss,
        )
        if eval_every > 0 and t % eval_every == 0:
            record.eval_overall_auc = _pooled_val_auc(state.ema, clients, backbone, pi, gate_policy)
        state.history.append(record)
    return state


def run_federation(
    cfg: FederationConfig,
    site_splits: dict[int, SiteSplit],
    backbone: FrozenBackbone,
    adapter_cfg: AdapterConfig,
    group_labels: tuple[str, ...],
    attribute: str = "group",
    gate_policy: str = "oracle_group",
    threshold: float = 0.5,
    eval_every: int = 0,
) -> tuple[GlobalState, FairnessReport]:
    """Full protocol: train, then evaluate the final EMA adapter.

    The report scores the EMA adapter on every client's test split plus
    their pooled union; mixture-gate evaluation uses the pooled training
    group proportions.
    """
    state = run_federation_training(
        cfg, site_splits, backbone, adapter_cfg, eval_every=eval_every, gate_policy=gate_policy
    )
    pi = population_proportions(site_splits, max(1, adapter_cfg.num_groups))
    report = build_report(
        backbone,
        state.ema,
        {site: site_splits[site].test for site in sorted(site_splits)},
        group_labels=group_labels,
        attribute=attribute,
        gate_policy=gate_policy,
        threshold=threshold,
        pi=pi,
    )
    return state, report


def _pooled_val_auc(adapter, clients, backbone, pi, gate_policy) -> float | None:
    pooled: list[Sample] = []
    for c in clients:
        pooled.extend(c.splits.val)
    if not pooled:
        return None
    preds = predict(backbone, adapter, pooled, gate_policy=gate_policy, pi=pi)
    labels = [p.label for p in preds]
    if len(set(labels)) < 2:
        return None
    return auc([p.score for p in preds], labels)


@dataclass
class LocalRun:
    client_id: int
    adapter: FairLoraState
    report: FairnessReport
    round_losses: list[float | None]


def run_local_only(
    cfg: FederationConfig,
    site_splits: dict[int, SiteSplit],
    backbone: FrozenBackbone,
    adapter_cfg: AdapterConfig,
    group_labels: tuple[str, ...],
    attribute: str = "group",
    gate_policy: str = "oracle_group",
    threshold: float = 0.5,
) -> dict[int, LocalRun]:
    """Isolation ablation: every client trains alone, no aggregation.

    Each client runs the same schedule (rounds x local_epochs, same
    shuffle streams, same lr decay) but keeps its own adapter throughout;
    its report evaluates that adapter on its own test split only.
    """
    if len(site_splits) != cfg.num_clients:
        raise ConfigError(
            f"config expects {cfg.num_clients} clients but {len(site_splits)} site splits given"
        )
    init_state = init_adapter(adapter_cfg, derive_seed(cfg.seed, "init"))
    clients = _build_clients(site_splits, init_state)
    out: dict[int, LocalRun] = {}
    for client in clients:
        pi = population_proportions({client.id: client.splits}, max(1, adapter_cfg.num_groups))
        adapter = init_state.copy()
        losses: list[float | None] = []
        for t in range(1, cfg.rounds + 1):
            update = local_update(client, adapter, cfg, t, cfg.learning_rate(t), backbone)
            adapter = update.adapter
            losses.append(update.mean_loss)
        client.adapter = adapter
        report = build_report(
            backbone,
            adapter,
            {client.id: client.splits.test},
            group_labels=group_labels,
            attribute=attribute,
            gate_policy=gate_policy,
            threshold=threshold,
            pi=pi,
        )
        out[client.id] = LocalRun(
            client_id=client.id, adapter=adapter, report=report, round_losses=losses
        )
    return out
