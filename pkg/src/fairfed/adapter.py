"""Low-rank adapter family: plain LoRA, SVD-LoRA, and the group-gated form.

The group-gated adapter factors a weight update as ``(alpha/r) * U diag(s) V``
where ``U`` and ``V`` are shared across demographic groups and ``s`` is a
convex combination of per-group singular-value vectors selected by a gate.
With a one-hot gate only the active group's singular values participate in
the forward pass and receive gradients; the other groups' values are left
bit-for-bit untouched by training.

Checkpoint wire format (little-endian):
    magic   8 bytes  b"FAIRLORA"
    version u32      1
    variant u32      0=dense 1=lora 2=svd_lora 3=fairlora
    m, n, r, num_groups  u32 each
    lora_alpha  f64
then float64 payload, row-major:
    dense variant:   the full m*n matrix
    other variants:  U (m*r), V (r*n), then for svd_lora/fairlora the
                     singular-value vectors in group order (num_groups * r)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .linalg import Rng, linspace, random_normal

VARIANTS = ("dense", "lora", "svd_lora", "fairlora")
S_INIT_SCHEMES = ("uniform_linspace", "full_cyclic", "half_half_cyclic")

S_INIT_HIGH = 0.5
S_INIT_LOW = 0.1

_CHECKPOINT_MAGIC = b"FAIRLORA"
_CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIId")


@dataclass(frozen=True)
class AdapterConfig:
    """Static description of one adapter.

    ``num_groups`` is forced to 1 for every variant except ``fairlora``;
    those variants keep a single shared set of parameters.
    """

    variant: str = "fairlora"
    rank: int = 12
    lora_alpha: float = 2.0
    out_dim: int = 16
    in_dim: int = 32
    num_groups: int = 1
    s_init: str = "half_half_cyclic"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown adapter variant {self.variant!r}, expected one of {VARIANTS}")
        if self.s_init not in S_INIT_SCHEMES:
            raise ConfigError(f"unknown s_init scheme {self.s_init!r}, expected one of {S_INIT_SCHEMES}")
        if self.out_dim < 1 or self.in_dim < 1:
            raise ConfigError(f"adapter dims must be positive, got {self.out_dim}x{self.in_dim}")
        if self.rank < 1 or self.rank > min(self.out_dim, self.in_dim):
            raise ConfigError(
                f"rank must satisfy 1 <= rank <= min(out_dim, in_dim) = "
                f"{min(self.out_dim, self.in_dim)}, got {self.rank}"
            )
        if self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be positive, got {self.lora_alpha}")
        if self.num_groups < 1:
            raise ConfigError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.variant != "fairlora" and self.num_groups != 1:
            object.__setattr__(self, "num_groups", 1)

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank


@dataclass(frozen=True)
class GroupGate:
    """Mixture weights over groups; ``active`` is set for one-hot gates."""

    pi: np.ndarray
    active: int | None = None

    @classmethod
    def one_hot(cls, group: int, num_groups: int) -> "GroupGate":
        if not 0 <= group < num_groups:
            raise ConfigError(f"gate group {group} out of range for {num_groups} groups")
        pi = np.zeros(num_groups, dtype=np.float64)
        pi[group] = 1.0
        return cls(pi=pi, active=group)

    @classmethod
    def mixture(cls, pi) -> "GroupGate":
        arr = np.asarray(pi, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ConfigError(f"mixture weights must be a nonempty vector, got shape {arr.shape}")
        if np.any(arr < 0):
            raise ConfigError("mixture weights must be nonnegative")
        if abs(float(arr.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1, got {float(arr.sum())!r}")
        return cls(pi=arr.copy())

    @property
    def num_groups(self) -> int:
        return int(self.pi.size)


@dataclass
class FairLoraState:
    """Adapter parameters.

    ``U`` is m x r, ``V`` is r x n, ``S`` stacks the per-group
    singular-value vectors as a (num_groups, r) array. The dense variant
    stores a full m x n matrix in ``dense`` instead; plain LoRA has no
    ``S`` (implicit identity).
    """

    config: AdapterConfig
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    S: np.ndarray | None = None
    dense: np.ndarray | None = None

    def copy(self) -> "FairLoraState":
        return FairLoraState(
            config=self.config,
            U=None if self.U is None else self.U.copy(),
            V=None if self.V is None else self.V.copy(),
            S=None if self.S is None else self.S.copy(),
            dense=None if self.dense is None else self.dense.copy(),
        )

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """The trainable arrays, in a fixed order (used by aggregation/EMA)."""
        if self.config.variant == "dense":
            return [("dense", self.dense)]
        out = [("U", self.U), ("V", self.V)]
        if self.S is not None:
            out.append(("S", self.S))
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "FairLoraState":
        new = self.copy()
        for name, arr in tensors.items():
            setattr(new, name, arr)
        return new

    def allclose(self, other: "FairLoraState", tol: float = 0.0) -> bool:
        if self.config.variant != other.config.variant:
            return False
        for (_, a), (_, b) in zip(self.named_tensors(), other.named_tensors()):
            if a.shape != b.shape:
                return False
            if tol == 0.0:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0.0, atol=tol):
                return False
        return True


@dataclass
class AdapterGrads:
    """Gradients mirroring :class:`FairLoraState` shapes.

    For a one-hot gate on group g, ``dS`` rows of every other group are
    exactly zero.
    """

    dU: np.ndarray | None = None
    dV: np.ndarray | None = None
    dS: np.ndarray | None = None
    d_dense: np.ndarray | None = None

    def scaled(self, factor: float) -> "AdapterGrads":
        return AdapterGrads(
            dU=None if self.dU is None else factor * self.dU,
            dV=None if self.dV is None else factor * self.dV,
            dS=None if self.dS is None else factor * self.dS,
            d_dense=None if self.d_dense is None else factor * self.d_dense,
        )

    def add_(self, other: "AdapterGrads") -> None:
        """In-place accumulation; shapes must already agree."""
        for name in ("dU", "dV", "dS", "d_dense"):
            mine, theirs = getattr(self, name), getattr(other, name)
            if theirs is None:
                continue
            if mine is None:
                setattr(self, name, theirs.copy())
            else:
                mine += theirs


def zero_grads(config: AdapterConfig) -> AdapterGrads:
    if config.variant == "dense":
        return AdapterGrads(d_dense=np.zeros((config.out_dim, config.in_dim)))
    grads = AdapterGrads(
        dU=np.zeros((config.out_dim, config.rank)),
        dV=np.zeros((config.rank, config.in_dim)),
    )
    if config.variant in ("svd_lora", "fairlora"):
        grads.dS = np.zeros((config.num_groups, config.rank))
    return grads


def init_singular_values(rank: int, num_groups: int, scheme: str) -> np.ndarray:
    """Per-group singular-value vectors over the base ramp linspace(0.5, 0.1, r).

    uniform_linspace: every group gets the ramp unchanged.
    full_cyclic: group g's vector is the ramp block-shifted by g*floor(r/G),
        so each group peaks at a different rank.
    half_half_cyclic: the first ceil(r/2) ranks are the shared ramp prefix;
        the remaining ranks cycle a block shift of g*floor(q/G) through the
        ramp tail (q = r - ceil(r/2)), giving each group its strongest
        tail response at a distinct rank while the head stays common.
    """
    base = linspace(S_INIT_HIGH, S_INIT_LOW, rank)
    S = np.empty((num_groups, rank), dtype=np.float64)
    if scheme == "uniform_linspace":
        S[:] = base
        return S
    if scheme == "full_cyclic":
        stride = rank // num_groups
        for g in range(num_groups):
            for j in range(rank):
                S[g, j] = base[(j + g * stride) % rank]
        return S
    if scheme == "half_half_cyclic":
        head = (rank + 1) // 2
        tail = rank - head
        stride = tail // num_groups if num_groups and tail else 0
        for g in range(num_groups):
            S[g, :head] = base[:head]
            for j in range(head, rank):
                S[g, j] = base[head + ((j - head + g * stride) % tail)]
        return S
    raise ConfigError(f"unknown s_init scheme {scheme!r}")


def init_adapter(config: AdapterConfig, seed: int) -> FairLoraState:
    """Fresh adapter: U = 0, V ~ N(0,1) from the seeded stream, S per scheme.

    A zero U makes the initial weight update exactly zero for every
    variant, so an untrained adapter never perturbs the frozen model.
    """
    if config.variant == "dense":
        return FairLoraState(
            config=config,
            dense=np.zeros((config.out_dim, config.in_dim), dtype=np.float64),
        )
    rng = Rng(seed)
    U = np.zeros((config.out_dim, config.rank), dtype=np.float64)
    V = random_normal(rng, config.rank, config.in_dim)
    S = None
    if config.variant in ("svd_lora", "fairlora"):
        S = init_singular_values(config.rank, config.num_groups, config.s_init)
    return FairLoraState(config=config, U=U, V=V, S=S)


def _check_gate(state: FairLoraState, gate: GroupGate) -> None:
    if gate.num_groups != state.config.num_groups:
        raise ShapeError(
            f"gate has {gate.num_groups} groups but adapter has "
            f"{state.config.num_groups}"
        )


def effective_S(state: FairLoraState, pi) -> np.ndarray:
    """Convex combination sum_g pi[g] * S[g] (length-r vector)."""
    if state.S is None:
        raise ConfigError(f"variant {state.config.variant!r} has no singular values")
    arr = np.asarray(pi, dtype=np.float64)
    if arr.shape != (state.config.num_groups,):
        raise ShapeError(
            f"mixture length {arr.shape} does not match {state.config.num_groups} groups"
        )
    return arr @ state.S


def delta_weights(state: FairLoraState, gate: GroupGate) -> np.ndarray:
    """The m x n weight update contributed by the adapter under ``gate``."""
    cfg = state.config
    if cfg.variant == "dense":
        return state.dense.copy()
    _check_gate(state, gate)
    if cfg.variant == "lora":
        return cfg.scaling * (state.U @ state.V)
    s = effective_S(state, gate.pi)
    return cfg.scaling * ((state.U * s[np.newaxis, :]) @ state.V)


def adapter_grads(state: FairLoraState, gate: GroupGate, upstream: np.ndarray) -> AdapterGrads:
    """Backpropagate ``upstream`` = dL/d(delta) into the adapter factors.

    With c = alpha/r and s = sum_g pi_g S_g:
        dU   = c * upstream V^T diag(s)
        dV   = c * diag(s) U^T upstream
        dS_g = pi_g * c * diag(U^T upstream V^T)
    so a one-hot gate sends exactly zero gradient to inactive groups.
    """
    cfg = state.config
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cfg.out_dim, cfg.in_dim):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match adapter "
            f"{cfg.out_dim}x{cfg.in_dim}"
        )
    if cfg.variant == "dense":
        return AdapterGrads(d_dense=upstream.copy())
    _check_gate(state, gate)
    c = cfg.scaling
    if cfg.variant == "lora":
        return AdapterGrads(dU=c * (upstream @ state.V.T), dV=c * (state.U.T @ upstream))
    s = effective_S(state, gate.pi)
    dU = c * (upstream @ state.V.T) * s[np.newaxis, :]
    dV = c * s[:, np.newaxis] * (state.U.T @ upstream)
    core = state.U.T @ upstream @ state.V.T
    ds = c * np.diagonal(core)
    dS = gate.pi[:, np.newaxis] * ds[np.newaxis, :]
    if gate.active is not None:
        # one-hot: force exact zeros off the active row
        dS = np.zeros_like(state.S)
        dS[gate.active] = ds
    return AdapterGrads(dU=dU, dV=dV, dS=dS)


def sgd_step(state: FairLoraState, grads: AdapterGrads, lr: float) -> FairLoraState:
    """One gradient-descent step p <- p - lr * dp on every present tensor."""
    if lr < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    pairs = {"U": grads.dU, "V": grads.dV, "S": grads.dS, "dense": grads.d_dense}
    updated: dict[str, np.ndarray] = {}
    for name, grad in pairs.items():
        param = getattr(state, name)
        if param is None and grad is None:
            continue
        if param is None or grad is None:
            raise ShapeError(f"gradient/parameter mismatch for tensor {name!r}")
        if grad.shape != param.shape:
            raise ShapeError(f"{name} gradient shape {grad.shape} != parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for tensor {name!r}")
        updated[name] = param - lr * grad
    return state.with_tensors(updated)


def save_checkpoint(state: FairLoraState, path) -> None:
    """Write the adapter in the documented binary layout."""
    cfg = state.config
    header = _HEADER.pack(
        _CHECKPOINT_MAGIC,
        _CHECKPOINT_VERSION,
        VARIANTS.index(cfg.variant),
        cfg.out_dim,
        cfg.in_dim,
        cfg.rank,
        cfg.num_groups,
        cfg.lora_alpha,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        if cfg.variant == "dense":
            fh.write(state.dense.astype("<f8").tobytes())
            return
        fh.write(state.U.astype("<f8").tobytes())
        fh.write(state.V.astype("<f8").tobytes())
        if state.S is not None:
            fh.write(state.S.astype("<f8").tobytes())


def load_checkpoint(path) -> FairLoraState:
    """Inverse of :func:`save_checkpoint`.

    The s_init scheme is not part of the wire format (it only matters at
    initialization), so the restored config carries the default scheme.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: file too short to hold a checkpoint header")
    magic, version, variant_code, m, n, r, groups, alpha = _HEADER.unpack_from(raw)
    if magic != _CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not an adapter checkpoint (bad magic {magic!r})")
    if version != _CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    if variant_code >= len(VARIANTS):
        raise ConfigError(f"{path}: unknown variant code {variant_code}")
    cfg = AdapterConfig(
        variant=VARIANTS[variant_code],
        rank=r,
        lora_alpha=alpha,
        out_dim=m,
        in_dim=n,
        num_groups=groups,
    )
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)

    def take(offset: int, count: int, what: str) -> tuple[np.ndarray, int]:
        if offset + count > body.size:
            raise ConfigError(f"{path}: truncated checkpoint while reading {what}")
        return body[offset : offset + count].astype(np.float64), offset + count

    pos = 0
    if cfg.variant == "dense":
        flat, pos = take(pos, m * n, "dense matrix")
        state = FairLoraState(config=cfg, dense=flat.reshape(m, n))
    else:
        u_flat, pos = take(pos, m * r, "U")
        v_flat, pos = take(pos, r * n, "V")
        S = None
        if cfg.variant in ("svd_lora", "fairlora"):
            s_flat, pos = take(pos, groups * r, "S")
            S = s_flat.reshape(groups, r)
        state = FairLoraState(config=cfg, U=u_flat.reshape(m, r), V=v_flat.reshape(r, n), S=S)
    if pos != body.size:
        raise ConfigError(f"{path}: {body.size - pos} unexpected trailing values")
    return state
