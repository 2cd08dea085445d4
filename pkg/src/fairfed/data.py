"""Synthetic multi-site datasets with demographic skew, splits, and JSONL I/O.

Generative model (one draw per master seed):
    for each group g: a unit label direction u_g and a unit offset c_g are
    drawn once from the seeded stream (u_0..u_{G-1} first, then c_0..c_{G-1});
    per site, group membership and positive labels are assigned by exact
    largest-remainder allocation (labels allocated within each group block);
    each sample's features are
        x = (2y - 1) * signal_strength * u_g
            + group_shift_scale * c_g
            + noise_sigma * normal(feature_dim)
    built from the pre-noise label y, after which the recorded label is
    flipped with probability ``label_noise``.
Everything is a pure function of (spec, seed): the draw order above is part
of the format contract, so identical seeds give byte-identical datasets.

JSONL interchange format (UTF-8, one object per line):
    header  {"type": "header", "attribute": ..., "groups": [...], "feature_dim": N}
    sample  {"id": ..., "site": int, "group": int, "label": 0|1, "features": [...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .linalg import Rng, derive_seed, largest_remainder, random_unit_vector


@dataclass(frozen=True)
class AttributeSchema:
    """A sensitive attribute and its ordered group labels (index = group id)."""

    name: str
    groups: tuple[str, ...]

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("schema.groups must be nonempty")
        if len(set(self.groups)) != len(self.groups):
            raise ConfigError(f"schema.groups contains duplicates: {self.groups}")
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def num_groups(self) -> int:
        return len(self.groups)


@dataclass
class Sample:
    id: str
    site: int
    group: int
    label: int
    features: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and self.site == other.site
            and self.group == other.group
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class SiteSpec:
    """Per-site composition: size, group mix, prevalence, label noise."""

    n_samples: int
    group_proportions: tuple[float, ...]
    positive_rate: float = 0.5
    label_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "group_proportions", tuple(self.group_proportions))
        if self.n_samples < 1:
            raise ConfigError(f"site n_samples must be positive, got {self.n_samples}")
        if any(p < 0 for p in self.group_proportions):
            raise ConfigError("group_proportions must be nonnegative")
        if abs(sum(self.group_proportions) - 1.0) > 1e-9:
            raise ConfigError(
                f"group_proportions must sum to 1, got {sum(self.group_proportions)!r}"
            )
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError(f"positive_rate must be in (0,1), got {self.positive_rate}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError(f"label_noise must be in [0, 0.5), got {self.label_noise}")


@dataclass(frozen=True)
class SyntheticSpec:
    feature_dim: int
    sites: tuple[SiteSpec, ...]
    signal_strength: float = 1.0
    group_shift_scale: float = 0.5
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if not self.sites:
            raise ConfigError("at least one site is required")
        if self.signal_strength <= 0:
            raise ConfigError(f"signal_strength must be positive, got {self.signal_strength}")
        if self.group_shift_scale < 0:
            raise ConfigError(f"group_shift_scale must be nonnegative, got {self.group_shift_scale}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be positive, got {self.noise_sigma}")


@dataclass
class Dataset:
    schema: AttributeSchema
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.schema == other.schema
            and self.samples == other.samples
        )

    def sites(self) -> list[int]:
        return sorted({s.site for s in self.samples})

    def site_samples(self, site: int) -> list[Sample]:
        return [s for s in self.samples if s.site == site]

    def group_counts(self) -> dict[int, int]:
        counts = {g: 0 for g in range(self.schema.num_groups)}
        for s in self.samples:
            counts[s.group] += 1
        return counts

    def group_proportions(self) -> np.ndarray:
        counts = self.group_counts()
        total = max(1, len(self.samples))
        return np.array([counts[g] / total for g in range(self.schema.num_groups)])


@dataclass(frozen=True)
class GroupGeometry:
    """The per-group direction vectors the generator samples features around.

    Normally drawn from the seed; tests and experiments may inject fixed
    directions (e.g. identical label directions across groups) to control
    the group structure exactly.
    """

    label_directions: np.ndarray  # (num_groups, feature_dim), unit rows
    offsets: np.ndarray  # (num_groups, feature_dim), unit rows


# How far each group's label direction may stray from the shared one.
# Groups in real cohorts share most of the label-relevant structure, so the
# per-group directions are correlated: u_g = unit(u_shared + spread * d_g).
GROUP_DIRECTION_SPREAD = 0.7


def draw_group_geometry(rng: Rng, num_groups: int, feature_dim: int) -> GroupGeometry:
    """Distinct but correlated label directions, independent unit offsets.

    Draw order (fixed): the shared direction, then each group's deviation
    d_g, then each group's offset c_g.
    """
    shared = random_unit_vector(rng, feature_dim)
    u_rows = []
    for _ in range(num_groups):
        d = random_unit_vector(rng, feature_dim)
        v = shared + GROUP_DIRECTION_SPREAD * d
        u_rows.append(v / np.linalg.norm(v))
    c = np.stack([random_unit_vector(rng, feature_dim) for _ in range(num_groups)])
    return GroupGeometry(label_directions=np.stack(u_rows), offsets=c)


def generate_synthetic(
    spec: SyntheticSpec,
    schema: AttributeSchema,
    geometry: GroupGeometry | None = None,
) -> Dataset:
    """Deterministically generate the multi-site dataset described by ``spec``."""
    num_groups = schema.num_groups
    for idx, site in enumerate(spec.sites):
        if len(site.group_proportions) != num_groups:
            raise ConfigError(
                f"sites[{idx}].group_proportions has {len(site.group_proportions)} "
                f"entries but the schema defines {num_groups} groups"
            )
    rng = Rng(derive_seed(spec.seed, "synthetic"))
    if geometry is None:
        geometry = draw_group_geometry(rng, num_groups, spec.feature_dim)
    samples: list[Sample] = []
    for site_idx, site in enumerate(spec.sites):
        group_counts = largest_remainder(site.group_proportions, site.n_samples)
        counter = 0
        for g, count in enumerate(group_counts):
            if count == 0:
                continue
            n_pos = largest_remainder([site.positive_rate, 1.0 - site.positive_rate], count)[0]
            for i in range(count):
                y = 1 if i < n_pos else 0
                noise = np.array(
                    [rng.normal() for _ in range(spec.feature_dim)], dtype=np.float64
                )
                x = (
                    (2 * y - 1) * spec.signal_strength * geometry.label_directions[g]
                    + spec.group_shift_scale * geometry.offsets[g]
                    + spec.noise_sigma * noise
                )
                label = y
                if site.label_noise > 0.0 and rng.uniform() < site.label_noise:
                    label = 1 - label
                samples.append(
                    Sample(
                        id=f"site{site_idx}-{counter:05d}",
                        site=site_idx,
                        group=g,
                        label=label,
                        features=x,
                    )
                )
                counter += 1
    return Dataset(schema=schema, samples=samples)


@dataclass
class SiteSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]

    def all_samples(self) -> list[Sample]:
        return self.train + self.val + self.test


def _allocate_cells(cell_sizes: list[int], site_targets: list[int], num_splits: int) -> list[list[int]]:
    """Per-cell split counts with exact site-level column sums.

    Starts from floor(size * ratio) in every cell, then assigns the missing
    units greedily by descending fractional remainder, constrained so each
    cell receives exactly its size and each split exactly its site target.
    """
    total = sum(cell_sizes)
    ratios = [t / total for t in site_targets] if total else [0.0] * num_splits
    alloc = [[0] * num_splits for _ in cell_sizes]
    remainders: list[tuple[float, int, int]] = []
    for ci, size in enumerate(cell_sizes):
        for j in range(num_splits):
            quota = size * ratios[j]
            alloc[ci][j] = int(np.floor(quota))
            remainders.append((quota - alloc[ci][j], ci, j))
    row_left = [cell_sizes[ci] - sum(alloc[ci]) for ci in range(len(cell_sizes))]
    col_left = [site_targets[j] - sum(alloc[ci][j] for ci in range(len(cell_sizes))) for j in range(num_splits)]
    remainders.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _, ci, j in remainders:
        if row_left[ci] > 0 and col_left[j] > 0:
            alloc[ci][j] += 1
            row_left[ci] -= 1
            col_left[j] -= 1
    # any residue left by the greedy pass (rare): pair deficits deterministically
    for ci in range(len(cell_sizes)):
        while row_left[ci] > 0:
            for j in range(num_splits):
                if col_left[j] > 0:
                    alloc[ci][j] += 1
                    row_left[ci] -= 1
                    col_left[j] -= 1
                    break
            else:
                raise AssertionError("split allocation failed to balance")
    return alloc


def split(
    dataset: Dataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> dict[int, SiteSplit]:
    """Per-site train/val/test partition, stratified by (group, label).

    Site-level counts follow largest-remainder rounding of the ratios, so
    e.g. 100 samples split 0.7/0.1/0.2 yield exactly 70/10/20. Within each
    site the (group, label) cells are spread across the three parts as
    proportionally as the site totals allow, with a seeded shuffle inside
    every cell. Partitions are disjoint and exhaustive.
    """
    if len(ratios) != 3:
        raise ConfigError(f"expected 3 split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    out: dict[int, SiteSplit] = {}
    for site in dataset.sites():
        members = dataset.site_samples(site)
        cells: dict[tuple[int, int], list[Sample]] = {}
        for s in members:
            cells.setdefault((s.group, s.label), []).append(s)
        keys = sorted(cells)
        for key in keys:
            rng = Rng(derive_seed(seed, "split", site, key[0], key[1]))
            rng.shuffle(cells[key])
        site_targets = largest_remainder(ratios, len(members))
        alloc = _allocate_cells([len(cells[k]) for k in keys], site_targets, 3)
        parts: tuple[list[Sample], list[Sample], list[Sample]] = ([], [], [])
        for ci, key in enumerate(keys):
            pos = 0
            for j in range(3):
                parts[j].extend(cells[key][pos : pos + alloc[ci][j]])
                pos += alloc[ci][j]
        out[site] = SiteSplit(train=parts[0], val=parts[1], test=parts[2])
    return out


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "type": "header",
            "attribute": dataset.schema.name,
            "groups": list(dataset.schema.groups),
            "feature_dim": int(dataset.samples[0].features.size) if dataset.samples else 0,
        }
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            record = {
                "id": s.id,
                "site": s.site,
                "group": s.group,
                "label": s.label,
                "features": [float(v) for v in s.features],
            }
            fh.write(json.dumps(record) + "\n")


def load_jsonl(path) -> Dataset:
    """Parse a dataset file, validating every record against the header."""

    def fail(line_no: int, why: str):
        raise DatasetFormatError(f"{path}:{line_no}: {why}")

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"invalid JSON ({exc.msg})")
    if not isinstance(header, dict) or header.get("type") != "header":
        fail(1, "first record must be the header ({'type': 'header', ...})")
    for key in ("attribute", "groups", "feature_dim"):
        if key not in header:
            fail(1, f"header is missing {key!r}")
    schema = AttributeSchema(name=header["attribute"], groups=tuple(header["groups"]))
    feature_dim = int(header["feature_dim"])
    samples: list[Sample] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(line_no, f"invalid JSON ({exc.msg})")
        for key in ("id", "site", "group", "label", "features"):
            if key not in rec:
                fail(line_no, f"record is missing {key!r}")
        group = rec["group"]
        if not isinstance(group, int) or not 0 <= group < schema.num_groups:
            fail(line_no, f"unknown group index {group!r} (schema has {schema.num_groups} groups)")
        if rec["label"] not in (0, 1):
            fail(line_no, f"label must be 0 or 1, got {rec['label']!r}")
        features = np.asarray(rec["features"], dtype=np.float64)
        if features.ndim != 1 or features.size != feature_dim:
            fail(
                line_no,
                f"features length {features.size} does not match header feature_dim {feature_dim}",
            )
        if not np.all(np.isfinite(features)):
            fail(line_no, "features contain non-finite values")
        samples.append(
            Sample(
                id=str(rec["id"]),
                site=int(rec["site"]),
                group=group,
                label=int(rec["label"]),
                features=features,
            )
        )
    return Dataset(schema=schema, samples=samples)
