"""Synthetic rotated-cluster domains, labeled pools, and CSV embedding I/O."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import make_rng

STREAM_DOMAIN = 11
STREAM_SPLIT = 12
STREAM_POOL = 13


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    rotation: float = 0.0
    scale: float = 1.0
    shift: tuple[float, ...] = ()
    noise_std: float = 0.3

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass(frozen=True)
class DatasetConfig:
    num_domains: int = 4
    num_classes: int = 4
    samples_per_domain: int = 500
    input_dim: int = 2
    class_radius: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be >= 1")
        if self.class_radius <= 0:
            raise ValueError("class_radius must be positive")


@dataclass
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    domain: int = -1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n,) or self.labeled_mask.shape != (n,):
            raise ValueError(
                f"inconsistent dataset shapes: features {self.features.shape}, "
                f"labels {self.labels.shape}, mask {self.labeled_mask.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled_mask)

    def subset(self, idx) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ClientDataset(
            self.features[idx], self.labels[idx], self.labeled_mask[idx], self.domain
        )

    def copy(self) -> "ClientDataset":
        return self.subset(np.arange(len(self)))


@dataclass
class FederationSplit:
    sources: list[ClientDataset]
    target: ClientDataset
    held_out_domain: int
    validation: list[ClientDataset] = field(default_factory=list)

    @property
    def source_domains(self) -> list[int]:
        return [s.domain for s in self.sources]


def class_means(config: DatasetConfig) -> np.ndarray:
    c = np.arange(config.num_classes)
    angles = 2.0 * math.pi * c / config.num_classes
    means = np.zeros((config.num_classes, config.input_dim))
    means[:, 0] = config.class_radius * np.cos(angles)
    means[:, 1] = config.class_radius * np.sin(angles)
    return means


def _balanced_labels(n: int, num_classes: int) -> np.ndarray:
    # classes in blocks; the remainder goes to the last class
    per = n // num_classes
    labels = np.repeat(np.arange(num_classes), per)
    return np.concatenate([labels, np.full(n - labels.size, num_classes - 1)])


def generate_domain(spec: DomainSpec, config: DatasetConfig, rng: np.random.Generator) -> ClientDataset:
    n, d = config.samples_per_domain, config.input_dim
    labels = _balanced_labels(n, config.num_classes)
    points = class_means(config)[labels] + spec.noise_std * rng.standard_normal((n, d))
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rotated = points.copy()
    rotated[:, 0] = c * points[:, 0] - s * points[:, 1]
    rotated[:, 1] = s * points[:, 0] + c * points[:, 1]
    shift = np.zeros(d)
    if spec.shift:
        if len(spec.shift) != d:
            raise ValueError(f"shift has length {len(spec.shift)}, expected {d}")
        shift = np.asarray(spec.shift, dtype=np.float64)
    features = spec.scale * rotated + shift
    return ClientDataset(features, labels, np.ones(n, dtype=bool))


def rotated_domain_specs(
    num_domains: int, gap: float, noise_std: float, input_dim: int | None = None
) -> list[DomainSpec]:
    """Domains ``d = 0..D-1`` rotated by ``d * gap``, otherwise identical."""
    shift = tuple([0.0] * input_dim) if input_dim else ()
    return [DomainSpec(rotation=d * gap, noise_std=noise_std, shift=shift) for d in range(num_domains)]


def split_validation(
    dataset: ClientDataset, fraction: float, rng: np.random.Generator
) -> tuple[ClientDataset, ClientDataset]:
    """Shuffle, then hold out the last ``fraction`` of rows for validation."""
    n = len(dataset)
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    n_train = n - n_val
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def make_federation(
    config: DatasetConfig,
    domain_specs: list[DomainSpec],
    target_index: int,
    val_fraction: float = 0.1,
) -> FederationSplit:
    if len(domain_specs) != config.num_domains:
        raise ValueError(f"expected {config.num_domains} domain specs, got {len(domain_specs)}")
    if not 0 <= target_index < config.num_domains:
        raise ValueError(f"target_index {target_index} out of range [0, {config.num_domains})")
    domains = []
    for d, spec in enumerate(domain_specs):
        ds = generate_domain(spec, config, make_rng(config.seed, STREAM_DOMAIN, d))
        ds.domain = d
        domains.append(ds)
    sources, validation = [], []
    for d, ds in enumerate(domains):
        if d == target_index:
            continue
        train, val = split_validation(ds, val_fraction, make_rng(config.seed, STREAM_SPLIT, d))
        sources.append(train)
        validation.append(val)
    target = domains[target_index]
    target.labeled_mask[:] = False
    return FederationSplit(sources, target, target_index, validation)


def init_labeled_pool(dataset: ClientDataset, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = len(dataset)
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    dataset.labeled_mask = mask
    return mask


# -- CSV embeddings ---------------------------------------------------------

def parse_csv_embeddings(text: str) -> ClientDataset:
    labels, rows = [], []
    width = None
    for lineno, line in enumerate(io.StringIO(text, newline=None), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        try:
            label = int(fields[0])
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-numeric field ({exc})") from None
        if label < 0:
            raise ParseError(f"line {lineno}: negative label {label}")
        if width is None:
            width = len(values)
            if width == 0:
                raise ParseError(f"line {lineno}: no feature columns")
        elif len(values) != width:
            raise ParseError(f"line {lineno}: expected {width} features, got {len(values)}")
        labels.append(label)
        rows.append(values)
    if not rows:
        raise ParseError("line 1: empty file")
    return ClientDataset(np.array(rows), np.array(labels), np.ones(len(rows), dtype=bool))


def load_csv_embeddings(path) -> ClientDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc
    try:
        return parse_csv_embeddings(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_csv_embeddings(dataset: ClientDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([int(label), *(repr(float(v)) for v in row)])
