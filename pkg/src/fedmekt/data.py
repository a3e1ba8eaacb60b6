"""Multimodal windowed datasets: CSV ingestion, synthetic generation,
client partitioning, proxy/labeled/test splits and normalisation.

Datasets carry an ``owner`` tag. Reads of a client-owned dataset from any
other scope are recorded in :data:`ACCESS_LOG`, which is how the privacy
boundary of the federation is checked.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

_scope: contextvars.ContextVar[str] = contextvars.ContextVar("data_scope", default="orchestrator")


@contextlib.contextmanager
def scope(name: str):
    """Run the block as ``name`` (e.g. ``"server"`` or ``"client:3"``)."""
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> str:
    return _scope.get()


@dataclass
class AccessLog:
    reads: list[tuple[str, str]] = field(default_factory=list)

    def record(self, owner: str, reader: str) -> None:
        self.reads.append((owner, reader))

    def private_reads_from(self, reader: str) -> int:
        return sum(1 for owner, r in self.reads if r == reader and owner.startswith("client:"))

    def clear(self) -> None:
        self.reads.clear()


ACCESS_LOG = AccessLog()


class DataError(ValueError):
    pass


class MultimodalDataset:
    """``x[m]`` is ``(n, T, d_m)``; ``labels`` is ``(n,)`` or ``None``."""

    def __init__(
        self,
        x: Mapping[str, np.ndarray],
        labels: np.ndarray | None,
        n_classes: int,
        names: Mapping[str, str] | None = None,
        owner: str | None = None,
        groups: np.ndarray | None = None,
    ) -> None:
        x = {m: np.asarray(v, dtype=np.float64) for m, v in x.items()}
        sizes = {v.shape[0] for v in x.values()}
        steps = {v.shape[1] for v in x.values()}
        if len(sizes) > 1 or len(steps) > 1:
            raise DataError(f"modalities disagree on sample count or window length: {[v.shape for v in x.values()]}")
        self._x = x
        self.n = sizes.pop() if sizes else 0
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.n,):
                raise DataError(f"labels shape {labels.shape} != ({self.n},)")
            if self.n and (labels.min() < 0 or labels.max() >= n_classes):
                raise DataError(f"labels must lie in [0, {n_classes})")
        self._labels = labels
        self.n_classes = n_classes
        self.names = dict(names or {m: m for m in x})
        self.owner = owner
        self.groups = None if groups is None else np.asarray(groups)

    def _touch(self) -> None:
        if self.owner is not None and self.owner != current_scope():
            ACCESS_LOG.record(self.owner, current_scope())

    @property
    def x(self) -> dict[str, np.ndarray]:
        self._touch()
        return self._x

    @property
    def labels(self) -> np.ndarray | None:
        self._touch()
        return self._labels

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted(self._x))

    @property
    def seq_len(self) -> int:
        return next(iter(self._x.values())).shape[1]

    def dims(self) -> dict[str, int]:
        return {m: v.shape[2] for m, v in self._x.items()}

    def __len__(self) -> int:
        return self.n

    def batch(self, idx) -> dict[str, np.ndarray]:
        self._touch()
        return {m: v[idx] for m, v in self._x.items()}

    def subset(
        self,
        idx: Sequence[int],
        owner: str | None = None,
        modalities: Sequence[str] | None = None,
        keep_labels: bool = True,
    ) -> MultimodalDataset:
        idx = np.asarray(idx, dtype=np.int64)
        mods = modalities or tuple(self._x)
        return MultimodalDataset(
            {m: self._x[m][idx] for m in mods},
            self._labels[idx] if (keep_labels and self._labels is not None) else None,
            self.n_classes,
            {m: self.names.get(m, m) for m in mods},
            owner=owner,
            groups=None if self.groups is None else self.groups[idx],
        )


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_schema(schema) -> dict:
    if isinstance(schema, (str, Path)):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    if "modalities" not in schema or "label" not in schema:
        raise DataError("schema needs 'modalities' and 'label' entries")
    return schema


def load_csv(path, schema, seq_len: int = 10, stride: int = 10) -> MultimodalDataset:
    """Window a one-timestep-per-row CSV into a :class:`MultimodalDataset`.

    ``schema`` (dict or JSON path) maps ``modalities`` -> ``{"A": [cols], "B": [cols]}``
    and names the integer ``label`` column; an optional ``group`` column
    (participant/run) keeps windows from straddling groups.
    """
    schema = _read_schema(schema)
    mods: dict[str, list[str]] = schema["modalities"]
    label_col = schema["label"]
    group_col = schema.get("group")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = [c for cols in mods.values() for c in cols] + [label_col] + ([group_col] if group_col else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in wanted}
        feats = {m: [] for m in mods}
        labels, groups = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            for m, cols in mods.items():
                vals = []
                for c in cols:
                    cell = row[pos[c]] if pos[c] < len(row) else ""
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: column {c!r} non-numeric value {cell!r}") from None
                feats[m].append(vals)
            cell = row[pos[label_col]]
            try:
                labels.append(int(float(cell)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {label_col!r} non-numeric value {cell!r}") from None
            if group_col:
                groups.append(row[pos[group_col]])
    if not labels:
        raise DataError(f"{path}: no data rows")
    labels_arr = np.asarray(labels)
    arrays = {m: np.asarray(v) for m, v in feats.items()}
    group_arr = np.asarray(groups) if group_col else np.zeros(len(labels), dtype=int).astype(str)

    # contiguous runs of a group are windowed independently
    starts: list[int] = []
    run_start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or group_arr[i] != group_arr[run_start]:
            for s in range(run_start, i - seq_len + 1, stride):
                starts.append(s)
            run_start = i
    if not starts:
        raise DataError(f"{path}: fewer than {seq_len} rows, no complete window")
    starts_arr = np.asarray(starts)
    win = starts_arr[:, None] + np.arange(seq_len)
    x = {m: a[win] for m, a in arrays.items()}
    win_labels = np.array([_majority(labels_arr[w]) for w in win])
    n_classes = int(schema.get("n_classes", win_labels.max() + 1))
    return MultimodalDataset(
        x, win_labels, n_classes, schema.get("names"), groups=group_arr[starts_arr] if group_col else None
    )


def _majority(labels: np.ndarray) -> int:
    counts = Counter(labels.tolist())
    top = max(counts.values())
    return min(k for k, v in counts.items() if v == top)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(
    n_classes: int,
    d_a: int,
    d_b: int,
    n: int,
    seq_len: int = 10,
    sigma: float = 0.3,
    seed: int = 0,
    latent_dim: int = 4,
    separation: float = 0.25,
) -> MultimodalDataset:
    """Two modalities driven by one class latent: ``x_M[t] = M_M u_c + noise``.

    ``u_c`` is drawn per class with scale ``separation``; ``M_A`` and ``M_B``
    are fixed random linear maps, so the modalities share their structure.
    """
    if min(n_classes, d_a, d_b, n, seq_len, latent_dim) <= 0:
        raise DataError("all synthetic dimensions must be positive")
    rng = np.random.default_rng(seed)
    latents = rng.normal(0.0, separation, size=(n_classes, latent_dim))
    maps = {
        "A": rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(d_a, latent_dim)),
        "B": rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(d_b, latent_dim)),
    }
    labels = rng.integers(0, n_classes, size=n)
    x = {}
    for m, mat in maps.items():
        mean = latents[labels] @ mat.T
        noise = rng.normal(0.0, 1.0, size=(n, seq_len, mat.shape[0])) * sigma
        x[m] = mean[:, None, :] + noise
    return MultimodalDataset(x, labels, n_classes)


# ---------------------------------------------------------------------------
# partitioning and splits


@dataclass
class PartitionPlan:
    indices: list[np.ndarray]
    modalities: list[tuple[str, ...]]
    mode: str

    def __len__(self) -> int:
        return len(self.indices)


def mixed_layout(k: int, counts: tuple[int, int, int] | None = None) -> list[tuple[str, ...]]:
    """Client modality sets: multimodal first, then unimodal A, then unimodal B."""
    if counts is None:
        base = k // 3
        counts = (k - 2 * base, base, base)
    if sum(counts) != k:
        raise DataError(f"mixed counts {counts} do not sum to K={k}")
    return [("A", "B")] * counts[0] + [("A",)] * counts[1] + [("B",)] * counts[2]


def partition(
    labels_or_n,
    k: int,
    mode: str = "multimodal",
    seed: int = 0,
    dirichlet: float | None = None,
    mixed_counts: tuple[int, int, int] | None = None,
) -> PartitionPlan:
    """Disjoint client shards over sample indices.

    Without ``dirichlet`` shards are a shuffled near-equal split. With it,
    each class is spread over clients by a Dirichlet(``dirichlet``) draw
    (label skew); every client still receives at least one sample.
    """
    if isinstance(labels_or_n, (int, np.integer)):
        n, labels = int(labels_or_n), None
    else:
        labels = np.asarray(labels_or_n)
        n = len(labels)
    if k <= 0 or k > n:
        raise DataError(f"cannot split {n} samples over K={k} clients")
    if mode not in ("multimodal", "mixed"):
        raise DataError(f"unknown partition mode {mode!r}")
    rng = np.random.default_rng(seed)
    if dirichlet is None or labels is None:
        shards = [np.sort(s) for s in np.array_split(rng.permutation(n), k)]
    else:
        shards = dirichlet_shards(labels, k, dirichlet, rng)
    mods = [("A", "B")] * k if mode == "multimodal" else mixed_layout(k, mixed_counts)
    return PartitionPlan(shards, mods, mode)


def dirichlet_shards(labels: np.ndarray, k: int, concentration: float, rng: np.random.Generator) -> list[np.ndarray]:
    buckets: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(k, concentration))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    # donate from the largest shard so no client is empty
    for client in range(k):
        if not buckets[client]:
            donor = max(range(k), key=lambda j: len(buckets[j]))
            buckets[client].append(buckets[donor].pop())
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


@dataclass
class Splits:
    train: MultimodalDataset
    proxy: MultimodalDataset
    labeled: MultimodalDataset
    test: MultimodalDataset
    index: dict[str, np.ndarray]


def _group_holdout(groups: np.ndarray, fraction: float, pool: np.ndarray, rng) -> np.ndarray:
    if fraction == 0:
        return np.empty(0, dtype=np.int64)
    uniq = rng.permutation(np.unique(groups[pool]))
    target = fraction * len(groups)
    taken: list[int] = []
    for g in uniq:
        if len(taken) >= target:
            break
        taken.extend(pool[groups[pool] == g].tolist())
    return np.asarray(taken, dtype=np.int64)


def make_splits(
    dataset: MultimodalDataset,
    proxy_fraction: float,
    labeled_fraction: float,
    test_fraction: float,
    seed: int = 0,
    proxy_subsample: float = 1.0,
) -> Splits:
    """Disjoint train / proxy / labeled / test splits.

    Proxy and test are held out by whole groups when the dataset carries
    group ids, otherwise at random. The labeled set is drawn from what remains
    and removed from train. Proxy labels are dropped; ``proxy_subsample`` keeps
    that fraction of the proxy split.
    """
    fr = (proxy_fraction, labeled_fraction, test_fraction)
    if any(f < 0 or f > 1 for f in fr) or sum(fr) > 1 + 1e-12:
        raise DataError(f"invalid split fractions {fr}")
    if not 0 < proxy_subsample <= 1:
        raise DataError("proxy_subsample must lie in (0, 1]")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if dataset.groups is not None:
        pool = np.arange(n)
        test_idx = _group_holdout(dataset.groups, test_fraction, pool, rng)
        pool = np.setdiff1d(pool, test_idx)
        proxy_idx = _group_holdout(dataset.groups, proxy_fraction, pool, rng)
        pool = rng.permutation(np.setdiff1d(pool, proxy_idx))
    else:
        perm = rng.permutation(n)
        n_test, n_proxy = int(round(test_fraction * n)), int(round(proxy_fraction * n))
        test_idx, proxy_idx = perm[:n_test], perm[n_test : n_test + n_proxy]
        pool = perm[n_test + n_proxy :]
    n_lab = int(round(labeled_fraction * n))
    labeled_idx, train_idx = pool[:n_lab], pool[n_lab:]
    if proxy_subsample < 1.0:
        keep = max(1, int(round(proxy_subsample * len(proxy_idx))))
        proxy_idx = proxy_idx[:keep]
    index = {
        "train": np.sort(train_idx),
        "proxy": np.sort(proxy_idx),
        "labeled": np.sort(labeled_idx),
        "test": np.sort(test_idx),
    }
    return Splits(
        train=dataset.subset(index["train"]),
        proxy=dataset.subset(index["proxy"], owner="shared:proxy", keep_labels=False),
        labeled=dataset.subset(index["labeled"]),
        test=dataset.subset(index["test"]),
        index=index,
    )


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]


def normalize(dataset: MultimodalDataset, stats: NormStats | None = None) -> tuple[MultimodalDataset, NormStats]:
    """Per-feature z-score; pass the train split's ``stats`` for other splits."""
    x = dataset.x
    if stats is None:
        mean, std = {}, {}
        for m, v in x.items():
            flat = v.reshape(-1, v.shape[-1])
            mean[m] = flat.mean(axis=0)
            sd = flat.std(axis=0)
            if np.any(sd == 0):
                log.warning("modality %s: zero-variance features %s, variance clamped to 1", m, np.flatnonzero(sd == 0).tolist())
                sd = np.where(sd == 0, 1.0, sd)
            std[m] = sd
        stats = NormStats(mean, std)
    out = {m: (v - stats.mean[m]) / stats.std[m] for m, v in x.items()}
    return (
        MultimodalDataset(out, dataset.labels, dataset.n_classes, dataset.names, dataset.owner, dataset.groups),
        stats,
    )


def denormalize(dataset: MultimodalDataset, stats: NormStats) -> MultimodalDataset:
    out = {m: v * stats.std[m] + stats.mean[m] for m, v in dataset.x.items()}
    return MultimodalDataset(out, dataset.labels, dataset.n_classes, dataset.names, dataset.owner, dataset.groups)
