"""Synthetic dataset generators, IDX/CSV ingestion, splits, and the weighted sampler."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SINGLE_LABEL = "single-label"
MULTI_LABEL = "multi-label"


class GenerationError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray          # n x d
    labels: np.ndarray            # (n,) class indices or n x C binary
    class_names: list[str]
    task: str = SINGLE_LABEL

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty n x d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        c = len(self.class_names)
        if self.task == SINGLE_LABEL:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError("single-label labels must be one index per row")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
                raise ValueError(f"label index outside [0, {c})")
        elif self.task == MULTI_LABEL:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.n, c):
                raise ValueError("multi-label labels must be an n x C matrix")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValueError("multi-label entries must be 0/1")
            self.labels = self.labels.astype(np.int8)
        else:
            raise ValueError(f"unknown task kind {self.task!r}")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.labels[idx],
                              list(self.class_names), self.task)

    def in_target(self, target_set) -> np.ndarray:
        """Boolean row mask: sample's class (or any present label) is in the set."""
        ts = sorted(target_set)
        if self.task == SINGLE_LABEL:
            return np.isin(self.labels, ts)
        return self.labels[:, ts].any(axis=1)


CONFUSION_PAIRS = "confusion-pairs"
BIAS_TRIPLETS = "bias-triplets"


@dataclass
class TargetSpec:
    """User-selected confusion pair(s) {a,b} or bias triplet(s) {a,b,c}.

    In a triplet, a is the positive target, b the negative target, c the anchor.
    """
    kind: str
    groups: list[tuple]

    def __post_init__(self):
        if self.kind not in (CONFUSION_PAIRS, BIAS_TRIPLETS):
            raise ValueError(f"unknown target kind {self.kind!r}")
        want = 2 if self.kind == CONFUSION_PAIRS else 3
        if not self.groups:
            raise ValueError("at least one pair/triplet is required")
        for g in self.groups:
            if len(g) != want or len(set(g)) != want:
                raise ValueError(f"each group needs {want} distinct classes, got {g}")
        self.groups = [tuple(int(i) for i in g) for g in self.groups]

    @property
    def target_set(self) -> set[int]:
        return {i for g in self.groups for i in g}

    def pairs(self) -> list[tuple[int, int]]:
        """Pairs whose error the repair targets; a triplet contributes (a,c), (b,c)."""
        if self.kind == CONFUSION_PAIRS:
            return list(self.groups)
        out = []
        for a, b, c in self.groups:
            out += [(a, c), (b, c)]
        return out

    @staticmethod
    def parse(text: str, class_names: list[str] | None = None) -> "TargetSpec":
        """Parse ``A:B[,A2:B2]`` pairs or ``A:B:C`` triplets, by index or name."""
        def resolve(token: str) -> int:
            token = token.strip()
            if class_names and token in class_names:
                return class_names.index(token)
            try:
                return int(token)
            except ValueError:
                raise ValueError(f"unknown class {token!r}") from None

        groups = []
        sizes = set()
        for part in text.split(","):
            ids = tuple(resolve(t) for t in part.split(":"))
            sizes.add(len(ids))
            groups.append(ids)
        if sizes == {2}:
            return TargetSpec(CONFUSION_PAIRS, groups)
        if sizes == {3}:
            return TargetSpec(BIAS_TRIPLETS, groups)
        raise ValueError(f"target spec {text!r} must be all pairs or all triplets")

    def __str__(self):
        return ",".join(":".join(str(i) for i in g) for g in self.groups)


@dataclass
class SamplerConfig:
    rho: float = 1.0
    epoch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0,1], got {self.rho}")


DEFAULT_TOY_MEANS = np.array([[0.0, 0.0], [2.2, 0.0], [1.1, 3.2]])
DEFAULT_TOY_COVS = np.array([np.eye(2) * 0.55] * 3)


def gen_toy2d(seed: int, n_per_class: int = 100, means=None, covariances=None) -> LabeledDataset:
    """Three Gaussian blobs; classes 0 and 1 overlap, class 2 sits apart."""
    means = DEFAULT_TOY_MEANS if means is None else np.asarray(means, dtype=float)
    covs = DEFAULT_TOY_COVS if covariances is None else np.asarray(covariances, dtype=float)
    for k, cov in enumerate(covs):
        if not np.allclose(cov, cov.T):
            raise GenerationError(f"covariance {k} is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise GenerationError(f"covariance {k} is not positive definite") from None
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for k in range(3):
        feats.append(rng.multivariate_normal(means[k], covs[k], size=n_per_class))
        labels.append(np.full(n_per_class, k))
    x = np.concatenate(feats)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    return LabeledDataset(x[order], y[order], ["class0", "class1", "class2"])


def gen_multilabel(seed: int, n: int, C: int, pair_cooccur: tuple, noise_sd: float = 0.3,
                   d: int = 16) -> LabeledDataset:
    """Multi-label set where the given pair co-occurs at a controlled rate.

    ``pair_cooccur`` is (a, b, rate) with rate = P(both | either). At least
    10% of samples carry a without b and 10% b without a; features are sums
    of per-class prototype vectors plus Gaussian noise.
    """
    a, b, rate = pair_cooccur
    a, b = int(a), int(b)
    if not 0.0 <= rate <= 1.0:
        raise GenerationError(f"co-occurrence rate must be in [0,1], got {rate}")
    if C < 3:
        raise GenerationError("need C >= 3 classes")
    min_only = int(np.ceil(0.1 * n))
    if rate < 1.0:
        # involved fraction t satisfies n_both = rate*t*n, each only-side (1-rate)*t*n/2
        t = min(1.0, 0.3 / (1.0 - rate))
        n_only = int(round((1.0 - rate) * t * n / 2))
        n_both = int(round(rate * t * n))
    else:
        n_only, n_both = 0, n
    if n_only < min_only:
        raise GenerationError(
            f"cannot guarantee >=10% single-presence samples at rate {rate} with n={n}"
        )
    if n_both + 2 * n_only > n:
        raise GenerationError(f"infeasible pair counts for n={n}")

    rng = np.random.default_rng(seed)
    labels = np.zeros((n, C), dtype=np.int8)
    # background classes appear independently
    others = [k for k in range(C) if k not in (a, b)]
    labels[:, others] = (rng.random((n, len(others))) < 0.3).astype(np.int8)
    # ensure no empty label sets among background-only rows handled below
    kinds = np.array([2] * n_both + [0] * n_only + [1] * n_only
                     + [3] * (n - n_both - 2 * n_only))
    rng.shuffle(kinds)
    labels[kinds == 2, a] = 1
    labels[kinds == 2, b] = 1
    labels[kinds == 0, a] = 1
    labels[kinds == 1, b] = 1
    empty = labels.sum(axis=1) == 0
    if np.any(empty):
        fill = rng.integers(0, len(others), size=int(empty.sum()))
        labels[np.nonzero(empty)[0], np.array(others)[fill]] = 1

    protos = rng.normal(0.0, 1.0, size=(C, d))
    feats = labels.astype(np.float64) @ protos + rng.normal(0.0, noise_sd, size=(n, d))
    names = [f"class{k}" for k in range(C)]
    return LabeledDataset(feats, labels, names, task=MULTI_LABEL)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse IDX image/label files; pixels are scaled to [0,1] and flattened."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(fh.read(count * rows * cols), dtype=np.uint8)
        if pixels.size != count * rows * cols:
            raise FormatError("images file truncated")
    with open(labels_path, "rb") as fh:
        magic, lcount = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw_labels = np.frombuffer(fh.read(lcount), dtype=np.uint8)
        if raw_labels.size != lcount:
            raise FormatError("labels file truncated")
    if count != lcount:
        raise FormatError(f"image count {count} != label count {lcount}")
    feats = pixels.reshape(count, rows * cols).astype(np.float32) / 255.0
    nclasses = int(raw_labels.max()) + 1 if lcount else 1
    names = [str(k) for k in range(nclasses)]
    return LabeledDataset(feats, raw_labels.astype(np.int64), names)


def write_idx(ds: LabeledDataset, images_path, labels_path, rows: int, cols: int) -> None:
    if rows * cols != ds.d:
        raise ValueError(f"rows*cols must equal feature dim {ds.d}")
    pixels = np.clip(np.round(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, ds.n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, ds.n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def save_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if ds.task == SINGLE_LABEL:
            header = [f"f{i}" for i in range(ds.d)] + ["label"]
            fh.write(",".join(header) + "\n")
            for x, y in zip(ds.features, ds.labels):
                fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")
        else:
            header = [f"f{i}" for i in range(ds.d)] + [f"l{i}" for i in range(ds.num_classes)]
            fh.write(",".join(header) + "\n")
            for x, y in zip(ds.features, ds.labels):
                fh.write(",".join(repr(float(v)) for v in x) + ","
                         + ",".join(str(int(v)) for v in y) + "\n")


def load_csv(path, class_names: list[str] | None = None) -> LabeledDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    d = sum(1 for h in header if h.startswith("f"))
    label_cols = header[d:]
    data = np.array([[float(v) for v in r[:d]] for r in rows], dtype=np.float32)
    if label_cols == ["label"]:
        labels = np.array([int(r[d]) for r in rows], dtype=np.int64)
        c = int(labels.max()) + 1 if len(labels) else 1
        names = class_names or [f"class{k}" for k in range(c)]
        return LabeledDataset(data, labels, names)
    labels = np.array([[int(v) for v in r[d:]] for r in rows], dtype=np.int8)
    names = class_names or [f"class{k}" for k in range(labels.shape[1])]
    return LabeledDataset(data, labels, names, task=MULTI_LABEL)


def weighted_sample_indices(ds: LabeledDataset, target: TargetSpec,
                            cfg: SamplerConfig) -> np.ndarray:
    """Sample row indices with replacement; non-target classes weigh rho."""
    sampler = WeightedSampler(ds, target, cfg)
    return sampler.draw(cfg.epoch_size if cfg.epoch_size is not None else ds.n)


class WeightedSampler:
    """Stateful with-replacement sampler over one dataset; owns its RNG."""

    def __init__(self, ds: LabeledDataset, target: TargetSpec | None, cfg: SamplerConfig):
        mask = ds.in_target(target.target_set) if target is not None else np.ones(ds.n, bool)
        if target is not None and not mask.any():
            raise ValueError("no sample belongs to the target classes")
        w = np.where(mask, 1.0, cfg.rho)
        total = w.sum()
        if total <= 0:
            raise ValueError("sampling weights sum to zero")
        self.probs = w / total
        self.rng = np.random.default_rng(cfg.seed)
        self.n = ds.n

    def draw(self, count: int) -> np.ndarray:
        return self.rng.choice(self.n, size=count, replace=True, p=self.probs)


def target_only_sampler(ds: LabeledDataset, target: TargetSpec, seed: int) -> WeightedSampler:
    """Uniform sampler restricted to target-class samples (rho=0)."""
    return WeightedSampler(ds, target, SamplerConfig(rho=0.0, seed=seed))


def dataset_split(ds: LabeledDataset, test_fraction: float, seed: int):
    """Deterministic split; stratified per class for single-label data."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    if ds.task == SINGLE_LABEL:
        train_idx, test_idx = [], []
        for k in range(ds.num_classes):
            rows = np.nonzero(ds.labels == k)[0]
            if 0 < len(rows) < 2:
                raise ValueError(f"class {k} has fewer than 2 samples; cannot stratify")
            rows = rows[rng.permutation(len(rows))]
            cut = int(round(len(rows) * test_fraction))
            test_idx.append(rows[:cut])
            train_idx.append(rows[cut:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        order = rng.permutation(ds.n)
        cut = int(round(ds.n * test_fraction))
        test_idx = np.sort(order[:cut])
        train_idx = np.sort(order[cut:])
    return ds.subset(train_idx), ds.subset(test_idx)
