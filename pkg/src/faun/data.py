"""Datasets, client partitioning, backdoor triggers and the server proxy split."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ANCHORS = ("bottom_right", "bottom_left", "top_left")


@dataclass(frozen=True)
class ExampleBatch:
    features: np.ndarray
    labels: np.ndarray
    image_shape: tuple[int, int] | None = None
    # position of each row in the source pool, for disjointness bookkeeping
    index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DataError("labels must have one entry per feature row")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != feats.shape[1]:
            raise DataError(f"image shape {self.image_shape} does not match width {feats.shape[1]}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.index is None:
            object.__setattr__(self, "index", np.arange(len(labels)))

    def __len__(self):
        return len(self.labels)

    def subset(self, rows) -> "ExampleBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return ExampleBatch(self.features[rows], self.labels[rows], self.image_shape, self.index[rows])

    @classmethod
    def concat(cls, batches) -> "ExampleBatch":
        batches = list(batches)
        return cls(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].image_shape,
            np.concatenate([b.index for b in batches]),
        )


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray
    num_clients: int
    mode: str = "iid"
    alpha: float | None = None

    def client_rows(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def shards(self, batch: ExampleBatch) -> list[ExampleBatch]:
        return [batch.subset(self.client_rows(c)) for c in range(self.num_clients)]


@dataclass(frozen=True)
class TriggerSpec:
    patch_rows: int = 3
    patch_cols: int = 3
    anchor: str = "bottom_right"
    patch_value: float = 1.0
    target_class: int = 0

    def __post_init__(self):
        if self.anchor not in ANCHORS:
            raise ConfigError(f"anchor must be one of {ANCHORS}", "trigger.anchor")
        if self.patch_rows < 1 or self.patch_cols < 1:
            raise ConfigError("patch must be at least 1x1", "trigger")
        if not 0.0 <= self.patch_value <= 1.0:
            raise ConfigError("patch_value must lie in [0, 1]", "trigger.patch_value")

    def pixel_mask(self, image_shape) -> np.ndarray:
        """Flat boolean mask of the patch pixels for an image of ``image_shape``."""
        if image_shape is None:
            raise ConfigError("trigger stamping needs image-shaped features", "trigger")
        h, w = image_shape
        if self.patch_rows > h or self.patch_cols > w:
            raise ConfigError(
                f"{self.patch_rows}x{self.patch_cols} patch does not fit a {h}x{w} image", "trigger"
            )
        mask = np.zeros((h, w), dtype=bool)
        rows = slice(0, self.patch_rows) if self.anchor == "top_left" else slice(h - self.patch_rows, h)
        cols = slice(w - self.patch_cols, w) if self.anchor == "bottom_right" else slice(0, self.patch_cols)
        mask[rows, cols] = True
        return mask.ravel()


@dataclass(frozen=True)
class ProxyDataset:
    batch: ExampleBatch

    @property
    def size(self) -> int:
        return len(self.batch)


def make_synthetic(num_classes, input_dim, n, class_separation, seed, *,
                   noise_std=1.0, image_shape=None, background=0.5) -> ExampleBatch:
    """Class-balanced isotropic Gaussian blobs.

    Class means sit about ``class_separation * noise_std`` apart. With
    ``image_shape`` the blobs are centred at ``background`` and clipped to
    [0, 1] so they can carry a pixel trigger.
    """
    if num_classes < 2 or input_dim < 1:
        raise ConfigError("need num_classes >= 2 and input_dim >= 1", "dataset")
    if n < num_classes:
        raise ConfigError("need at least one example per class", "dataset.n")
    if image_shape is not None and int(np.prod(image_shape)) != input_dim:
        raise ConfigError("image_shape must multiply to input_dim", "dataset.image_shape")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    center = 0.0 if image_shape is None else background
    means = center + directions * (class_separation * noise_std / np.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.normal(0.0, noise_std, size=(n, input_dim))
    if image_shape is not None:
        np.clip(features, 0.0, 1.0, out=features)
        image_shape = tuple(image_shape)
    return ExampleBatch(features, labels, image_shape)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic):
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    return raw, header, dims


def load_idx_images(images_path, labels_path, limit=None) -> ExampleBatch:
    """Read an IDX image/label pair (optionally gzip-compressed), pixels scaled to [0, 1]."""
    raw_x, off_x, (count_x, rows, cols) = _read_idx(images_path, IDX_IMAGES_MAGIC)
    raw_y, off_y, (count_y,) = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if count_x != count_y:
        raise ParseError(f"{count_x} images but {count_y} labels", offset=4)
    n = count_x if limit is None else min(int(limit), count_x)
    pixels = rows * cols
    need_x = off_x + count_x * pixels
    if len(raw_x) < need_x:
        raise ParseError(f"{images_path}: truncated pixel payload", offset=len(raw_x))
    if len(raw_y) < off_y + count_y:
        raise ParseError(f"{labels_path}: truncated label payload", offset=len(raw_y))
    x = np.frombuffer(raw_x, dtype=np.uint8, count=n * pixels, offset=off_x)
    y = np.frombuffer(raw_y, dtype=np.uint8, count=n, offset=off_y)
    return ExampleBatch(x.reshape(n, pixels) / 255.0, y.astype(np.int64), (rows, cols))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, compress=False):
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    opener = gzip.open if compress else open
    n, rows, cols = images.shape
    with opener(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with opener(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def partition(batch: ExampleBatch, num_clients, mode="iid", alpha=0.5, seed=0) -> PartitionPlan:
    """Assign every example to exactly one client.

    ``iid`` deals a random permutation into near-equal shards (sizes differ by
    at most one). ``dirichlet`` draws, for each class, client proportions from
    Dirichlet(alpha) and cuts the class accordingly; empty shards are then
    repaired by moving one example from the currently largest shard.
    """
    n = len(batch)
    if num_clients < 2:
        raise ConfigError("need at least 2 clients", "fl.num_clients")
    if num_clients > n:
        raise ConfigError(f"{num_clients} clients but only {n} examples", "fl.num_clients")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    if mode == "iid":
        for client, rows in enumerate(np.array_split(rng.permutation(n), num_clients)):
            assignment[rows] = client
    elif mode == "dirichlet":
        if not alpha > 0:
            raise ConfigError("dirichlet alpha must be > 0", "fl.alpha")
        for cls in np.unique(batch.labels):
            rows = rng.permutation(np.flatnonzero(batch.labels == cls))
            props = rng.dirichlet(np.full(num_clients, float(alpha)))
            cuts = np.round(np.cumsum(props)[:-1] * len(rows)).astype(np.int64)
            for client, part in enumerate(np.split(rows, cuts)):
                assignment[part] = client
        counts = np.bincount(assignment, minlength=num_clients)
        for client in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            row = np.flatnonzero(assignment == donor)[-1]
            assignment[row] = client
            counts[donor] -= 1
            counts[client] += 1
    else:
        raise ConfigError(f"unknown partition mode {mode!r}", "fl.partition")
    return PartitionPlan(assignment, num_clients, mode, alpha if mode == "dirichlet" else None)


def poison_count(ratio, n) -> int:
    # half-up rounding of ratio * n
    return int(np.floor(ratio * n + 0.5))


def poison_backdoor(batch: ExampleBatch, ratio, trigger: TriggerSpec, seed) -> ExampleBatch:
    """Stamp the trigger on ``round(ratio * n)`` random rows and relabel them to the target class."""
    if not 0 < ratio <= 1:
        raise ConfigError("poison ratio must lie in (0, 1]", "attack.poison_ratio")
    mask = trigger.pixel_mask(batch.image_shape)
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(len(batch), size=poison_count(ratio, len(batch)), replace=False))
    features = batch.features.copy()
    labels = batch.labels.copy()
    sub = features[rows]
    sub[:, mask] = trigger.patch_value
    features[rows] = sub
    labels[rows] = trigger.target_class
    return ExampleBatch(features, labels, batch.image_shape, batch.index)


def stamp_trigger_all(batch: ExampleBatch, trigger: TriggerSpec) -> ExampleBatch:
    mask = trigger.pixel_mask(batch.image_shape)
    features = batch.features.copy()
    features[:, mask] = trigger.patch_value
    return ExampleBatch(features, batch.labels, batch.image_shape, batch.index)


def _stratified_counts(labels, size):
    classes, counts = np.unique(labels, return_counts=True)
    quota = size * counts / counts.sum()
    take = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - take), kind="stable")
    take[order[: size - take.sum()]] += 1
    return classes, np.minimum(take, counts)


def split_proxy(batch: ExampleBatch, proxy_size, seed) -> tuple[ProxyDataset, ExampleBatch]:
    """Carve a class-stratified proxy set off ``batch``; returns ``(proxy, remainder)``."""
    if not 0 < proxy_size < len(batch):
        raise ConfigError(f"proxy_size must lie in (0, {len(batch)})", "dataset.proxy_size")
    rng = np.random.default_rng(seed)
    classes, take = _stratified_counts(batch.labels, proxy_size)
    chosen = [rng.choice(np.flatnonzero(batch.labels == c), size=k, replace=False)
              for c, k in zip(classes, take)]
    chosen = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(batch)), chosen)
    return ProxyDataset(batch.subset(chosen)), batch.subset(rest)


def holdout_split(batch: ExampleBatch, size, seed) -> tuple[ExampleBatch, ExampleBatch]:
    """Uniformly random split into ``(held_out, remainder)``."""
    if not 0 < size < len(batch):
        raise ConfigError(f"held-out size must lie in (0, {len(batch)})", "dataset.n_test")
    perm = np.random.default_rng(seed).permutation(len(batch))
    return batch.subset(np.sort(perm[:size])), batch.subset(np.sort(perm[size:]))
