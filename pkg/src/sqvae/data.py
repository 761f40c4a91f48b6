"""Datasets: IDX (MNIST) files, synthetic continuous/categorical generators,
fixed splits, seeded batch iteration and per-purpose random streams."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


class DataFormatError(ValueError):
    """Malformed input file."""


# ---------------------------------------------------------------------------
# random streams

STREAMS = {"init": 1, "shuffle": 2, "gumbel": 3, "reset": 4, "data": 5, "noise": 6}


def make_rng(seed: int, stream: str, sub: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream id, sub-stream).

    Each consumer owns a separate key, so adding one never shifts another's
    draws.  ``sub`` separates e.g. shuffles of different epochs.
    """
    if seed < 0 or sub < 0:
        raise ShapeError("seed and sub-stream must be >= 0")
    key = np.array([seed, (STREAMS[stream] << 32) | sub], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    kind: str  # "continuous" | "categorical"
    samples: np.ndarray  # (N, D) float64 in [0, 1] or int64 classes
    C_all: int = 0
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    labels: np.ndarray | None = None
    side: int | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ShapeError(f"unknown dataset kind {self.kind!r}")
        if self.samples.ndim != 2:
            raise ShapeError("samples must be an (N, D) array")
        if self.kind == "continuous":
            if self.samples.size and (self.samples.min() < 0 or self.samples.max() > 1):
                raise ShapeError("continuous samples must lie in [0, 1]")
        else:
            if self.C_all < 2:
                raise ShapeError("categorical data needs C_all >= 2")
            if self.samples.size and (self.samples.min() < 0 or self.samples.max() >= self.C_all):
                raise ShapeError(f"class values must lie in [0, {self.C_all})")
        if not self.splits:
            self.splits = {"train": np.arange(self.N)}
        seen = np.concatenate(list(self.splits.values()))
        if len(seen) != self.N or not np.array_equal(np.sort(seen), np.arange(self.N)):
            raise ShapeError("splits must be disjoint and cover every index")

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def D(self) -> int:
        return self.samples.shape[1]

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ShapeError(f"dataset has no split {name!r}")
        return self.samples[self.splits[name]]


def tail_splits(n: int, val: int, test: int) -> dict[str, np.ndarray]:
    """Leading indices train, then ``val`` then ``test`` at the end."""
    if val < 0 or test < 0 or val + test >= n:
        raise ShapeError(f"cannot carve val={val}, test={test} out of {n} samples")
    idx = np.arange(n)
    cut1, cut2 = n - val - test, n - test
    out = {"train": idx[:cut1], "val": idx[cut1:cut2]}
    if test:
        out["test"] = idx[cut2:]
    return out


def default_splits(n: int) -> dict[str, np.ndarray]:
    """80 / 10 / 10 by position (last 20% held out)."""
    tenth = n // 10
    if tenth < 1:
        raise ShapeError("need at least 10 samples for a train/val/test split")
    return tail_splits(n, tenth, tenth)


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("=").str[1:]: code for code, dt in _IDX_TYPES.items()}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{source}: truncated header at offset 0")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        magic = int.from_bytes(raw[:4], "big")
        raise DataFormatError(f"{source}: bad IDX magic 0x{magic:08x} at offset 0")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{source}: truncated dimension list at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    need = head + count * dtype.itemsize
    if len(raw) < need:
        raise DataFormatError(
            f"{source}: truncated payload at offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise DataFormatError(f"{source}: trailing bytes at offset {need}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=head)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    """IDX file (optionally gzip-compressed) as a native-endian array."""
    return parse_idx(_read_bytes(path), os.fspath(path))


def write_idx(path, array) -> None:
    """Big-endian IDX encoding of ``array``; gzip when the name ends in .gz."""
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("=").str[1:])
    if code is None:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX encoding")
    if arr.ndim > 255:
        raise DataFormatError("too many dimensions for IDX")
    out = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype=_IDX_TYPES[code]).tobytes()
    if os.fspath(path).endswith(".gz"):
        out = gzip.compress(out, mtime=0)
    with open(path, "wb") as fh:
        fh.write(out)


MNIST_VAL = 10_000


def load_mnist_idx(images_path, labels_path=None, holdout: str = "val",
                   limit: int | None = None) -> Dataset:
    """MNIST images scaled by 1/255 to (N, 784) float64.

    ``holdout="val"`` (training file): the last 10,000 samples become the
    validation split, or the last 10% when fewer than 20,000 are loaded.
    ``holdout="test"``: every sample goes to the test split.
    """
    images = read_idx(images_path)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataFormatError(f"{images_path}: expected an unsigned-byte N x rows x cols file")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise DataFormatError(f"{labels_path}: label count does not match images")
        labels = labels.astype(np.int64)
    if limit is not None:
        images = images[:limit]
        labels = None if labels is None else labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    n = x.shape[0]
    if holdout == "test":
        splits = {"test": np.arange(n)}
    elif holdout == "val":
        val = MNIST_VAL if n >= 2 * MNIST_VAL else (max(1, n // 10) if n >= 2 else 0)
        splits = tail_splits(n, val, 0)
    else:
        raise ShapeError(f"unknown holdout {holdout!r}")
    return Dataset("continuous", x, splits=splits, labels=labels, side=images.shape[1])


def merge_test(train: Dataset, test: Dataset) -> Dataset:
    """Append a separate test file to a train/val dataset."""
    if train.kind != test.kind or train.D != test.D:
        raise ShapeError("train and test datasets are incompatible")
    n = train.N
    splits = dict(train.splits)
    splits["test"] = n + np.arange(test.N)
    labels = None
    if train.labels is not None and test.labels is not None:
        labels = np.concatenate([train.labels, test.labels])
    return Dataset(train.kind, np.concatenate([train.samples, test.samples]), train.C_all,
                   splits, labels, train.side)


# ---------------------------------------------------------------------------
# synthetic generators


def synth_continuous(n: int, side: int, seed: int) -> Dataset:
    """1-3 axis-aligned Gaussian blobs per image, summed and clamped to [0, 1]."""
    if n < 1 or side < 4:
        raise ShapeError("need n >= 1 and side >= 4")
    rng = make_rng(seed, "data", 0)
    coords = np.arange(side, dtype=np.float64)
    out = np.zeros((n, side, side))
    for i in range(n):
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.0, side - 1.0, size=2)
            sy, sx = rng.uniform(side / 12.0, side / 4.0, size=2)
            amp = rng.uniform(0.5, 1.0)
            gy = np.exp(-0.5 * ((coords - cy) / sy) ** 2)
            gx = np.exp(-0.5 * ((coords - cx) / sx) ** 2)
            out[i] += amp * np.outer(gy, gx)
    np.clip(out, 0.0, 1.0, out=out)
    x = out.reshape(n, side * side)
    splits = default_splits(n) if n >= 10 else None
    return Dataset("continuous", x, splits=splits or {}, side=side)


def voronoi_map(side: int, L: int, rng: np.random.Generator) -> np.ndarray:
    sites = rng.uniform(0.0, side, size=(L, 2))
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def synth_categorical(n: int, side: int, L: int, seed: int) -> Dataset:
    """Voronoi label maps: L random sites, each pixel takes its nearest site's label."""
    if not 2 <= L <= 256:
        raise ShapeError("need 2 <= L <= 256 classes")
    if n < 1 or side < 4:
        raise ShapeError("need n >= 1 and side >= 4")
    rng = make_rng(seed, "data", 1)
    x = np.stack([voronoi_map(side, L, rng).reshape(-1) for _ in range(n)]).astype(np.int64)
    splits = default_splits(n) if n >= 10 else None
    return Dataset("categorical", x, C_all=L, splits=splits or {}, side=side)


def build_dataset(desc: dict) -> Dataset:
    """Dataset from a config mapping such as
    ``{"kind": "synth_continuous", "n": 2500, "side": 16, "seed": 0}``."""
    desc = dict(desc)
    kind = desc.pop("kind", None)
    allowed = {
        "synth_continuous": {"n", "side", "seed"},
        "synth_categorical": {"n", "side", "L", "seed"},
        "mnist": {"dir", "limit"},
    }
    if kind not in allowed:
        raise ShapeError(f"dataset.kind must be one of {sorted(allowed)}")
    extra = set(desc) - allowed[kind]
    if extra:
        raise ShapeError(f"dataset: unknown keys {sorted(extra)}")
    if kind == "synth_continuous":
        return synth_continuous(int(desc.get("n", 2500)), int(desc.get("side", 16)),
                                int(desc.get("seed", 0)))
    if kind == "synth_categorical":
        return synth_categorical(int(desc.get("n", 2500)), int(desc.get("side", 16)),
                                 int(desc.get("L", 8)), int(desc.get("seed", 0)))
    root = desc.get("dir")
    if root is None:
        raise ShapeError("dataset.dir is required for mnist")

    def find(stem):
        for name in (stem, stem + ".gz"):
            p = os.path.join(root, name)
            if os.path.exists(p):
                return p
        raise DataFormatError(f"missing {stem}[.gz] in {root}")

    limit = desc.get("limit")
    train = load_mnist_idx(find("train-images-idx3-ubyte"), None, "val", limit)
    test = load_mnist_idx(find("t10k-images-idx3-ubyte"), None, "test")
    return merge_test(train, test)


# ---------------------------------------------------------------------------
# iteration


def batches(ds: Dataset, split: str, batch_size: int, seed: int, epoch: int):
    """Yield index arrays of a seeded per-epoch shuffle; the short tail batch is kept."""
    if batch_size < 1:
        raise ShapeError("batch_size must be >= 1")
    idx = ds.splits.get(split)
    if idx is None or len(idx) == 0:
        raise ShapeError(f"split {split!r} is empty")
    order = idx[make_rng(seed, "shuffle", epoch).permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]
