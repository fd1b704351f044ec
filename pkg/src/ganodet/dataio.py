"""Dataset plumbing: IDX files, deterministic splits, contamination
injection, puzzle-tiling construction, and a synthetic defect corpus.

Pixels are always float64 scaled to [-1, 1] (the generator's tanh range)
so residuals compare in one consistent range. Splits are index sets into
a single source image set and persist as JSON manifests of indices plus
source hashes, never as copied pixels.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import seeded_rng
from .config import canonical_json
from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FractionOutOfRangeError,
    MissingClassError,
    PoolExhaustedError,
    TruncatedFileError,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 31


@dataclass
class LabeledImageSet:
    images: np.ndarray            # (n, H, W) float64 in [-1, 1]
    labels: np.ndarray            # (n,) int64
    provenance: str = ""
    masks: np.ndarray | None = None   # (n, H, W) bool, defect pixels

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (n, H, W) with one label per image")
        if self.images.size and (self.images.min() < -1.0 or
                                 self.images.max() > 1.0):
            raise ValueError("pixels must lie in [-1, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_h(self) -> int:
        return self.images.shape[1]

    @property
    def image_w(self) -> int:
        return self.images.shape[2]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ---- IDX format ------------------------------------------------------------

def pixels_to_unit(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0

def unit_to_pixels(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class IdxData:
    kind: str                 # "images" or "labels"
    array: np.ndarray         # scaled images (n, H, W) or labels (n,)


def parse_idx(path) -> IdxData:
    """Decode one big-endian IDX file: images (magic 0x803, u8 pixels
    mapped to [-1, 1]) or labels (magic 0x801)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic == IMAGE_MAGIC:
        if len(blob) < 16:
            raise TruncatedFileError(f"{path}: image header truncated")
        count, rows, cols = struct.unpack(">III", blob[4:16])
        total = count * rows * cols
        if total > MAX_IDX_ELEMENTS:
            raise DimensionOverflowError(
                f"{path}: {count}x{rows}x{cols} is implausibly large")
        if len(blob) != 16 + total:
            raise TruncatedFileError(
                f"{path}: payload is {len(blob) - 16} bytes, header "
                f"declares {total}")
        raw = np.frombuffer(blob, dtype=np.uint8, offset=16)
        return IdxData("images", pixels_to_unit(raw.reshape(count, rows, cols)))
    if magic == LABEL_MAGIC:
        if len(blob) < 8:
            raise TruncatedFileError(f"{path}: label header truncated")
        (count,) = struct.unpack(">I", blob[4:8])
        if count > MAX_IDX_ELEMENTS:
            raise DimensionOverflowError(f"{path}: {count} labels declared")
        if len(blob) != 8 + count:
            raise TruncatedFileError(
                f"{path}: payload is {len(blob) - 8} bytes, header "
                f"declares {count}")
        raw = np.frombuffer(blob, dtype=np.uint8, offset=8)
        return IdxData("labels", raw.astype(np.int64))
    raise BadMagicError(f"{path}: magic 0x{magic:08x} is not an IDX magic")


def encode_idx(data: IdxData) -> bytes:
    """Inverse of parse_idx; re-encoding a parsed file reproduces it
    byte for byte."""
    if data.kind == "images":
        imgs = unit_to_pixels(np.asarray(data.array, dtype=np.float64))
        n, rows, cols = imgs.shape
        return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + imgs.tobytes()
    if data.kind == "labels":
        labels = np.asarray(data.array).astype(np.uint8)
        return struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes()
    raise ValueError(f"unknown IDX payload kind {data.kind!r}")


def write_idx(path, data: IdxData) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_idx(data))


def load_image_set(images_path, labels_path) -> LabeledImageSet:
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.kind != "images" or labels.kind != "labels":
        raise BadMagicError("expected one image file and one label file")
    if images.array.shape[0] != labels.array.shape[0]:
        raise ValueError(
            f"{images.array.shape[0]} images but {labels.array.shape[0]} labels")
    return LabeledImageSet(images.array, labels.array,
                           provenance=f"idx:{images_path}")


# ---- experiment splits -------------------------------------------------------

@dataclass
class ExperimentSplit:
    """Index sets into one source image set.

    normal_train may (deliberately) contain abnormal-class indices after
    contamination injection; abnormal_train is the known-abnormal penalty
    pool; contamination_pool is a held-out abnormal reserve disjoint from
    both abnormal_train and test, so injected noise never overlaps the
    penalty set or the evaluation set.
    """

    source: LabeledImageSet
    normal_class: int
    seed: int
    normal_train_idx: np.ndarray
    abnormal_train_idx: np.ndarray
    test_idx: np.ndarray
    test_labels: np.ndarray
    contamination_pool_idx: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64))
    contamination_injected: float = 0.0

    def normal_train(self) -> np.ndarray:
        return self.source.flat()[self.normal_train_idx]

    def abnormal_train(self) -> np.ndarray:
        return self.source.flat()[self.abnormal_train_idx]

    def test_images(self) -> np.ndarray:
        return self.source.flat()[self.test_idx]

    def check_disjoint(self) -> bool:
        train = set(self.normal_train_idx.tolist())
        abn = set(self.abnormal_train_idx.tolist())
        test = set(self.test_idx.tolist())
        pool = set(self.contamination_pool_idx.tolist())
        return (not train & test and not abn & test and not pool & test
                and not pool & abn)


def build_split(data: LabeledImageSet, normal_class: int, seed: int,
                train_frac: float = 0.7, abnormal_frac: float = 0.1,
                reserve_frac: float = 0.1) -> ExperimentSplit:
    """Seeded split: train_frac of the normal class becomes the training
    pool; from every other class abnormal_frac goes into the known-abnormal
    pool and reserve_frac into the contamination reserve; everything else
    is test, binary-labeled with abnormal = 1."""
    present = np.unique(data.labels)
    if normal_class not in present:
        raise MissingClassError(f"class {normal_class} absent from data")
    rng = seeded_rng(seed, 11)
    normal_idx = np.flatnonzero(data.labels == normal_class)
    perm = normal_idx[rng.permutation(normal_idx.size)]
    n_train = int(train_frac * perm.size)
    normal_train = perm[:n_train]
    test_normal = perm[n_train:]

    abnormal_train, reserve, test_abnormal = [], [], []
    for cls in sorted(int(c) for c in present if c != normal_class):
        cls_idx = np.flatnonzero(data.labels == cls)
        perm_c = cls_idx[rng.permutation(cls_idx.size)]
        k = int(abnormal_frac * perm_c.size)
        r = int(reserve_frac * perm_c.size)
        abnormal_train.append(perm_c[:k])
        reserve.append(perm_c[k:k + r])
        test_abnormal.append(perm_c[k + r:])

    abnormal_train = (np.concatenate(abnormal_train) if abnormal_train
                      else np.empty(0, dtype=np.int64))
    reserve = (np.concatenate(reserve) if reserve
               else np.empty(0, dtype=np.int64))
    test_abnormal = (np.concatenate(test_abnormal) if test_abnormal
                     else np.empty(0, dtype=np.int64))
    test_idx = np.concatenate([test_normal, test_abnormal])
    test_labels = np.concatenate([np.zeros(test_normal.size, dtype=np.int64),
                                  np.ones(test_abnormal.size, dtype=np.int64)])
    return ExperimentSplit(
        source=data, normal_class=normal_class, seed=seed,
        normal_train_idx=normal_train.astype(np.int64),
        abnormal_train_idx=abnormal_train.astype(np.int64),
        test_idx=test_idx.astype(np.int64), test_labels=test_labels,
        contamination_pool_idx=reserve.astype(np.int64))


def build_mnist_split(data: LabeledImageSet, normal_class: int,
                      seed: int) -> ExperimentSplit:
    """The ten-digit protocol: 70% of the normal class for training, 10%
    of every other class as the known-abnormal pool."""
    present = set(np.unique(data.labels).tolist())
    missing = sorted(set(range(10)) - present)
    if missing:
        raise MissingClassError(f"digits {missing} absent from data")
    if not (0 <= normal_class <= 9):
        raise MissingClassError(f"normal class must be a digit, got {normal_class}")
    return build_split(data, normal_class, seed)


def inject_contamination(split: ExperimentSplit, fraction: float,
                         seed: int) -> ExperimentSplit:
    """Replace floor(fraction * n) normal-training items with abnormal
    images from the reserve, leaving them (incorrectly) in the normal
    pool. The known-abnormal pool is untouched."""
    if not (0.0 <= fraction <= 0.5):
        raise FractionOutOfRangeError(
            f"contamination fraction must be in [0, 0.5], got {fraction}")
    n = split.normal_train_idx.size
    k = int(fraction * n)
    pool = split.contamination_pool_idx
    if k > pool.size:
        raise PoolExhaustedError(
            f"need {k} contaminants, reserve holds {pool.size}")
    rng = seeded_rng(seed, 13)
    new_train = split.normal_train_idx.copy()
    positions = rng.choice(n, size=k, replace=False)
    donors = rng.choice(pool.size, size=k, replace=False)
    new_train[positions] = pool[donors]
    return replace(split,
                   normal_train_idx=new_train,
                   contamination_pool_idx=np.delete(pool, donors),
                   contamination_injected=fraction)


# ---- puzzle tiling -----------------------------------------------------------

PUZZLE_GRID = 11


def build_ir_mnist(data: LabeledImageSet, excluded_digit: int, n_samples: int,
                   seed: int, variant: str = "train") -> LabeledImageSet:
    """Tile 121 seeded-random digit images into an 11x11 puzzle per sample.

    The train variant draws tiles only from digits other than the excluded
    one (labels all 0); the test variant draws from all digits and labels
    a sample 1 when the excluded digit appears anywhere in it.
    """
    present = set(np.unique(data.labels).tolist())
    missing = sorted(set(range(10)) - present)
    if missing:
        raise MissingClassError(f"digits {missing} absent from data")
    if variant not in ("train", "test"):
        raise ValueError(f"unknown puzzle variant {variant!r}")
    rng = seeded_rng(seed, 17 if variant == "train" else 19)
    h, w = data.image_h, data.image_w
    if variant == "train":
        pool = np.flatnonzero(data.labels != excluded_digit)
    else:
        pool = np.arange(len(data))
    n_tiles = PUZZLE_GRID * PUZZLE_GRID
    out = np.empty((n_samples, h * PUZZLE_GRID, w * PUZZLE_GRID))
    labels = np.zeros(n_samples, dtype=np.int64)
    for s in range(n_samples):
        chosen = pool[rng.integers(0, pool.size, size=n_tiles)]
        labels[s] = int(np.any(data.labels[chosen] == excluded_digit))
        tiles = data.images[chosen].reshape(PUZZLE_GRID, PUZZLE_GRID, h, w)
        out[s] = tiles.transpose(0, 2, 1, 3).reshape(h * PUZZLE_GRID,
                                                     w * PUZZLE_GRID)
    return LabeledImageSet(out, labels,
                           provenance=f"puzzle:{variant}:excl{excluded_digit}")


# ---- synthetic defect corpus ---------------------------------------------------

SYN_H = SYN_W = 28
_RECT = (5, 23)          # rectangle extent on both axes
_NOISE_AMP = 0.05


def generate_synthetic_corpus(n: int, defect_rate: float,
                              seed: int) -> LabeledImageSet:
    """Stand-in for proprietary inspection data: a filled rectangle with a
    smooth diagonal intensity gradient and low-amplitude noise; defective
    samples carry a 1-3 pixel bright scratch at a seeded location, with
    the ground-truth pixel mask retained for localization scoring."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 <= defect_rate <= 1.0):
        raise FractionOutOfRangeError(
            f"defect_rate must be in [0, 1], got {defect_rate}")
    rng = seeded_rng(seed, 23)
    lo, hi = _RECT
    span = 2 * (hi - 1 - lo)
    base = np.full((SYN_H, SYN_W), -1.0)
    ii, jj = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi), indexing="ij")
    base[lo:hi, lo:hi] = -0.3 + ((ii - lo) + (jj - lo)) / span

    images = np.empty((n, SYN_H, SYN_W))
    labels = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, SYN_H, SYN_W), dtype=bool)
    for s in range(n):
        img = base + rng.normal(0.0, _NOISE_AMP, size=(SYN_H, SYN_W))
        defective = rng.random() < defect_rate
        if defective:
            length = int(rng.integers(1, 4))
            di, dj = [(0, 1), (1, 0), (1, 1)][int(rng.integers(0, 3))]
            r0 = int(rng.integers(2, SYN_H - 2 - length * di))
            c0 = int(rng.integers(2, SYN_W - 2 - length * dj))
            for t in range(length):
                img[r0 + t * di, c0 + t * dj] = 1.0
                masks[s, r0 + t * di, c0 + t * dj] = True
            labels[s] = 1
        images[s] = np.clip(img, -1.0, 1.0)
    return LabeledImageSet(images, labels, provenance=f"synthetic:{seed}",
                           masks=masks)


# ---- manifests -------------------------------------------------------------------

MANIFEST_FORMAT = "split-manifest/1"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_split_manifest(path, split: ExperimentSplit, source_desc: dict) -> None:
    manifest = {
        "format": MANIFEST_FORMAT,
        "source": source_desc,
        "normal_class": split.normal_class,
        "seed": split.seed,
        "normal_train": split.normal_train_idx.tolist(),
        "abnormal_train": split.abnormal_train_idx.tolist(),
        "test": split.test_idx.tolist(),
        "test_labels": split.test_labels.tolist(),
        "contamination_pool": split.contamination_pool_idx.tolist(),
        "contamination_injected": split.contamination_injected,
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(manifest))
        fh.write("\n")


def _load_source(desc: dict, base_dir) -> LabeledImageSet:
    kind = desc.get("kind")
    if kind == "idx":
        img_path = _resolve(desc["images"], base_dir)
        lbl_path = _resolve(desc["labels"], base_dir)
        for key, p in (("sha256_images", img_path), ("sha256_labels", lbl_path)):
            if desc.get(key) and sha256_file(p) != desc[key]:
                raise ValueError(f"{p}: hash mismatch against manifest")
        return load_image_set(img_path, lbl_path)
    if kind == "synthetic":
        data = generate_synthetic_corpus(desc["n"], desc["defect_rate"],
                                         desc["seed"])
        if desc.get("sha256") and sha256_array(data.images) != desc["sha256"]:
            raise ValueError("regenerated synthetic corpus hash mismatch")
        return data
    if kind == "ir-mnist":
        digits = _load_source(desc["digits"], base_dir)
        train = build_ir_mnist(digits, desc["excluded_digit"],
                               desc["n_train"], desc["seed"], variant="train")
        test = build_ir_mnist(digits, desc["excluded_digit"],
                              desc["n_test"], desc["seed"], variant="test")
        images = np.concatenate([train.images, test.images])
        labels = np.concatenate([train.labels, test.labels])
        return LabeledImageSet(images, labels, provenance=train.provenance)
    raise ValueError(f"unknown source kind {kind!r}")


def _resolve(p, base_dir):
    import os
    return p if os.path.isabs(p) or base_dir is None else os.path.join(base_dir, p)


def load_split_manifest(path) -> ExperimentSplit:
    import os
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a split manifest")
    source = _load_source(manifest["source"], os.path.dirname(os.path.abspath(path)))
    return ExperimentSplit(
        source=source,
        normal_class=int(manifest["normal_class"]),
        seed=int(manifest["seed"]),
        normal_train_idx=np.asarray(manifest["normal_train"], dtype=np.int64),
        abnormal_train_idx=np.asarray(manifest["abnormal_train"], dtype=np.int64),
        test_idx=np.asarray(manifest["test"], dtype=np.int64),
        test_labels=np.asarray(manifest["test_labels"], dtype=np.int64),
        contamination_pool_idx=np.asarray(manifest["contamination_pool"],
                                          dtype=np.int64),
        contamination_injected=float(manifest["contamination_injected"]))
