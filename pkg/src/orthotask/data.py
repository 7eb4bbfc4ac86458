"""MNIST IDX parsing and the two-digit multi-task dataset.

Images are 64x64 with one digit in each half: an even digit on the left and
an odd digit on the right.  The 25 (even, odd) class pairs are partitioned
between train, validation and test, so evaluation always sees pairings the
model never trained on.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

EVEN = (0, 2, 4, 6, 8)
ODD = (1, 3, 5, 7, 9)
ALL_PAIRS = tuple((e, o) for e in EVEN for o in ODD)

CANVAS = 64
DIGIT = 28
HALF = CANVAS // 2
MAX_ROW = CANVAS - DIGIT  # 36
MAX_COL = HALF - DIGIT  # 4

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MDM_MAGIC = b"MDM1"

SPLITS = ("train", "val", "test")


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path) -> np.ndarray:
    """Images come back as float64 in [0, 1] of shape (N, rows, cols); labels as int64 (N,)."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: truncated image header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        expected, offset, shape = n * rows * cols, 16, (n, rows, cols)
    elif magic == LABEL_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        expected, offset, shape = n, 8, (n,)
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    actual = len(raw) - offset
    if actual < expected:
        raise IdxFormatError(
            f"{path}: truncated payload, expected {expected} bytes but found {actual} ({expected - actual} missing)"
        )
    payload = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset).reshape(shape)
    if magic == IMAGE_MAGIC:
        return payload.astype(np.float64) / 255.0
    return payload.astype(np.int64)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory) -> tuple[np.ndarray, np.ndarray]:
    """Load the MNIST training images and labels from ``directory``."""
    directory = Path(directory)
    images = parse_idx(_find(directory, "train-images-idx3-ubyte"))
    labels = parse_idx(_find(directory, "train-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise IdxFormatError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------------------
# Split planning and composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[tuple[int, int], ...]
    val: tuple[tuple[int, int], ...]
    test: tuple[tuple[int, int], ...]
    samples_per_pair: int = 1000

    def pairs(self, split: str) -> tuple[tuple[int, int], ...]:
        return getattr(self, split)

    @property
    def counts(self) -> dict[str, int]:
        return {s: len(self.pairs(s)) * self.samples_per_pair for s in SPLITS}

    def to_dict(self) -> dict:
        return {
            "samples_per_pair": self.samples_per_pair,
            **{s: [list(p) for p in self.pairs(s)] for s in SPLITS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            *(tuple(tuple(p) for p in d[s]) for s in SPLITS),
            samples_per_pair=int(d["samples_per_pair"]),
        )


def plan_splits(rng_seed: int, n_train: int = 16, n_val: int = 4, samples_per_pair: int = 1000) -> SplitPlan:
    """Randomly partition the 25 class pairs into 16 train / 4 val / 5 test."""
    if n_train + n_val > len(ALL_PAIRS):
        raise ValueError("more train+val pairs requested than exist")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(ALL_PAIRS))
    chosen = [ALL_PAIRS[i] for i in order]
    return SplitPlan(
        train=tuple(sorted(chosen[:n_train])),
        val=tuple(sorted(chosen[n_train : n_train + n_val])),
        test=tuple(sorted(chosen[n_train + n_val :])),
        samples_per_pair=samples_per_pair,
    )


def desk_plan(rng_seed: int, train_pairs: int = 4, val_pairs: int = 4, samples_per_pair: int = 250) -> SplitPlan:
    """A reduced plan for quick experiments.

    Train pairs use distinct left and distinct right classes, and the
    validation pairs are re-pairings of exactly those classes (no pair is
    shared).  This keeps every evaluated class trained on while validation
    still only sees unseen pairings.  Test gets the remaining pairs.
    """
    if not 2 <= train_pairs <= 5 or not 1 <= val_pairs <= train_pairs:
        raise ValueError("desk plan needs 2..5 train pairs and 1..train_pairs val pairs")
    rng = np.random.default_rng(rng_seed)
    evens = [EVEN[i] for i in rng.permutation(5)[:train_pairs]]
    odds = [ODD[i] for i in rng.permutation(5)[:train_pairs]]
    train = [(evens[k], odds[k]) for k in range(train_pairs)]
    shift = int(rng.integers(1, train_pairs))
    val = [(evens[k], odds[(k + shift) % train_pairs]) for k in range(val_pairs)]
    used = set(train) | set(val)
    test = [p for p in ALL_PAIRS if p not in used]
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), samples_per_pair)


@dataclass
class MultiDigitSample:
    image: np.ndarray  # (1, 64, 64) float64
    label_left: int
    label_right: int

    @property
    def pair_id(self) -> tuple[int, int]:
        return EVEN[self.label_left], ODD[self.label_right]


def paste_offsets(rng: np.random.Generator) -> tuple[int, int, int, int]:
    """(left_row, left_col, right_row, right_col), uniform with full containment."""
    return (
        int(rng.integers(0, MAX_ROW + 1)),
        int(rng.integers(0, MAX_COL + 1)),
        int(rng.integers(0, MAX_ROW + 1)),
        int(rng.integers(HALF, HALF + MAX_COL + 1)),
    )


def compose(left_img: np.ndarray, right_img: np.ndarray, offsets) -> np.ndarray:
    lr, lc, rr, rc = offsets
    if not (0 <= lr <= MAX_ROW and 0 <= rr <= MAX_ROW and 0 <= lc <= MAX_COL and HALF <= rc <= HALF + MAX_COL):
        raise ValueError(f"offsets {offsets} would leave a digit outside its half")
    canvas = np.zeros((1, CANVAS, CANVAS))
    canvas[0, lr : lr + DIGIT, lc : lc + DIGIT] = left_img
    canvas[0, rr : rr + DIGIT, rc : rc + DIGIT] = right_img
    return canvas


def compose_sample(
    left_img: np.ndarray, left_digit: int, right_img: np.ndarray, right_digit: int, rng: np.random.Generator
) -> MultiDigitSample:
    if left_digit not in EVEN:
        raise ValueError(f"left digit must be even, got {left_digit}")
    if right_digit not in ODD:
        raise ValueError(f"right digit must be odd, got {right_digit}")
    image = compose(left_img, right_img, paste_offsets(rng))
    return MultiDigitSample(image, EVEN.index(left_digit), ODD.index(right_digit))


@dataclass
class MultiDigitSet:
    """A split held as uint8 pixels; :attr:`images` gives float64 in [0, 1]."""

    pixels: np.ndarray  # (N, 64, 64) uint8
    label_left: np.ndarray  # (N,) int64 class index 0..4
    label_right: np.ndarray

    def __len__(self):
        return len(self.pixels)

    @property
    def images(self) -> np.ndarray:
        return self.images_at(slice(None))

    def images_at(self, index) -> np.ndarray:
        px = self.pixels[index]
        return (px.astype(np.float64) / 255.0)[:, None, :, :]

    @property
    def pair_ids(self) -> list[tuple[int, int]]:
        return [(EVEN[a], ODD[b]) for a, b in zip(self.label_left, self.label_right)]

    def subset(self, index) -> "MultiDigitSet":
        return MultiDigitSet(self.pixels[index], self.label_left[index], self.label_right[index])

    def sample(self, i: int) -> MultiDigitSample:
        return MultiDigitSample(self.images_at(slice(i, i + 1))[0], int(self.label_left[i]), int(self.label_right[i]))


def build_split(images: np.ndarray, labels: np.ndarray, pairs, samples_per_pair: int, rng: np.random.Generator) -> MultiDigitSet:
    by_class = {}
    for d in range(10):
        idx = np.flatnonzero(labels == d)
        by_class[d] = idx
    n = len(pairs) * samples_per_pair
    pixels = np.zeros((n, CANVAS, CANVAS), dtype=np.uint8)
    left = np.zeros(n, dtype=np.int64)
    right = np.zeros(n, dtype=np.int64)
    src = np.rint(images * 255.0).astype(np.uint8)
    k = 0
    for even, odd in pairs:
        for d in (even, odd):
            if len(by_class[d]) == 0:
                raise ValueError(f"MNIST source has no images of digit {d}")
        li = rng.choice(by_class[even], size=samples_per_pair, replace=True)
        ri = rng.choice(by_class[odd], size=samples_per_pair, replace=True)
        for a, b in zip(li, ri):
            lr, lc, rr, rc = paste_offsets(rng)
            pixels[k, lr : lr + DIGIT, lc : lc + DIGIT] = src[a]
            pixels[k, rr : rr + DIGIT, rc : rc + DIGIT] = src[b]
            left[k] = EVEN.index(even)
            right[k] = ODD.index(odd)
            k += 1
    return MultiDigitSet(pixels, left, right)


def build_dataset(images: np.ndarray, labels: np.ndarray, plan: SplitPlan, rng_seed: int) -> dict[str, MultiDigitSet]:
    """Compose every split of ``plan``; deterministic in ``rng_seed``."""
    out = {}
    for i, split in enumerate(SPLITS):
        rng = np.random.default_rng([rng_seed, i])
        out[split] = build_split(images, labels, plan.pairs(split), plan.samples_per_pair, rng)
    return out


# ---------------------------------------------------------------------------
# MDM1 split files
# ---------------------------------------------------------------------------


def write_split(path, dataset: MultiDigitSet) -> None:
    n, h, w = dataset.pixels.shape
    with open(path, "wb") as f:
        f.write(MDM_MAGIC + struct.pack("<III", n, h, w))
        rows = np.empty((n, 2 + h * w), dtype=np.uint8)
        rows[:, 0] = dataset.label_left
        rows[:, 1] = dataset.label_right
        rows[:, 2:] = dataset.pixels.reshape(n, -1)
        f.write(rows.tobytes())


def read_split(path) -> MultiDigitSet:
    raw = Path(path).read_bytes()
    if raw[:4] != MDM_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MDM_MAGIC!r}")
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    n, h, w = struct.unpack("<III", raw[4:16])
    expected = n * (2 + h * w)
    if len(raw) - 16 != expected:
        raise IdxFormatError(f"{path}: expected {expected} payload bytes, found {len(raw) - 16}")
    rows = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 2 + h * w)
    return MultiDigitSet(
        rows[:, 2:].reshape(n, h, w).copy(), rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64)
    )


# ---------------------------------------------------------------------------
# Synthetic two-task problems with known gradient geometry
# ---------------------------------------------------------------------------


@dataclass
class ToyProblem:
    """Two quadratics ``0.5 * theta^T A_k theta`` over one shared vector."""

    kind: str
    a1: np.ndarray
    a2: np.ndarray
    theta0: np.ndarray = field(repr=False)

    def losses(self, theta: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        col = ad.reshape(theta, (-1, 1))
        l1 = ad.sum_(col * ad.matmul(ad._lift(self.a1), col)) * 0.5
        l2 = ad.sum_(col * ad.matmul(ad._lift(self.a2), col)) * 0.5
        return l1, l2

    def gradients(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.a1 @ theta, self.a2 @ theta


def synthetic_two_task(kind: str, dim: int, rng: np.random.Generator) -> ToyProblem:
    """Gradients have cosine 0 (orthogonal), +1 (aligned) or -1 (conflicting) everywhere.

    ``orthogonal`` uses projections onto complementary random subspaces, so a
    point lying entirely in one subspace gives a zero gradient for the other
    task; ``theta0`` is drawn with mass in both.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    if kind == "orthogonal":
        k = dim // 2
        a1 = q[:, :k] @ q[:, :k].T
        a2 = q[:, k:] @ q[:, k:].T
    elif kind in ("aligned", "conflicting"):
        a1 = q @ np.diag(rng.uniform(0.5, 2.0, size=dim)) @ q.T
        a2 = a1 * rng.uniform(0.5, 2.0) * (1.0 if kind == "aligned" else -1.0)
    else:
        raise ValueError(f"unknown toy kind {kind!r}")
    return ToyProblem(kind, a1, a2, rng.normal(size=dim))
