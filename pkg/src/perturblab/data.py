"""Synthetic two-class image data standing in for bonafide / attack samples.

Bonafide: a smooth radial gradient with random centre, offset and slope,
plus Gaussian pixel noise.  Attack: the same kind of gradient overlaid with
a sinusoidal stripe texture (period 4 px, random orientation and phase)
plus the same noise.  The stripe amplitude is ``STRIPE_AMPLITUDE`` scaled by
a per-sample visibility drawn from U(0, 1) ** ``VISIBILITY_POWER``, so a
tail of attacks is nearly invisible and the classes stay hard to separate
at a very low false-detection rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, sample_gaussian

SIZE = 16
NOISE_STD = 0.1
STRIPE_PERIOD = 4
STRIPE_AMPLITUDE = 0.5
VISIBILITY_POWER = 0.75

# Default experiment data, frozen after tuning.
DEFAULT_N_TRAIN = 4000
DEFAULT_N_TEST = 4000
DEFAULT_SEED = 1

BONAFIDE, PA = 0, 1


@dataclass
class Dataset:
    images: np.ndarray  # [n, 16, 16, 1] float32
    labels: np.ndarray  # [n] int8, 1 = attack
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("dataset needs n > 0 images with one label each")

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self) -> dict[str, int]:
        return {"bonafide": int((self.labels == BONAFIDE).sum()), "pa": int((self.labels == PA).sum())}


def _make_split(n: int, rng: Rng, split: str) -> Dataset:
    labels = np.zeros(n, dtype=np.int8)
    labels[n // 2:] = PA
    labels = labels[rng.permutation(n)]

    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    u = rng.uniform(n * 7).reshape(n, 7)
    cy = 4.0 + 8.0 * u[:, 0]
    cx = 4.0 + 8.0 * u[:, 1]
    offset = 0.2 + 0.4 * u[:, 2]
    slope = -0.4 + 0.8 * u[:, 3]
    r = np.sqrt((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
    img = offset[:, None, None] + slope[:, None, None] * r / (SIZE * np.sqrt(2.0))

    vertical = u[:, 4] < 0.5
    phase = 2.0 * np.pi * u[:, 5]
    amp = STRIPE_AMPLITUDE * u[:, 6] ** VISIBILITY_POWER
    coord = np.where(vertical[:, None, None], xx[None], yy[None])
    stripes = amp[:, None, None] * np.sin(2.0 * np.pi * coord / STRIPE_PERIOD + phase[:, None, None])
    img = img + stripes * (labels == PA)[:, None, None]

    img = img + sample_gaussian(rng, n * SIZE * SIZE, 0.0, NOISE_STD).reshape(n, SIZE, SIZE)
    return Dataset(img[..., None].astype(np.float32), labels, split)


def gen_split(n: int, seed: int, split: str) -> Dataset:
    """One balanced split; streams are keyed by split name so splits never share draws."""
    if n < 2:
        raise ValueError(f"split needs at least 2 samples, got {n}")
    key = {"train": 0, "test": 1, "val": 2}[split]
    return _make_split(n, Rng(seed).spawn(key), split)


def gen_synthetic(n_train: int = DEFAULT_N_TRAIN, n_test: int = DEFAULT_N_TEST,
                  seed: int = DEFAULT_SEED) -> tuple[Dataset, Dataset]:
    if n_train < 100 or n_test < 100:
        raise ValueError(f"n_train and n_test must be >= 100, got {n_train}, {n_test}")
    return gen_split(n_train, seed, "train"), gen_split(n_test, seed, "test")


def save_dataset(path, *splits: Dataset) -> None:
    arrays = {}
    for ds in splits:
        arrays[f"{ds.split}_images"] = ds.images
        arrays[f"{ds.split}_labels"] = ds.labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path, split: str) -> Dataset:
    with np.load(Path(path)) as z:
        if f"{split}_images" not in z:
            raise KeyError(f"{path}: no {split!r} split (have {sorted(k[:-7] for k in z.files if k.endswith('_images'))})")
        return Dataset(z[f"{split}_images"], z[f"{split}_labels"], split)
