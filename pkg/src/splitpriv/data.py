"""Synthetic classification data, partitioned across simulated clients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitpriv.rng import RngStream
from splitpriv.storage import write_npz

KINDS = ("blobs", "two-spirals", "mini-images")
PIXEL_NOISE = 0.1


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray  # global sample ids, unique across every split of one generation call

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.index[idx])

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.index for p in parts]),
        )


def _templates(size: int) -> list[np.ndarray]:
    lo, hi = 0.15, 0.85
    r, c = np.mgrid[0:size, 0:size]
    q = max(size // 4, 1)
    mid = size // 2
    half = max(size // 8, 1)
    masks = [
        (r // q) % 2 == 0,                                                 # horizontal bars
        (c // q) % 2 == 0,                                                 # vertical bars
        (abs(r - mid + 0.5) < half + 0.5) | (abs(c - mid + 0.5) < half + 0.5),  # cross
        ((r // q) + (c // q)) % 2 == 0,                                    # checkerboard
        abs(r - c) <= half,                                                # diagonal
        (r < q) | (r >= size - q) | (c < q) | (c >= size - q),             # frame
        (abs(r - mid + 0.5) < q) & (abs(c - mid + 0.5) < q),               # centred square
    ]
    return [np.where(m, hi, lo).astype(np.float64) for m in masks]


def n_templates(size: int = 8) -> int:
    return len(_templates(size))


def _sample(kind, labels, n_class, gen, image_size, spread):
    n = len(labels)
    if kind == "mini-images":
        tmpl = np.stack(_templates(image_size))[labels]
        x = tmpl + gen.normal(0.0, PIXEL_NOISE, size=tmpl.shape)
        return np.clip(x, 0.0, 1.0)[:, None, :, :]
    if kind == "blobs":
        dim = 8
        centers = RngStream(7919, ("blob-centers", n_class, dim)).generator().normal(0.0, 2.0, size=(n_class, dim))
        return centers[labels] + gen.normal(0.0, spread, size=(n, dim))
    if kind == "two-spirals":
        t = gen.uniform(0.25, 1.0, size=n) * 3 * np.pi
        phase = 2 * np.pi * labels / n_class
        pts = np.stack([t * np.cos(t + phase), t * np.sin(t + phase)], axis=1) / (3 * np.pi)
        return pts + gen.normal(0.0, 0.05 * spread, size=pts.shape)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def _labels(n, n_class, iid, gen, concentration):
    if iid:
        lab = np.arange(n) % n_class
        return gen.permutation(lab)
    probs = gen.dirichlet(np.full(n_class, concentration))
    return gen.choice(n_class, size=n, p=probs)


def make_synthetic_dataset(
    kind: str,
    n_class: int,
    n_per_client,
    n_clients: int = 1,
    iid: bool = True,
    rng: RngStream | None = None,
    n_test: int = 200,
    image_size: int = 8,
    spread: float = 1.0,
    concentration: float = 0.5,
) -> tuple[list[Dataset], Dataset]:
    """Generate per-client training sets plus a balanced test set.

    ``n_per_client`` is an int or one int per client. Mini-images are
    single-channel ``image_size`` x ``image_size`` class templates with
    Gaussian pixel noise, clipped to [0, 1].
    """
    if n_class < 2:
        raise ValueError("n_class must be at least 2")
    if kind == "mini-images" and n_class > n_templates(image_size):
        raise ValueError(f"mini-images has only {n_templates(image_size)} templates, asked for {n_class} classes")
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    rng = rng or RngStream(0)
    sizes = [int(n_per_client)] * n_clients if np.isscalar(n_per_client) else [int(v) for v in n_per_client]
    if len(sizes) != n_clients or min(sizes, default=1) < 1:
        raise ValueError("every client needs at least one sample")

    clients, next_id = [], 0
    for cid, n in enumerate(sizes):
        gen = rng.child("data", kind, cid).generator()
        y = _labels(n, n_class, iid, gen, concentration)
        x = _sample(kind, y, n_class, gen, image_size, spread)
        clients.append(Dataset(x, y.astype(np.int64), np.arange(next_id, next_id + n)))
        next_id += n
    gen = rng.child("data", kind, "test").generator()
    y = _labels(n_test, n_class, True, gen, concentration)
    test = Dataset(_sample(kind, y, n_class, gen, image_size, spread), y.astype(np.int64),
                   np.arange(next_id, next_id + n_test))
    return clients, test


def save_dataset(path, datasets: dict[str, Dataset]) -> None:
    """Array container for inspection: ``<name>_x``, ``<name>_y``, ``<name>_index``."""
    arrays = {}
    for name, ds in datasets.items():
        arrays[f"{name}_x"], arrays[f"{name}_y"], arrays[f"{name}_index"] = ds.x, ds.y, ds.index
    write_npz(path, arrays)


def load_dataset(path) -> dict[str, Dataset]:
    with np.load(Path(path)) as data:
        names = sorted({k.rsplit("_", 1)[0] for k in data.files})
        return {n: Dataset(data[f"{n}_x"], data[f"{n}_y"], data[f"{n}_index"]) for n in names}
