"""Server-side profiling: the privacy leakage table (FSIM of attack
reconstructions per split point and noise level), the reference accuracy
and the minimum accuracy threshold derived from it.

Energy and power profiles live in ``splitpriv.energy``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from splitpriv import nn
from splitpriv.attacks import find_t_fsim, unsplit_reconstruct
from splitpriv.data import Dataset
from splitpriv.fsim import fsim
from splitpriv.protocol import train_centralized, unit_noise
from splitpriv.rng import RngStream
from splitpriv.storage import header_lines

NOISE_STEP = 0.05
NOISE_MAX = 2.50


def default_noise_grid(step: float = NOISE_STEP, top: float = NOISE_MAX) -> np.ndarray:
    """0.00, 0.05, ..., 2.50 (51 values), rounded so grid values print cleanly."""
    n = int(round(top / step))
    return np.round(np.arange(n + 1) * step, 10)


@dataclass
class AttackBudget:
    samples: int = 8
    iters: int = 400
    lr_x: float = 0.5
    lr_w: float = 0.05
    tv_weight: float = 1e-3
    noise_aware: bool = True  # attacker uses the assigned noise level (server-side adversary)
    restarts: int = 3  # surrogate initialisations per cell, lowest objective kept


@dataclass
class PrivacyLeakageTable:
    """Mean FSIM for each (split point, noise level); rows are split points 1..s_max."""

    splits: np.ndarray
    sigmas: np.ndarray
    values: np.ndarray
    converged: np.ndarray | None = None

    def __post_init__(self):
        self.splits = np.asarray(self.splits, dtype=np.int64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.converged is None:
            self.converged = np.ones(self.values.shape, dtype=bool)
        self.converged = np.asarray(self.converged, dtype=bool)
        if self.values.shape != (len(self.splits), len(self.sigmas)) or self.values.size == 0:
            raise ValueError("table values must be a complete (splits x sigmas) grid")
        if self.converged.shape != self.values.shape:
            raise ValueError("convergence flags must match the value grid")
        if np.any(np.diff(self.sigmas) <= 0):
            raise ValueError("noise grid must be strictly ascending")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("FSIM values must lie in [0, 1]")

    @property
    def s_max(self) -> int:
        return int(self.splits.max())

    def row(self, s: int) -> np.ndarray:
        hit = np.flatnonzero(self.splits == s)
        if len(hit) == 0:
            raise KeyError(f"split point {s} not in table")
        return self.values[hit[0]]

    def lookup(self, s: int, sigma: float) -> float:
        """FSIM at ``(s, sigma)``; linear interpolation between grid noise levels."""
        lo, hi = self.sigmas[0], self.sigmas[-1]
        if not lo - 1e-12 <= sigma <= hi + 1e-12:
            raise ValueError(f"noise level {sigma} outside table range [{lo}, {hi}]")
        return float(np.interp(sigma, self.sigmas, self.row(s)))

    def write(self, path, header: dict | None = None) -> None:
        lines = header_lines(header) + ["s\\sigma\t" + "\t".join(repr(float(v)) for v in self.sigmas)]
        for s, row in zip(self.splits, self.values):
            lines.append("\t".join([str(int(s))] + [repr(float(v)) for v in row]))
        for i, j in zip(*np.nonzero(~self.converged)):
            lines.append(f"# nonconverged\t{int(self.splits[i])}\t{float(self.sigmas[j])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "PrivacyLeakageTable":
        text = [line for line in Path(path).read_text().splitlines()
                if not line.startswith("# ") or line.startswith("# nonconverged")]
        if not text or not text[0].startswith("s\\sigma\t"):
            raise ValueError(f"{path}: not a privacy leakage table")
        sigmas = [float(v) for v in text[0].split("\t")[1:]]
        splits, rows, bad = [], [], []
        for line in text[1:]:
            if not line.strip():
                continue
            if line.startswith("# nonconverged"):
                _, s, sig = line.split("\t")
                bad.append((int(s), float(sig)))
                continue
            parts = line.split("\t")
            splits.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        table = cls(np.array(splits), np.array(sigmas), np.array(rows))
        for s, sig in bad:
            table.converged[splits.index(s), sigmas.index(sig)] = False
        return table


@dataclass
class TableBuild:
    table: PrivacyLeakageTable
    reconstructions: dict = field(default_factory=dict)  # (s, sigma) -> x_hat, when kept
    originals: np.ndarray | None = None
    labels: np.ndarray | None = None  # labels of the attacked samples
    sample_fsim: dict = field(default_factory=dict)  # (s, sigma) -> per-sample FSIM
    measured: np.ndarray | None = None  # cell means before the monotone envelope


def balanced_pick(labels: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    """``n`` distinct indices drawn round-robin over the classes present."""
    labels = np.asarray(labels)
    if n > len(labels):
        raise ValueError(f"cannot pick {n} of {len(labels)} samples")
    pools = [list(gen.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    out = []
    while len(out) < n:
        for pool in pools:
            if pool and len(out) < n:
                out.append(pool.pop())
    return np.array(out, dtype=np.int64)


def build_privacy_leakage_table(model: nn.LayeredModel, public_data: Dataset, s_max: int,
                                noise_grid=None, budget: AttackBudget | None = None,
                                rng: RngStream | None = None, keep_reconstructions: bool = False,
                                noise_family: str = "laplace", envelope: bool = False) -> TableBuild:
    """Attack every (split point, noise level) cell on samples of ``public_data``.

    ``model`` is the client model under attack; the attacker sees only its
    architecture and the noisy boundary activations. The same attacked
    samples are used in every cell, and within a split point the noise draws
    are one unit-variance draw scaled by each sigma, so neighbouring cells
    differ only through the noise level. Every stream is keyed by the split
    point, so cells can be computed in any order with identical results.

    With ``envelope`` each cell reports the largest FSIM measured at its own
    or any higher noise level. An attacker facing noise sigma can always add
    more noise itself, so true leakage never rises with sigma; the envelope
    removes rises that come from attack variance, erring towards more leakage.
    ``TableBuild.measured`` keeps the cell means either way.
    """
    budget = budget or AttackBudget()
    rng = rng or RngStream(0)
    grid = default_noise_grid() if noise_grid is None else np.asarray(noise_grid, dtype=np.float64)
    if not 1 <= s_max <= model.k:
        raise ValueError(f"s_max={s_max} outside 1..{model.k}")
    if np.any(np.diff(grid) <= 0) or np.any(grid < 0):
        raise ValueError("noise grid must be non-negative and strictly ascending")
    if len(public_data) < budget.samples:
        raise ValueError(f"need {budget.samples} public samples, have {len(public_data)}")
    pick = np.sort(balanced_pick(public_data.y, budget.samples, rng.child("samples").generator()))
    x, y = public_data.x[pick], public_data.y[pick]

    values = np.zeros((s_max, len(grid)))
    converged = np.ones_like(values, dtype=bool)
    kept, per_sample = {}, {}
    for i, s in enumerate(range(1, s_max + 1)):
        prefix, _ = nn.split_model(model, s, copy=True) if s < model.k else (model.copy(), None)
        z, _ = nn.forward(prefix, x, train=True)
        u = unit_noise(rng.child("noise", s).generator(), z.shape, noise_family)
        for j, sigma in enumerate(grid):
            res = unsplit_reconstruct(z + sigma * u, prefix, budget.iters, (budget.lr_x, budget.lr_w),
                                      rng.child("attack", s), tv_weight=budget.tv_weight,
                                      noise_sigma=float(sigma) if budget.noise_aware else 0.0,
                                      noise_family=noise_family, restarts=budget.restarts)
            scores = np.array([fsim(a, b) for a, b in zip(x, res.x_hat)])
            per_sample[(s, float(sigma))] = scores
            values[i, j] = scores.mean()
            converged[i, j] = res.converged
            if keep_reconstructions:
                kept[(s, float(sigma))] = res.x_hat
    measured = values.copy()
    if envelope:
        values = monotone_envelope(values)
    table = PrivacyLeakageTable(np.arange(1, s_max + 1), grid, values, converged)
    return TableBuild(table, kept, x if keep_reconstructions else None, y, per_sample, measured)


def monotone_envelope(values: np.ndarray) -> np.ndarray:
    """Per row, the running maximum taken from the highest noise level down."""
    values = np.asarray(values, dtype=np.float64)
    return np.maximum.accumulate(values[:, ::-1], axis=1)[:, ::-1]


def compute_reference_accuracy(arch, input_shape, train: Dataset, test: Dataset, epochs: int,
                               rng: RngStream | None = None, lr: float = 0.05, batch_size: int = 32) -> float:
    """Test accuracy of plain centralised training (no split, no noise)."""
    rng = rng or RngStream(0)
    model = nn.build_model(arch, input_shape, rng.child("init"))
    if epochs > 0:
        train_centralized(model, train, epochs, rng.child("train"), lr, batch_size)
    return float(np.mean(nn.predict(model, test.x) == test.y))


def compute_a_min(a_ref: float, beta: float) -> float:
    """Minimum acceptable accuracy: ``beta`` is the retained fraction of the reference accuracy."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if not 0.0 <= a_ref <= 1.0:
        raise ValueError("reference accuracy must lie in [0, 1]")
    return beta * a_ref


def estimate_t_fsim(build: TableBuild, classifier, n_class: int, n_bins: int = 8):
    """T_FSIM from a table build made with ``keep_reconstructions=True``.

    Every kept reconstruction is labelled with its source sample's class and
    scored by ``classifier``; see ``attacks.find_t_fsim`` for the cohort rule.
    """
    if not build.reconstructions:
        raise ValueError("table build kept no reconstructions")
    keys = sorted(build.reconstructions)
    recon = np.concatenate([build.reconstructions[k] for k in keys])
    labels = np.concatenate([build.labels for _ in keys])
    scores = np.concatenate([build.sample_fsim[k] for k in keys])
    return find_t_fsim(classifier, recon, labels, scores, n_class, n_bins)
