"""Adversary toolkit: input reconstruction from boundary activations,
reconstruction-classifiability thresholds, and membership inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from splitpriv import nn, protocol
from splitpriv.data import Dataset
from splitpriv.rng import RngStream

TV_WEIGHT = 1e-3
DISCREPANCY_FACTOR = 1.1
REESTIMATE_EVERY = 25
# median of u**2 for unit-variance noise u, and sqrt(n) times the relative std of its sample median
NOISE_MEDIAN_SQ = {"laplace": (math.log(2.0) ** 2 / 2.0, 3.0), "gaussian": (0.454936, 2.35)}


@dataclass
class ReconstructionResult:
    x_hat: np.ndarray
    surrogate: nn.LayeredModel
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)  # best objective so far, per iteration


def total_variation(x: np.ndarray, eps: float = 1e-6):
    """Smoothed anisotropic TV per sample (mean over pixels) and its gradient."""
    if x.ndim < 3:
        return 0.0, np.zeros_like(x)
    dh = np.diff(x, axis=-2)
    dw = np.diff(x, axis=-1)
    ah = np.sqrt(dh**2 + eps)
    aw = np.sqrt(dw**2 + eps)
    per_pixel = np.prod(x.shape[1:])
    value = float((ah.sum() + aw.sum()) / per_pixel)
    gh = dh / ah / per_pixel
    gw = dw / aw / per_pixel
    grad = np.zeros_like(x)
    grad[..., 1:, :] += gh
    grad[..., :-1, :] -= gh
    grad[..., :, 1:] += gw
    grad[..., :, :-1] -= gw
    return value, grad


def noise_weight(sigma: float, z_observed: np.ndarray | None = None, family: str = "laplace",
                 z_crit: float = 2.0) -> float:
    """Weight on the activation-matching term when the observation carries noise of std ``sigma``.

    With the observation at hand this is a Wiener-style gain ``1 - noise/observed``
    measured on medians of squared values, which heavy-tailed noise draws
    cannot inflate the way they inflate means. The noise median is raised by
    ``z_crit`` standard errors, so an observation within sampling error of
    pure noise gets weight 0 and the attacker stops trusting it.
    Without the observation a fixed ``1 / (1 + sigma**2)**2`` is used.
    """
    if sigma == 0:
        return 1.0
    if z_observed is None:
        return 1.0 / (1.0 + sigma**2) ** 2
    z_observed = np.asarray(z_observed)
    observed = float(np.median(z_observed**2))
    if observed <= 0:
        return 0.0
    median_sq, spread = NOISE_MEDIAN_SQ[family]
    noise = sigma**2 * median_sq * (1.0 + z_crit * spread / math.sqrt(z_observed.size))
    return max(1.0 - noise / observed, 0.0)


def _objective(model, x_hat, z, tv_weight, train, data_weight=1.0):
    out, tape = nn.forward(model, x_hat, record_tape=True, train=train)
    diff = out - z
    per_feature = diff[0].size
    mse = float(np.sum(diff**2) / per_feature)
    tv, tv_grad = total_variation(x_hat)
    residual = float(np.mean(diff**2))
    return data_weight * mse + tv_weight * tv, tape, 2.0 * data_weight * diff / per_feature, tv_grad, residual


def estimate_curvature(model: nn.LayeredModel, x: np.ndarray, gen: np.random.Generator,
                       train: bool = True, n_iter: int = 15, eps: float = 1e-4) -> float:
    """Largest curvature of the matching term w.r.t. the input, by power iteration.

    Jacobian-vector products are taken by forward differences, the transpose
    products by backprop, so only the existing layer code is needed.
    """
    v = gen.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    f0, tape = nn.forward(model, x, record_tape=True, train=train)
    lam = 0.0
    for _ in range(n_iter):
        f1, _ = nn.forward(model, x + eps * v, train=train)
        jv = (f1 - f0) / eps
        jtjv = nn.backward(model, tape, jv).boundary_grad
        lam = float(np.linalg.norm(jtjv))
        if lam == 0.0 or not np.isfinite(lam):
            break
        v = jtjv / lam
    return 2.0 * lam / f0[0].size + 1e-12


def unsplit_reconstruct(z_observed: np.ndarray, arch_prefix: nn.LayeredModel, iters: int = 400,
                        lr_pair: tuple[float, float] = (0.5, 0.05), rng: RngStream | None = None,
                        tv_weight: float = TV_WEIGHT, init_model: nn.LayeredModel | None = None,
                        train_mode: bool = True, value_range: tuple[float, float] = (0.0, 1.0),
                        x_init: str = "flat", noise_sigma: float = 0.0, noise_family: str = "laplace",
                        discrepancy: float = DISCREPANCY_FACTOR,
                        reestimate_every: int = REESTIMATE_EVERY, restarts: int = 1) -> ReconstructionResult:
    """Recover inputs and a surrogate client model from observed activations.

    The attacker knows the prefix architecture (``arch_prefix``) but not its
    weights: it starts from a freshly initialised copy (or ``init_model``)
    and alternates projected gradient steps on the input estimate and on the
    surrogate weights, minimising the per-sample squared activation mismatch
    plus ``tv_weight`` times total variation. The best iterate seen is returned.

    The input step is ``lr_x`` divided by the estimated curvature of the
    matching term, so one learning rate works for every split depth.

    ``noise_sigma`` is the defender's noise level, which the server knows
    since it hands out the assignments. With noise the matching term is
    down-weighted by ``noise_weight`` and fitting stops once the mean squared
    residual falls to ``discrepancy * noise_sigma**2``: fitting below the noise
    floor only fits the noise.

    With ``restarts > 1`` the attack is repeated from fresh surrogate weights
    and the run with the lowest objective is kept. Poor surrogate draws get
    stuck in local minima, and the attacker can tell from the objective alone.
    """
    rng = rng or RngStream(0)
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    kw = dict(tv_weight=tv_weight, init_model=init_model, train_mode=train_mode, value_range=value_range,
              x_init=x_init, noise_sigma=noise_sigma, noise_family=noise_family, discrepancy=discrepancy,
              reestimate_every=reestimate_every)
    best = None
    for r in range(restarts):
        res = _reconstruct_once(z_observed, arch_prefix, iters, lr_pair, rng if r == 0 else rng.child("restart", r), **kw)
        if best is None or (np.isfinite(res.objective) and not res.objective >= best.objective):
            best = res
    return best


def _reconstruct_once(z_observed, arch_prefix, iters, lr_pair, rng, tv_weight, init_model, train_mode,
                      value_range, x_init, noise_sigma, noise_family, discrepancy,
                      reestimate_every) -> ReconstructionResult:
    z = np.asarray(z_observed, dtype=np.float64)
    lr_x, lr_w = lr_pair
    lo, hi = value_range
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    surrogate = init_model.copy() if init_model is not None else nn.reinitialize(arch_prefix, rng.child("surrogate"))
    shape = (z.shape[0],) + tuple(arch_prefix.input_shape)
    if x_init == "uniform":
        x_hat = rng.child("x-init").generator().uniform(lo, hi, size=shape)
    elif x_init == "flat":
        x_hat = np.full(shape, (lo + hi) / 2)
    else:
        raise ValueError(f"unknown x_init {x_init!r}")
    weight = noise_weight(noise_sigma, z, noise_family)
    floor = discrepancy * noise_sigma**2
    curv_gen = rng.child("curvature").generator()

    best_obj, best_x, best_model = np.inf, x_hat.copy(), surrogate.copy()
    history: list[float] = []
    converged = True
    curvature = None
    for it in range(iters):
        obj, tape, g_out, tv_grad, residual = _objective(surrogate, x_hat, z, tv_weight, train_mode, weight)
        if not np.isfinite(obj):
            converged = False
            break
        if obj < best_obj:
            best_obj, best_x, best_model = obj, x_hat.copy(), surrogate.copy()
        history.append(best_obj)
        if it > 0 and noise_sigma > 0 and residual <= floor:
            break
        if curvature is None or (reestimate_every and it % reestimate_every == 0):
            curvature = estimate_curvature(surrogate, x_hat, curv_gen, train_mode)
        packet = nn.backward(surrogate, tape, g_out)
        x_hat = np.clip(x_hat - (lr_x / curvature) * (packet.boundary_grad + tv_weight * tv_grad), lo, hi)
        if lr_w > 0:
            out, tape = nn.forward(surrogate, x_hat, record_tape=True, train=train_mode)
            diff = out - z
            packet = nn.backward(surrogate, tape, 2.0 * diff / diff[0].size)
            if not all(np.all(np.isfinite(g)) for gs in packet.param_grads for g in gs):
                converged = False
                break
            nn.sgd_step(surrogate, packet.param_grads, lr_w)
    else:
        if iters > 0:
            obj, *_ = _objective(surrogate, x_hat, z, tv_weight, train_mode, weight)
            if np.isfinite(obj) and obj < best_obj:
                best_obj, best_x, best_model = obj, x_hat.copy(), surrogate.copy()
            history.append(best_obj)
    if iters == 0:
        best_obj = float("nan")
    return ReconstructionResult(best_x, best_model, float(best_obj), len(history), converged, history)


# ---------------------------------------------------------------------------
# T_FSIM: how similar can a reconstruction be before a classifier can read it?


@dataclass
class FsimThreshold:
    threshold: float
    flagged: bool  # True when no cohort was at chance and the minimum FSIM was returned
    cohorts: list[dict]


def _as_classifier(clf) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(clf, nn.LayeredModel):
        return lambda x: nn.predict(clf, x)
    if hasattr(clf, "predict"):
        return clf.predict
    return clf


def find_t_fsim(classifier, reconstructions: np.ndarray, labels: np.ndarray, fsims: np.ndarray,
                n_class: int, n_bins: int = 8, z_crit: float = 1.645) -> FsimThreshold:
    """FSIM below which a classifier cannot beat chance on reconstructions.

    Reconstructions are sorted by FSIM and cut into ``n_bins`` equal-count
    cohorts. A cohort counts as unclassifiable when its accuracy is not
    significantly above ``1/n_class`` (one-sided normal test at ``z_crit``),
    so a cohort of pure-noise images at true chance is not rejected by
    sampling luck. Scanning upward from the lowest FSIM, the threshold is the
    top of the last cohort before the first classifiable one. If the lowest
    cohort is already classifiable the minimum observed FSIM comes back with
    ``flagged=True``.
    """
    if n_class < 2:
        raise ValueError("threshold is undefined for fewer than two classes")
    fsims = np.asarray(fsims, dtype=np.float64)
    labels = np.asarray(labels)
    if not len(fsims) == len(labels) == len(reconstructions) or len(fsims) == 0:
        raise ValueError("reconstructions, labels and fsims must be non-empty and aligned")
    predict = _as_classifier(classifier)
    correct = np.asarray(predict(np.asarray(reconstructions))) == labels
    order = np.argsort(fsims, kind="stable")
    chance = 1.0 / n_class
    cohorts, best, scanning = [], None, True
    for idx in np.array_split(order, min(n_bins, len(order))):
        if len(idx) == 0:
            continue
        acc = float(correct[idx].mean())
        margin = z_crit * math.sqrt(chance * (1 - chance) / len(idx))
        ok = acc <= chance + margin
        top = float(fsims[idx].max())
        cohorts.append({"fsim_lo": float(fsims[idx].min()), "fsim_hi": top, "n": int(len(idx)),
                        "accuracy": acc, "qualifies": bool(ok)})
        scanning = scanning and ok
        if scanning:
            best = top
    if best is None:
        return FsimThreshold(float(fsims.min()), True, cohorts)
    return FsimThreshold(best, False, cohorts)


# ---------------------------------------------------------------------------
# Membership inference with a shadow split-learning run


@dataclass
class MiaResult:
    accuracy: float
    shadow_stage: int
    target_stage: int
    l2_lambda: float
    split_point: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"shadow_stage": self.shadow_stage, "target_stage": self.target_stage,
                "lambda": self.l2_lambda, "split_point": self.split_point, "accuracy": self.accuracy}


@dataclass
class MiaSetup:
    """Everything the attack needs: the model family, training recipe and four disjoint pools."""

    arch: list[dict]
    input_shape: tuple
    shadow_in: Dataset
    shadow_out: Dataset
    target_in: Dataset
    target_out: Dataset
    lr: float = 0.1
    batch_size: int = 16
    noise_level: float = 0.0


def membership_features(model: nn.LayeredModel, data: Dataset) -> np.ndarray:
    """Per-sample (loss, max softmax, entropy) of a model's predictions."""
    logits, _ = nn.forward(model, data.x)
    p = nn.softmax(logits)
    loss = nn.per_sample_cross_entropy(logits, data.y)
    ent = -np.sum(p * np.log(np.clip(p, 1e-12, None)), axis=1)
    return np.stack([loss, p.max(axis=1), ent], axis=1)


def train_split_run(setup: MiaSetup, members: Dataset, epochs: int, l2_lambda: float, split_point: int,
                    rng: RngStream) -> nn.LayeredModel:
    """One-client split training on ``members``; returns the composite model the server can query."""
    model = nn.build_model(setup.arch, setup.input_shape, rng.child("init"))
    if not 1 <= split_point < model.k:
        raise ValueError(f"split point {split_point} outside 1..{model.k - 1}")
    srv = protocol.ServerState(model, s_max=split_point, aggregation_period=max(epochs, 1))
    client = protocol.init_client(0, model, split_point, members, setup.noise_level)
    for t in range(1, epochs + 1):
        gen = rng.child("batches", t).generator()
        for b, idx in enumerate(protocol._batches(len(members), setup.batch_size, gen)):
            protocol.client_turn(client, srv, (members.x[idx], members.y[idx]), rng.child("noise", t, b),
                                 setup.lr, l2_lambda)
    return protocol.composite_model(srv, [client])


def _balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    recalls = [float(np.mean(y_pred[y_true == c] == c)) for c in (0, 1)]
    return float(np.mean(recalls))


def _fit_and_score(setup: MiaSetup, shadow_stage_epochs: int, target_stage_epochs: int, l2_lambda: float,
                   split_point: int, rng: RngStream):
    for name in ("shadow_in", "shadow_out", "target_in", "target_out"):
        if len(getattr(setup, name)) < 2:
            raise ValueError(f"{name} needs at least 2 samples")
    if shadow_stage_epochs < 0 or target_stage_epochs < 0:
        raise ValueError("training stages must be non-negative")
    shadow = train_split_run(setup, setup.shadow_in, shadow_stage_epochs, l2_lambda, split_point, rng.child("shadow"))
    target = train_split_run(setup, setup.target_in, target_stage_epochs, l2_lambda, split_point, rng.child("target"))

    f_train = np.concatenate([membership_features(shadow, setup.shadow_in), membership_features(shadow, setup.shadow_out)])
    y_train = np.r_[np.ones(len(setup.shadow_in), int), np.zeros(len(setup.shadow_out), int)]
    f_test = np.concatenate([membership_features(target, setup.target_in), membership_features(target, setup.target_out)])
    y_test = np.r_[np.ones(len(setup.target_in), int), np.zeros(len(setup.target_out), int)]
    scaler = StandardScaler().fit(f_train)
    clf = LogisticRegression(class_weight="balanced").fit(scaler.transform(f_train), y_train)
    return clf.predict(scaler.transform(f_test)), y_test


def mia_evaluate(setup: MiaSetup, shadow_stage_epochs: int, target_stage_epochs: int, l2_lambda: float,
                 split_point: int, rng: RngStream | None = None, n_perm: int = 0) -> tuple[MiaResult, np.ndarray]:
    """Attack result plus accuracies under ``n_perm`` permutations of the target's membership labels.

    The models are trained once; the permutations only change the labels the
    predictions are graded against, giving the no-signal reference for the
    very same attack.
    """
    rng = rng or RngStream(0)
    pred, y_test = _fit_and_score(setup, shadow_stage_epochs, target_stage_epochs, l2_lambda, split_point, rng)
    gen = rng.child("shuffle").generator()
    null = np.array([_balanced_accuracy(gen.permutation(y_test), pred) for _ in range(n_perm)])
    result = MiaResult(_balanced_accuracy(y_test, pred), shadow_stage_epochs, target_stage_epochs, l2_lambda, split_point)
    return result, null


def mia_attack(setup: MiaSetup, shadow_stage_epochs: int, target_stage_epochs: int, l2_lambda: float,
               split_point: int, rng: RngStream | None = None, shuffle_membership: bool = False) -> MiaResult:
    """Shadow-model membership inference against a split-learning run.

    The attacker trains a shadow run for ``shadow_stage_epochs`` on its own
    member pool, fits a logistic classifier on (loss, max softmax, entropy)
    of shadow members vs non-members, then scores the target run (trained for
    ``target_stage_epochs``) on the target members vs non-members. Returns
    balanced accuracy. ``shuffle_membership`` grades against one random
    permutation of the membership labels instead (a null draw).
    """
    result, null = mia_evaluate(setup, shadow_stage_epochs, target_stage_epochs, l2_lambda, split_point, rng,
                                1 if shuffle_membership else 0)
    if shuffle_membership:
        result.accuracy = float(null[0])
    return result
