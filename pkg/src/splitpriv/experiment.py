"""Turn an ExperimentConfig into datasets, models, profiles and campaigns.

The CLI is a thin layer over these functions. Every random stream hangs off
``RngStream(config.seed)`` under a fixed name, so each step can be rerun on
its own and reproduce exactly what a full pipeline run would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitpriv import nn, protocol
from splitpriv.attacks import MiaSetup, mia_evaluate, unsplit_reconstruct
from splitpriv.config import ExperimentConfig, resolve
from splitpriv.data import Dataset, make_synthetic_dataset
from splitpriv.energy import DeviceParams, EnergyPowerProfile, build_energy_profile, read_profile
from splitpriv.fsim import fsim
from splitpriv.optimizer import OptimizerConfig, OptimizeResult, Scenario, optimize
from splitpriv.profiler import (AttackBudget, PrivacyLeakageTable, TableBuild, build_privacy_leakage_table,
                                compute_a_min, default_noise_grid, estimate_t_fsim)
from splitpriv.protocol import AttendanceSchedule, train_centralized, unit_noise
from splitpriv.rng import RngStream

logger = logging.getLogger(__name__)


def root_stream(cfg: ExperimentConfig) -> RngStream:
    return RngStream(cfg.seed)


def input_shape(cfg: ExperimentConfig) -> tuple:
    if cfg.data.kind == "mini-images":
        return (1, cfg.data.image_size, cfg.data.image_size)
    return (8,) if cfg.data.kind == "blobs" else (2,)


def public_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Server-side public data (train, test) used for profiling and the reference accuracy."""
    d = cfg.data
    (train,), test = make_synthetic_dataset(d.kind, d.n_class, d.public_size, 1, True, root_stream(cfg).child("public"),
                                            n_test=d.n_test, image_size=d.image_size, spread=d.spread)
    return train, test


def client_data(cfg: ExperimentConfig, n_clients: int | None = None, n_per_client: int | None = None,
                tag=()) -> tuple[list[Dataset], Dataset]:
    d = cfg.data
    n = cfg.clients.n if n_clients is None else n_clients
    per = d.n_per_client if n_per_client is None else n_per_client
    return make_synthetic_dataset(d.kind, d.n_class, per, n, d.iid, root_stream(cfg).child("clients", *tag),
                                  n_test=d.n_test, image_size=d.image_size, spread=d.spread)


def fresh_model(cfg: ExperimentConfig, name: str = "model") -> nn.LayeredModel:
    return nn.build_model(cfg.model.arch_dicts(), input_shape(cfg), root_stream(cfg).child(name))


def victim_model(cfg: ExperimentConfig, public: Dataset) -> nn.LayeredModel:
    """The model the server attacks while profiling: the architecture after brief public pre-training."""
    m = fresh_model(cfg, "victim")
    if cfg.privacy.victim_epochs > 0:
        train_centralized(m, public, cfg.privacy.victim_epochs, root_stream(cfg).child("victim-train"),
                          cfg.training.lr, cfg.training.batch_size)
    return m


def reference_model(cfg: ExperimentConfig, public: Dataset) -> nn.LayeredModel:
    m = fresh_model(cfg, "reference")
    if cfg.privacy.reference_epochs > 0:
        train_centralized(m, public, cfg.privacy.reference_epochs, root_stream(cfg).child("reference-train"),
                          cfg.training.lr, cfg.training.batch_size)
    return m


def batches_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_samples / batch_size))


def device_params(cfg: ExperimentConfig, i: int) -> DeviceParams:
    return DeviceParams(**cfg.clients.device_for(i).model_dump())


def energy_profiles(cfg: ExperimentConfig, base_dir: Path, n_clients: int | None = None,
                    n_per_client: int | None = None) -> list[EnergyPowerProfile]:
    """Per-client profiles: fixture files if configured, else the synthetic device model.

    With ``n_clients`` larger than the roster, device parameters are cloned
    cyclically from the roster.
    """
    n = cfg.clients.n if n_clients is None else n_clients
    per = cfg.data.n_per_client if n_per_client is None else n_per_client
    if cfg.clients.profile_files is not None:
        files = cfg.clients.profile_files
        return [read_profile(resolve(files[i % len(files)], base_dir)) for i in range(n)]
    arch = fresh_model(cfg)
    bpe = batches_per_epoch(per, cfg.training.batch_size)
    return [build_energy_profile(device_params(cfg, i % cfg.clients.n), arch, cfg.model.s_max,
                                 cfg.training.batch_size, bpe) for i in range(n)]


def attendance(cfg: ExperimentConfig, base_dir: Path) -> AttendanceSchedule | None:
    if cfg.clients.schedule is None:
        return None
    return AttendanceSchedule.load(resolve(cfg.clients.schedule, base_dir))


def attack_budget(cfg: ExperimentConfig) -> AttackBudget:
    p = cfg.privacy
    return AttackBudget(p.samples, p.iters, p.lr_x, p.lr_w, p.tv_weight, p.noise_aware, p.restarts)


def noise_grid(cfg: ExperimentConfig) -> np.ndarray:
    return default_noise_grid(cfg.privacy.noise_step, cfg.privacy.noise_max)


@dataclass
class PrivacyProfile:
    table: PrivacyLeakageTable
    a_ref: float
    a_min: float
    t_fsim: float
    t_fsim_flagged: bool
    cohorts: list
    measured: PrivacyLeakageTable  # cell means before the monotone envelope

    def reference_json(self, beta: float) -> dict:
        return {"A_ref": self.a_ref, "A_min": self.a_min, "beta": beta, "T_FSIM": self.t_fsim,
                "T_FSIM_flagged": self.t_fsim_flagged, "cohorts": self.cohorts}


def profile_privacy(cfg: ExperimentConfig) -> PrivacyProfile:
    """Privacy leakage table, reference accuracy and T_FSIM, all from public data."""
    public, public_test = public_data(cfg)
    ref = reference_model(cfg, public)
    measured = float(np.mean(nn.predict(ref, public_test.x) == public_test.y))
    a_ref = cfg.optimizer.a_ref if cfg.optimizer.a_ref is not None else measured
    auto = cfg.optimizer.t_fsim == "auto"
    build: TableBuild = build_privacy_leakage_table(
        victim_model(cfg, public), public, cfg.model.s_max, noise_grid(cfg), attack_budget(cfg),
        root_stream(cfg).child("privacy-table"), keep_reconstructions=auto, noise_family=cfg.training.noise_family,
        envelope=cfg.privacy.envelope)
    if auto:
        thr = estimate_t_fsim(build, ref, cfg.data.n_class, cfg.privacy.t_fsim_bins)
        t_fsim, flagged, cohorts = thr.threshold, thr.flagged, thr.cohorts
    else:
        t_fsim, flagged, cohorts = float(cfg.optimizer.t_fsim), False, []
    t = build.table
    measured = PrivacyLeakageTable(t.splits, t.sigmas, build.measured, t.converged)
    return PrivacyProfile(t, a_ref, compute_a_min(a_ref, cfg.optimizer.beta), t_fsim, flagged, cohorts, measured)


def optimizer_config(cfg: ExperimentConfig, a_ref: float, t_fsim: float) -> OptimizerConfig:
    o, t = cfg.optimizer, cfg.training
    return OptimizerConfig(beta=o.beta, a_ref=a_ref, t_fsim=t_fsim, max_rounds=o.max_rounds,
                           sigma_floor=o.sigma_floor, probe_epochs=o.probe_epochs, lr=t.lr,
                           batch_size=t.batch_size, aggregation_period=t.aggregation_period,
                           noise_family=t.noise_family)


def scenario(cfg: ExperimentConfig, profiles: list[EnergyPowerProfile], base_dir: Path,
             n_clients: int | None = None, n_per_client: int | None = None, tag=()) -> Scenario:
    n = cfg.clients.n if n_clients is None else n_clients
    datasets, test = client_data(cfg, n, n_per_client, tag)
    alphas = [cfg.clients.alphas[i % cfg.clients.n] for i in range(n)]
    schedule = attendance(cfg, base_dir) if n_clients is None else None
    return Scenario(cfg.model.arch_dicts(), input_shape(cfg), datasets, profiles, alphas, test, schedule)


def run_optimize(cfg: ExperimentConfig, table: PrivacyLeakageTable, profiles, a_ref: float, t_fsim: float,
                 base_dir: Path) -> OptimizeResult:
    sc = scenario(cfg, profiles, base_dir)
    return optimize(sc, table, optimizer_config(cfg, a_ref, t_fsim), root_stream(cfg).child("optimize"))


def run_train(cfg: ExperimentConfig, splits, sigmas, base_dir: Path) -> protocol.TrainingRecord:
    profiles = energy_profiles(cfg, base_dir)
    sc = scenario(cfg, profiles, base_dir)
    model = fresh_model(cfg)
    srv = protocol.ServerState(model, s_max=cfg.model.s_max, aggregation_period=cfg.training.aggregation_period)
    clients = [protocol.init_client(i, model, int(s), sc.datasets[i], float(sig), sc.alphas[i], profiles[i])
               for i, (s, sig) in enumerate(zip(splits, sigmas))]
    t = cfg.training
    return protocol.run_training(clients, srv, sc.schedule, t.epochs, root_stream(cfg).child("train"), sc.test,
                                 t.lr, t.batch_size, t.l2_lambda, t.noise_family)


def fsim_total(table: PrivacyLeakageTable, splits, sigmas) -> float:
    return float(sum(table.lookup(int(s), float(sig)) for s, sig in zip(splits, sigmas)))


def scaling_campaign(cfg: ExperimentConfig, client_counts, table: PrivacyLeakageTable, a_ref: float,
                     t_fsim: float, base_dir: Path) -> list[dict]:
    """Optimize-and-train once per client count with a fixed accuracy threshold.

    The training data (``scaling.total_samples``) is shared out equally, so
    more clients means less data each; roster alphas and devices are cloned
    cyclically.
    """
    rows = []
    for n in client_counts:
        if n < 1:
            raise ValueError("client counts must be >= 1")
        per = max(1, cfg.scaling.total_samples // n)
        profiles = energy_profiles(cfg, base_dir, n, per)
        sc = scenario(cfg, profiles, base_dir, n, per, tag=("scaling", n))
        res = optimize(sc, table, optimizer_config(cfg, a_ref, t_fsim), root_stream(cfg).child("scaling", n))
        total = fsim_total(table, res.splits, res.sigmas)
        rows.append({"N": n, "accuracy": res.accuracy, "FSIM_total": total, "FSIM_per_client": total / n,
                     "rounds": res.rounds, "converged": res.converged,
                     "E_mean": res.trace[-1]["E_mean"] if res.trace else 0.0})
        logger.info("scaling N=%d: acc=%.4f FSIM_total=%.4f", n, res.accuracy, total)
    return rows


def reconstruct_records(cfg: ExperimentConfig) -> list[dict]:
    """Attack the victim model at the configured (s, sigma) points; one record per point."""
    rc = cfg.attack.reconstruct
    public, _ = public_data(cfg)
    victim = victim_model(cfg, public)
    root = root_stream(cfg).child("attack-reconstruct")
    pick = root.child("samples").generator().choice(len(public), size=min(rc.samples, len(public)), replace=False)
    x = public.x[np.sort(pick)]
    splits = rc.split_points or list(range(1, cfg.model.s_max + 1))
    p = cfg.privacy
    out = []
    for s in splits:
        if not 1 <= s < victim.k:
            raise ValueError(f"split point {s} outside 1..{victim.k - 1}")
        prefix, _ = nn.split_model(victim, s, copy=True)
        z, _ = nn.forward(prefix, x, train=True)
        u = unit_noise(root.child("noise", s).generator(), z.shape, cfg.training.noise_family)
        for sigma in rc.sigmas:
            res = unsplit_reconstruct(z + sigma * u, prefix, rc.iters, (p.lr_x, p.lr_w), root.child("attack", s),
                                      tv_weight=p.tv_weight, noise_sigma=float(sigma) if p.noise_aware else 0.0,
                                      noise_family=cfg.training.noise_family, restarts=p.restarts)
            scores = np.array([fsim(a, b) for a, b in zip(x, res.x_hat)])
            out.append({"s": int(s), "sigma": float(sigma), "fsim_mean": float(scores.mean()),
                        "fsim_std": float(scores.std()), "n": int(len(scores)), "converged": res.converged})
    return out


def mia_setup(cfg: ExperimentConfig) -> MiaSetup:
    m = cfg.attack.mia
    size = cfg.data.image_size
    pools, _ = make_synthetic_dataset(m.kind, m.n_class, m.pool_size, 4, True, root_stream(cfg).child("mia-data"),
                                      n_test=2, image_size=size, spread=m.spread)
    shape = (1, size, size) if m.kind == "mini-images" else ((8,) if m.kind == "blobs" else (2,))
    return MiaSetup([layer.as_dict() for layer in m.arch], shape, *pools, lr=m.lr, batch_size=m.batch_size)


def mia_records(cfg: ExperimentConfig) -> list[dict]:
    m = cfg.attack.mia
    setup = mia_setup(cfg)
    root = root_stream(cfg).child("attack-mia")
    out = []
    for lam in m.l2_lambdas:
        for shadow, target in m.stages:
            rng = root.child(lam, shadow, target)
            n_perm = m.null_permutations if shadow == target else 0
            result, null = mia_evaluate(setup, shadow, target, lam, m.split_point, rng, n_perm)
            out.append({"kind": "attack", **result.to_json()})
            if n_perm:
                out.append({"kind": "null", "shadow_stage": shadow, "target_stage": target, "lambda": lam,
                            "split_point": m.split_point, "accuracy": float(null.mean()),
                            "accuracy_std": float(null.std()), "permutations": int(len(null))})
    return out
