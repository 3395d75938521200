"""Command-line front end.

    splitpriv [--config PATH] [--seed N] [--out DIR] [--override key=value ...] COMMAND

Commands and the files they write under ``--out``:

    profile privacy    privacy_table.tsv, privacy_table_measured.tsv, reference.json
    profile energy     energy_client_<i>.tsv
    optimize           optimize_trace.jsonl, assignment.json, noise_table.tsv
    train              training_record.jsonl
    attack reconstruct reconstruct.jsonl
    attack mia         mia.jsonl
    report             report.tsv, report_clients.tsv
    scaling            scaling.tsv
    print-config       (stdout) the effective configuration with all defaults

Every file starts with a provenance block (tool version, config hash, seed)
and contains no timestamps, so reruns with the same inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from splitpriv import __version__
from splitpriv import experiment as ex
from splitpriv.config import ExperimentConfig, load_config
from splitpriv.energy import write_profile
from splitpriv.errors import ConfigError, DependencyError, InfeasibleClientError
from splitpriv.profiler import PrivacyLeakageTable
from splitpriv.storage import header_lines, read_jsonl, write_jsonl

logger = logging.getLogger("splitpriv")

PRIVACY_TABLE = "privacy_table.tsv"
REFERENCE = "reference.json"
ASSIGNMENT = "assignment.json"
TRAINING_RECORD = "training_record.jsonl"


def provenance(cfg: ExperimentConfig) -> dict:
    return {"tool": "splitpriv", "tool_version": __version__, "config_hash": cfg.digest(), "seed": cfg.seed}


def _write_json(path: Path, obj: dict, header: dict) -> None:
    path.write_text(json.dumps({"header": header, **obj}, sort_keys=True, indent=1) + "\n")


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name} in {path.parent} (run `splitpriv {producer}` first)")
    return path


def _read_json(path: Path, producer: str) -> dict:
    return json.loads(_need(path, producer).read_text())


def _energy_files(out: Path, n: int) -> list[Path]:
    return [_need(out / f"energy_client_{i}.tsv", "profile energy") for i in range(n)]


def _write_tsv(path: Path, columns: list[str], rows: list[list], header: dict) -> None:
    def fmt(v):
        return repr(float(v)) if isinstance(v, float) else str(v)
    lines = header_lines(header) + ["\t".join(columns)] + ["\t".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_profile(args, cfg, base, out):
    head = provenance(cfg)
    if args.what == "privacy":
        prof = ex.profile_privacy(cfg)
        prof.table.write(out / PRIVACY_TABLE, head)
        prof.measured.write(out / "privacy_table_measured.tsv", head)
        _write_json(out / REFERENCE, prof.reference_json(cfg.optimizer.beta), head)
        logger.info("A_ref=%.4f A_min=%.4f T_FSIM=%.4f", prof.a_ref, prof.a_min, prof.t_fsim)
    else:
        for i, p in enumerate(ex.energy_profiles(cfg, base)):
            write_profile(out / f"energy_client_{i}.tsv", p, head)


def cmd_optimize(args, cfg, base, out):
    from splitpriv.energy import read_profile

    table = PrivacyLeakageTable.read(_need(out / PRIVACY_TABLE, "profile privacy"))
    ref = _read_json(out / REFERENCE, "profile privacy")
    profiles = [read_profile(p) for p in _energy_files(out, cfg.clients.n)]
    res = ex.run_optimize(cfg, table, profiles, ref["A_ref"], ref["T_FSIM"], base)
    head = provenance(cfg)
    write_jsonl(out / "optimize_trace.jsonl", res.trace, head)
    res.table.write(out / "noise_table.tsv", head)
    _write_json(out / ASSIGNMENT, {"splits": res.splits, "sigmas": res.sigmas, "rounds": res.rounds,
                                   "converged": res.converged, "accuracy": res.accuracy,
                                   "A_min": ref["A_min"]}, head)
    if not res.converged:
        logger.warning("accuracy %.4f did not reach A_min=%.4f in %d rounds; best-seen assignment written",
                       res.accuracy, ref["A_min"], res.rounds)


def _assignment(cfg, out) -> tuple[list[int], list[float]]:
    t = cfg.training
    if t.split_points is not None:
        return t.split_points, t.sigmas if t.sigmas is not None else [0.0] * cfg.clients.n
    a = _read_json(out / ASSIGNMENT, "optimize")
    return a["splits"], a["sigmas"]


def cmd_train(args, cfg, base, out):
    splits, sigmas = _assignment(cfg, out)
    record = ex.run_train(cfg, splits, sigmas, base)
    write_jsonl(out / TRAINING_RECORD, record.to_records(), provenance(cfg))


def cmd_attack(args, cfg, base, out):
    head = provenance(cfg)
    if args.what == "reconstruct":
        write_jsonl(out / "reconstruct.jsonl", ex.reconstruct_records(cfg), head)
    else:
        write_jsonl(out / "mia.jsonl", ex.mia_records(cfg), head)


def report_rows(records: list[dict], table: PrivacyLeakageTable, splits, sigmas):
    """Summary (accuracy, FSIM_total, mean per-epoch energy) and per-client rows from raw records."""
    n_epochs = len(records)
    per_client = {}
    for rec in records:
        for cid, v in rec["clients"].items():
            per_client[int(cid)] = per_client.get(int(cid), 0.0) + v["comm_J"] + v["comp_J"] + v["idle_J"]
    fsims = [table.lookup(int(s), float(sig)) for s, sig in zip(splits, sigmas)]
    total_energy = sum(per_client.values())
    summary = {"accuracy": records[-1]["A_t"] if records else float("nan"), "FSIM_total": float(sum(fsims)),
               "E_mean": total_energy / n_epochs if n_epochs else 0.0}
    clients = [[i, int(s), float(sig), float(f), float(per_client.get(i, 0.0))]
               for i, (s, sig, f) in enumerate(zip(splits, sigmas, fsims))]
    return summary, clients


def cmd_report(args, cfg, base, out):
    table = PrivacyLeakageTable.read(_need(out / PRIVACY_TABLE, "profile privacy"))
    _, records = read_jsonl(_need(out / TRAINING_RECORD, "train"))
    splits, sigmas = _assignment(cfg, out)
    summary, clients = report_rows(records, table, splits, sigmas)
    head = provenance(cfg)
    _write_tsv(out / "report.tsv", ["run", "accuracy", "FSIM_total", "E_mean"],
               [["split-training", summary["accuracy"], summary["FSIM_total"], summary["E_mean"]]], head)
    _write_tsv(out / "report_clients.tsv", ["client", "s", "sigma", "fsim", "energy_J"], clients, head)


def cmd_scaling(args, cfg, base, out):
    table = PrivacyLeakageTable.read(_need(out / PRIVACY_TABLE, "profile privacy"))
    ref = _read_json(out / REFERENCE, "profile privacy")
    rows = ex.scaling_campaign(cfg, cfg.scaling.client_counts, table, ref["A_ref"], ref["T_FSIM"], base)
    cols = ["N", "accuracy", "FSIM_total", "FSIM_per_client", "rounds", "converged", "E_mean"]
    _write_tsv(out / "scaling.tsv", cols, [[r[c] for c in cols] for r in rows], provenance(cfg))


def cmd_print_config(args, cfg, base, out):
    sys.stdout.write(f"# config_hash: {cfg.digest()}\n")
    sys.stdout.write(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))


# ---------------------------------------------------------------------------


def _common_flags(parser: argparse.ArgumentParser, top: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the command; the copies on the
    # subcommands must not reset values given before it, hence SUPPRESS there
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", type=Path, default=d(None), help="YAML experiment config (defaults when omitted)")
    parser.add_argument("--seed", type=int, default=d(None), help="root seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=d(Path("runs")), help="artifact directory")
    parser.add_argument("--override", action="append", default=d([]), metavar="KEY=VALUE",
                        help="dotted config path and YAML value, repeatable")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(argparse.ArgumentParser(add_help=False), top=False)
    parser = _common_flags(argparse.ArgumentParser(prog="splitpriv", description=__doc__.split("\n\n")[0]), top=True)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("profile", parents=[common], help="build the privacy or energy tables")
    p.add_argument("what", choices=["privacy", "energy"])
    p.set_defaults(func=cmd_profile)
    sub.add_parser("optimize", parents=[common], help="assign split points and noise levels").set_defaults(func=cmd_optimize)
    sub.add_parser("train", parents=[common], help="run split training with the assignment").set_defaults(func=cmd_train)
    p = sub.add_parser("attack", parents=[common], help="reconstruction or membership inference")
    p.add_argument("what", choices=["reconstruct", "mia"])
    p.set_defaults(func=cmd_attack)
    sub.add_parser("report", parents=[common], help="summarise a training run").set_defaults(func=cmd_report)
    sub.add_parser("scaling", parents=[common], help="repeat optimize+train over client counts").set_defaults(func=cmd_scaling)
    sub.add_parser("print-config", parents=[common], help="print the effective config").set_defaults(func=cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg, base = load_config(args.config, overrides)
        if args.command != "print-config":
            args.out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, base, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except InfeasibleClientError as exc:
        print(f"infeasible client {exc.client_id}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
