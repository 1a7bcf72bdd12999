"""Command-line drivers: search, decode, export-dot, retrain, oracle, gap-report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .decode import ArchitectureTopology, DecodeError, argmax_decode, gap_metric, shortest_path_decode
from .engine import ConfigError, DivergenceError, SearchConfig, retrain, run_search
from .oracle import run_suite
from .relax import ArchParams, relax_all
from .space import SearchSpace, SpaceConfig
from .supernet import InfeasibleTopologyError

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("toposearch")


class ValidationError(RuntimeError):
    pass


class DirectoryLockedError(RuntimeError):
    pass


def version_string() -> str:
    v = __version__
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            v += f" ({desc.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return v


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    seed: int | None
    version: str
    out_dir: str
    started: str
    config: dict | None = None
    finished: str | None = None
    status: str = "running"
    extra: dict = field(default_factory=dict)

    def path(self) -> Path:
        return Path(self.out_dir) / f"manifest_{self.command}.json"

    def write(self):
        self.path().write_text(json.dumps(asdict(self), indent=1))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@contextmanager
def run_dir(out: Path, command: str, args, argv, config: SearchConfig | None = None):
    """Create and lock ``out``, write the manifest before any work, finalize it after."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DirectoryLockedError(f"{out} is in use by another process (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    man = RunManifest(command, list(argv), getattr(args, "config", None), getattr(args, "seed", None),
                      version_string(), str(out), _now(), config.to_json() if config else None)
    man.write()
    try:
        yield man
        man.status = "ok"
    except BaseException as exc:
        man.status = f"error: {type(exc).__name__}: {exc}"
        raise
    finally:
        man.finished = _now()
        man.write()
        lock.unlink(missing_ok=True)


def load_config(args) -> SearchConfig:
    """JSON config file (optional) with command-line overrides applied on top."""
    obj = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"config file {path} not found")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config", "top level must be a JSON object")
    for name in ("sigma", "seed", "lam"):
        v = getattr(args, name, None)
        if v is not None:
            obj[name] = v
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        try:
            obj[key] = json.loads(raw)
        except json.JSONDecodeError:
            obj[key] = raw
    return SearchConfig.from_json(obj)


# commands -------------------------------------------------------------------------------


def cmd_search(args, argv) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    with run_dir(out, "search", args, argv, cfg) as man:
        res = run_search(cfg, out, resume=args.resume)
        man.extra = {"decoded_m_ratio": res.decoded_m_ratio, "I": list(res.topology.I),
                     "arch_updates": len(res.gap_trace), "wall_clock": res.wall_clock}
    print(json.dumps(man.extra))
    return EXIT_OK


def _space_from_params(obj: dict) -> SpaceConfig:
    sp = obj.get("space")
    if sp is None:
        raise ValidationError("architecture parameters carry no 'space' record (L, D, N)")
    return SpaceConfig(int(sp["L"]), int(sp["D"]), int(sp["N"]))


def cmd_decode(args, argv) -> int:
    obj = json.loads(Path(args.arch_params).read_text())
    params = ArchParams.from_json(obj)
    cfg = _space_from_params(obj)
    params.check(cfg)
    space = SearchSpace(cfg)
    out = Path(args.out)
    with run_dir(out, "decode", args, argv) as man:
        rs = relax_all(params, space)
        topo = shortest_path_decode(rs.eta, space, rs.alpha)
        topo.save(out / "architecture.json")
        man.extra = {"I": list(topo.I), "G": gap_metric(argmax_decode(rs.eta), topo.I, space),
                     "total_cost": topo.total_cost}
    print(json.dumps(man.extra))
    return EXIT_OK


def _load_topology(path) -> tuple[ArchitectureTopology, SearchSpace]:
    try:
        topo = ArchitectureTopology.load(path)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed architecture: {exc}") from None
    space = SearchSpace(SpaceConfig(topo.L, topo.D))
    if not space.is_feasible_sequence(topo.I):
        raise ValidationError(f"{path}: pattern sequence {topo.I} is not feasible")
    return topo, space


def cmd_export_dot(args, argv) -> int:
    topo, space = _load_topology(args.arch)
    out = Path(args.out) if args.out else Path(args.arch).parent
    with run_dir(out, "export-dot", args, argv) as man:
        dot = topo.to_dot(space)
        target = out / (Path(args.arch).stem + ".dot")
        target.write_text(dot)
        man.extra = {"dot": str(target), "nodes": len(topo.active_nodes(space))}
    print(dot, end="")
    return EXIT_OK


def cmd_retrain(args, argv) -> int:
    topo, _ = _load_topology(args.arch)
    cfg = load_config(args)
    if (cfg.L, cfg.D) != (topo.L, topo.D):
        cfg = cfg.replace(L=topo.L, D=topo.D, milestones=())
    out = Path(args.out) if args.out else Path(args.arch).parent
    with run_dir(out, "retrain", args, argv, cfg) as man:
        metrics = retrain(topo, cfg)
        (out / "retrain_metrics.json").write_text(json.dumps(metrics, indent=1))
        man.extra = metrics
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    out = Path(args.out)
    with run_dir(out, "oracle", args, argv) as man:
        reports = run_suite(args.suite, args.seed or 0)
        for r in reports:
            print(r.line())
            for f in r.failures[:10]:
                print("   ", f)
        man.extra = {r.suite: {"cases": r.cases, "failures": len(r.failures), "max_err": r.max_err} for r in reports}
        ok = all(r.passed for r in reports)
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_gap_report(args, argv) -> int:
    run = Path(args.run)
    src = run / "gap_trace.csv"
    if not src.is_file():
        raise ValidationError(f"{run} holds no gap_trace.csv; is it a search run directory?")
    with src.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["iter", "G"]:
        raise ValidationError(f"{src}: unexpected header {rows[:1]}")
    trace = [int(r[1]) for r in rows[1:]]
    out = Path(args.out) if args.out else run
    with run_dir(out, "gap-report", args, argv) as man:
        if out.resolve() != run.resolve():
            with (out / "gap_trace.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iter", "G"])
                w.writerows([i + 1, g] for i, g in enumerate(trace))
        tail = trace[len(trace) - max(1, len(trace) // 4):] if trace else []
        man.extra = {"arch_updates": len(trace), "final_G": trace[-1] if trace else None,
                     "late_mean_G": float(np.mean(tail)) if tail else None}
    print(json.dumps(man.extra))
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toposearch", description="Differentiable topology search with feasible decoding.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default JSON config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def config_flags(sp, seed=True):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
        if seed:
            sp.add_argument("--seed", type=int)

    s = sub.add_parser("search", help="run the bi-level architecture search")
    config_flags(s)
    s.add_argument("--sigma", type=float)
    s.add_argument("--lam", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("decode", help="decode architecture parameters into a feasible topology")
    d.add_argument("--arch-params", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    x = sub.add_parser("export-dot", help="write a Graphviz DOT rendering of an architecture")
    x.add_argument("--arch", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_dot)

    r = sub.add_parser("retrain", help="train a decoded architecture from scratch and report Dice")
    r.add_argument("--arch", required=True)
    config_flags(r)
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrain)

    o = sub.add_parser("oracle", help="run brute-force reference suites")
    o.add_argument("--suite", default="all", choices=["patterns", "decode", "flow", "all"])
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=".")
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("gap-report", help="emit the discretization-gap trace of a search run")
    g.add_argument("--run", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gap_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        print(json.dumps(SearchConfig().to_json(), indent=1))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, argv)
    except (ConfigError, DirectoryLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, InfeasibleTopologyError, DecodeError, ValueError, KeyError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
