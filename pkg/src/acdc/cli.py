"""Command line: ``acdc run | synth | gradcheck | report``.

Exit codes: 0 success, 1 usage, 2 runtime failure, 3 failed verification.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import shutil
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checks
from .dataio import (
    DataFormatError,
    DatasetManifest,
    load_stream,
    read_checkpoint,
    read_metrics,
    write_checkpoint,
    write_metrics,
    write_stream,
)
from .drift import SynthSpec, drift_stream, make_schedule, synth_arrays
from .net import AblationFlags, Hyper, init_model
from .stream import MetricsTrace, RunError, RunState, StreamConfig, prequential_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    source: str = ""
    target: str = ""
    out: str = "run"
    name: str = ""
    window: int = 1000
    epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.95
    alpha1: float = 1.25
    alpha2: float = 0.75
    noise: float = 0.10
    model_seed: int = 0
    stream_seed: int = 0
    daa: bool = True
    evolution: bool = True
    single_node_dae: bool = False
    daa_signals_disc: bool = True
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.window < 2:
            raise UsageError("window must be >= 2")
        for k in ("lr", "alpha1", "alpha2"):
            if getattr(self, k) <= 0:
                raise UsageError(f"{k} must be positive")
        if not 0 <= self.momentum < 1:
            raise UsageError("momentum must lie in [0, 1)")
        if not 0 <= self.noise < 1:
            raise UsageError("noise must lie in [0, 1)")
        if not self.source or not self.target:
            raise UsageError("both a source and a target manifest are required")

    def flags(self) -> AblationFlags:
        return AblationFlags(daa_enabled=self.daa, evolution_enabled=self.evolution,
                             dae_starts_single_node=self.single_node_dae,
                             daa_signals_disc=self.daa_signals_disc)

    def hyper(self) -> Hyper:
        return Hyper(lr=self.lr, momentum=self.momentum, alpha1=self.alpha1,
                     alpha2=self.alpha2, noise=self.noise)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw, kind: str):
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return dict(parser["run"])


def resolve_config(file_values: dict, cli_values: dict) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    merged = {}
    for source in (file_values, cli_values):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in kinds:
                raise UsageError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, raw, kinds[key])
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_flag(p, name: str, help: str) -> None:
    dest = name.replace("-", "_")
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="acdc", description="Online cross-domain adaptation on two streams.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="prequential run over a source and a target stream")
    run.add_argument("--config", help="flat key = value file")
    run.add_argument("--source", help="source manifest (JSON)")
    run.add_argument("--target", help="target manifest (JSON)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--name", help="experiment name used by report")
    run.add_argument("--window", type=int, help="samples per window")
    run.add_argument("--epochs", type=int, help="internal epochs per window")
    run.add_argument("--lr", type=float)
    run.add_argument("--momentum", type=float)
    run.add_argument("--alpha1", type=float)
    run.add_argument("--alpha2", type=float)
    run.add_argument("--noise", type=float, help="masking fraction")
    run.add_argument("--model-seed", dest="model_seed", type=int)
    run.add_argument("--stream-seed", dest="stream_seed", type=int)
    _bool_flag(run, "daa", "domain classifier on (--no-daa to ablate)")
    _bool_flag(run, "evolution", "grow/prune on (--no-evolution to ablate)")
    _bool_flag(run, "single-node-dae", "DAE starts with one node")
    _bool_flag(run, "daa-signals-disc", "a DAA grow also grows DISC")
    run.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                     help="checkpoint every N windows (0: final only)")
    run.add_argument("--resume", help="checkpoint to continue from")
    run.add_argument("--max-windows", dest="max_windows", type=int,
                     help="stop after this many windows (resume later)")

    syn = sub.add_parser("synth", help="write a drifting two-domain benchmark")
    syn.add_argument("--out", required=True)
    syn.add_argument("--u", type=int, default=10)
    syn.add_argument("--m", type=int, default=3)
    syn.add_argument("--n-source", dest="n_source", type=int, default=20000)
    syn.add_argument("--n-target", dest="n_target", type=int, default=8000)
    syn.add_argument("--separation", type=float, default=2.0)
    syn.add_argument("--spread", type=float, default=1.0, help="class noise std")
    syn.add_argument("--shift", type=float, default=3.0)
    syn.add_argument("--rotation", type=float, default=0.0)
    syn.add_argument("--squash", type=float, default=1.0, help="0 keeps raw features")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--z-source", dest="z_source", type=int, default=5)
    syn.add_argument("--z-target", dest="z_target", type=int, default=7)
    syn.add_argument("--drift-seed", dest="drift_seed", type=int, default=0)
    syn.add_argument("--format", choices=("csv", "packed"), default="csv")

    gc = sub.add_parser("gradcheck", help="gradient, reversal and probit self-checks")
    gc.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("report", help="mean +- std over run directories or metrics files")
    rep.add_argument("paths", nargs="*")
    return ap


# --------------------------------------------------------------------------
# commands


def _summary(cfg: RunConfig, trace: MetricsTrace, model, seconds: float) -> str:
    final = trace.rows[-1] if trace.rows else None
    acc = final.target_acc_cum if final else math.nan
    r = model.widths
    lines = [
        f"experiment        {cfg.name or Path(cfg.out).name}",
        f"windows           {len(trace)}",
        f"final target acc  {acc:.4f} (cumulative)",
        f"final widths      dae={r[0]} daa={r[1]} disc={r[2]}",
        f"total time        {seconds:.1f} s",
        "flags             " + " ".join(f"{k}={v}" for k, v in asdict(cfg.flags()).items()),
    ]
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cli_values = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    cfg = resolve_config(file_values, cli_values)

    src_man = DatasetManifest.load(cfg.source)
    tgt_man = DatasetManifest.load(cfg.target)
    if src_man.role != "source" or tgt_man.role != "target":
        raise UsageError("manifest roles must be source then target")
    if (src_man.u, src_man.m) != (tgt_man.u, tgt_man.m):
        raise DataFormatError("source and target disagree on feature or class count")

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    for tag, path in (("source", cfg.source), ("target", cfg.target)):
        if Path(path).resolve() != (out / f"{tag}.manifest.json").resolve():
            shutil.copyfile(path, out / f"{tag}.manifest.json")

    prior = MetricsTrace()
    state = None
    if args.resume:
        model, state, _ = read_checkpoint(args.resume)
        if state is None:
            raise DataFormatError(f"{args.resume}: checkpoint holds no run state")
        if (out / "metrics.csv").exists():
            for row in read_metrics(out / "metrics.csv").rows:
                if row.window < state.window:
                    prior.append(row)
    else:
        model = init_model(src_man.u, src_man.m, cfg.flags(), cfg.hyper(), seed=cfg.model_seed)
        state = RunState.fresh(src_man.n, tgt_man.n, cfg.stream_seed)

    ckpt = out / "checkpoint.bin"

    def on_window(model, run_state, row):
        if cfg.checkpoint_every and run_state.window % cfg.checkpoint_every == 0:
            write_checkpoint(ckpt, model, run_state)

    t0 = time.perf_counter()
    trace = prequential_run(
        model, (load_stream(src_man), load_stream(tgt_man)),
        StreamConfig(window=cfg.window, epochs=cfg.epochs, seed=cfg.stream_seed),
        state=state, totals=(src_man.n, tgt_man.n), on_window=on_window,
        max_windows=args.max_windows,
    )
    seconds = time.perf_counter() - t0
    for row in trace.rows:
        prior.append(row)

    write_metrics(prior, out / "metrics.csv", out / "timings.csv")
    write_checkpoint(ckpt, model, state)
    summary = _summary(cfg, prior, model, seconds)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.z_source < 1 or args.z_target < 1:
        raise UsageError("concept counts must be >= 1")
    spec = SynthSpec(u=args.u, m=args.m, n_source=args.n_source, n_target=args.n_target,
                     separation=args.separation, noise=args.spread, shift=args.shift,
                     rotation=args.rotation, squash=args.squash or None, seed=args.seed)
    X_s, y_s, X_t, y_t = synth_arrays(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if args.format == "csv" else "bin"
    for role, X, y, z, dseed in (("source", X_s, y_s, args.z_source, args.drift_seed),
                                 ("target", X_t, y_t, args.z_target, args.drift_seed + 1)):
        schedule = make_schedule(spec.u, z, len(X), seed=dseed)
        X = drift_stream(X, schedule)
        fname = f"{role}.{ext}"
        write_stream(out / fname, X, y, args.format)
        man = DatasetManifest(name=f"synth-{role}", u=spec.u, m=spec.m, role=role,
                              path=fname, format=args.format, labeled=True, n=len(X),
                              provenance={"synth": spec.to_dict(),
                                          "drift": schedule.to_dict()})
        man.save(out / f"{role}.json")
        print(f"wrote {out / fname} ({len(X)} samples, {z} concepts)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_all(args.seed)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def _experiment_name(metrics_path: Path) -> str:
    cfg = metrics_path.parent / "config.json"
    if cfg.exists():
        name = json.loads(cfg.read_text()).get("name")
        if name:
            return name
    return metrics_path.parent.name


def aggregate(paths: Sequence[str]) -> List[dict]:
    """One row per experiment: mean and std of final cumulative target
    accuracy and final widths over its runs (seeds)."""
    if not paths:
        raise UsageError("no input traces given")
    groups: dict = {}
    for p in paths:
        p = Path(p)
        metrics = p / "metrics.csv" if p.is_dir() else p
        trace = read_metrics(metrics)
        if not trace.rows:
            raise DataFormatError(f"{metrics}: empty trace")
        last = trace.rows[-1]
        groups.setdefault(_experiment_name(metrics), []).append(
            (last.target_acc_cum, last.r_dae, last.r_daa, last.r_disc))
    rows = []
    for name, vals in groups.items():
        arr = np.array(vals, dtype=np.float64)
        rows.append({"experiment": name, "runs": len(vals),
                     "acc_mean": float(arr[:, 0].mean()), "acc_std": float(arr[:, 0].std()),
                     "widths": tuple(float(v) for v in arr[:, 1:].mean(axis=0))})
    return rows


def cmd_report(args) -> int:
    rows = aggregate(args.paths)
    width = max(len("experiment"), *(len(r["experiment"]) for r in rows))
    print(f"{'experiment':<{width}}  runs  target acc (%)    widths dae/daa/disc")
    for r in rows:
        w = "/".join(f"{v:.1f}" for v in r["widths"])
        print(f"{r['experiment']:<{width}}  {r['runs']:>4}  "
              f"{100 * r['acc_mean']:6.2f} +- {100 * r['acc_std']:5.2f}    {w}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "gradcheck": cmd_gradcheck,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"acdc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, DataFormatError, OSError, ValueError, ArithmeticError) as exc:
        print(f"acdc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
