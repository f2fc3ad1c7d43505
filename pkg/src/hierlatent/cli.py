"""Command-line front end: generate -> recover/train -> eval, plus e2e trials.

Every command writes into a run directory (``--out``, or a subdirectory of
``$HIERLATENT_OUT`` named after the command) and finishes with
``manifest.json``: the argv, resolved settings, input and output hashes,
wall time and library versions.  ``replay`` re-executes a manifest into a
fresh directory and checks that the primary outputs are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dsep import ExactOracle
from .errors import (DivergenceError, HierLatentError, ModelViolationError,
                     OracleInconsistencyError, QueryBudgetExceeded)
from .figures import BUILTINS, builtin
from .graph import HierGraph, best_perm_shd_f1, random_graph, read_graph, write_graph
from .learner import TrainConfig, read_config, save_checkpoint, train
from .rank import DEFAULT_TOL, CROSSCOV_TOL, RegressorConfig, StatisticalOracle
from .recover import DEFAULT_QUERY_BUDGET, DEFAULT_SUBSET_CAP, RecoveryTrace, recover_full
from .sem import SemSpec, read_dataset, sample_sem, write_dataset

OUT_ENV = "HIERLATENT_OUT"
ACTIVATION_ALIASES = {"leakyrelu": "leakyrelu_0.2", "tanh": "tanh", "linear": "linear"}
ACTIVATION_LABELS = {"leakyrelu_0.2": "LeakyReLU", "tanh": "Tanh", "linear": "Linear"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Run directories and manifests
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import networkx
    import sklearn
    return {"artifact": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scikit-learn": sklearn.__version__,
            "networkx": networkx.__version__}


class Run:
    """Collects what a command read and wrote, then emits the manifest."""

    def __init__(self, command: str, argv, out: Path):
        self.command = command
        self.argv = list(argv)
        self.out = out
        self.settings: dict = {}
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.primary: list = []
        self.extra: dict = {}
        self.started = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def read(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def wrote(self, name: str, primary: bool = False):
        self.outputs[name] = sha256_file(self.path(name))
        if primary:
            self.primary.append(name)

    def finish(self, **extra):
        manifest = {"command": self.command, "argv": self.argv, "settings": self.settings,
                    "inputs": self.inputs, "outputs": self.outputs,
                    "primary_outputs": self.primary, "cwd": os.getcwd(),
                    "wall_time_seconds": time.perf_counter() - self.started,
                    "versions": _versions(), **self.extra, **extra}
        self.path("manifest.json").write_text(
            json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUT_ENV)
    if not base:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    return Path(base) / args.command


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _parse_set(text: str) -> list:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated indices, got {text!r}") from None
    if not vals:
        raise UsageError("index set is empty")
    return vals


def _sem_spec(args) -> SemSpec:
    return SemSpec(activation=ACTIVATION_ALIASES[args.activation], samples=args.samples,
                   seed=args.seed)


def _train_config(args) -> TrainConfig:
    cfg = read_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "restarts", "seed")
                 if getattr(args, k, None) is not None}
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _stat_oracle(data, args, seed) -> StatisticalOracle:
    return StatisticalOracle(data, RegressorConfig(seed=seed), tol=args.rank_tol,
                             n_points=args.rank_points, mode=args.rank_mode)


def _rank_settings(args) -> dict:
    tol = args.rank_tol
    if tol is None:
        tol = DEFAULT_TOL if args.rank_mode == "jacobian" else CROSSCOV_TOL
    return {"rank_tol": tol, "rank_points": args.rank_points, "rank_mode": args.rank_mode}


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _graph_source(args, run: Run):
    sources = [s for s in (args.builtin, args.graph, args.random) if s]
    if len(sources) != 1:
        raise UsageError("give exactly one of --builtin, --graph, --random")
    if args.builtin:
        return builtin(args.builtin), {"builtin": args.builtin}
    if args.graph:
        run.read(args.graph)
        return read_graph(args.graph), {"graph_file": str(args.graph)}
    try:
        n, layers = (int(t) for t in args.random.split(","))
    except ValueError:
        raise UsageError("--random expects N,L (measured count, latent layers)") from None
    return random_graph(n, layers, args.seed), {"random": [n, layers]}


def cmd_generate(args, run: Run) -> int:
    g, source = _graph_source(args, run)
    spec = _sem_spec(args)
    ds = sample_sem(g, spec)
    write_graph(g, run.path("graph.json"))
    write_dataset(ds, run.path("data.csv"))
    run.settings.update(source=source, sem=spec.__dict__, graph_digest=g.digest())
    run.wrote("graph.json", primary=True)
    run.wrote("data.csv", primary=True)
    run.wrote("data.csv.meta.json")
    if read_graph(run.path("graph.json")) != g or read_dataset(run.path("data.csv")) != ds:
        raise HierLatentError("written files do not read back identically")
    print(f"wrote {ds.num_rows}x{ds.num_columns} dataset to {run.path('data.csv')}")
    return 0


def cmd_recover(args, run: Run) -> int:
    if args.oracle == "exact":
        if not args.graph:
            raise UsageError("--oracle exact requires --graph")
        run.read(args.graph)
        g = read_graph(args.graph)
        oracle, n = ExactOracle(g), g.num_measured
    else:
        if not args.data:
            raise UsageError("--oracle statistical requires --data")
        run.read(args.data)
        data = read_dataset(args.data)
        oracle, n = _stat_oracle(data, args, args.seed), data.num_columns
        run.settings.update(_rank_settings(args), regressor_seed=args.seed)
    run.settings.update(oracle=args.oracle, subset_cap=args.subset_cap, budget=args.budget)
    trace = RecoveryTrace()
    try:
        est, _ = recover_full(oracle, n, subset_cap=args.subset_cap, budget=args.budget,
                              check_symmetry=args.check_symmetry, trace=trace)
    except (ModelViolationError, OracleInconsistencyError, QueryBudgetExceeded) as exc:
        trace.write(run.path("trace.jsonl"))
        run.wrote("trace.jsonl")
        run.finish(error=str(exc))
        print(f"recovery failed: {exc} (trace: {run.path('trace.jsonl')})", file=sys.stderr)
        return 1
    write_graph(est, run.path("graph.json"))
    trace.write(run.path("trace.jsonl"))
    run.wrote("graph.json", primary=True)
    run.wrote("trace.jsonl", primary=True)
    read_graph(run.path("graph.json"))
    print(f"recovered {list(est.layer_sizes)} latents, {est.num_edges()} edges, "
          f"{len(trace.queries)} oracle queries")
    return 0


def _write_history(path: Path, history) -> None:
    if not history:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        for row in history:
            w.writerow({k: (format(v, ".10g") if isinstance(v, float) else v)
                        for k, v in row.items()})


def _train_into(run: Run, data, cfg: TrainConfig, prefix: str = ""):
    res = train(data, cfg=cfg)
    write_graph(res.graph, run.path(prefix + "graph.json"))
    save_checkpoint(res.state, run.path(prefix + "checkpoint.npz"))
    _write_json(run.path(prefix + "restarts.json"),
                {k: v for k, v in res.summary().items() if k != "wall_time_seconds"})
    _write_history(run.path(prefix + "history.csv"), res.history)
    run.wrote(prefix + "graph.json", primary=True)
    run.wrote(prefix + "restarts.json", primary=True)
    run.wrote(prefix + "history.csv")
    run.wrote(prefix + "checkpoint.npz")
    return res


def cmd_train(args, run: Run) -> int:
    if not args.data:
        raise UsageError("train requires --data")
    cfg = _train_config(args)
    run.read(args.data)
    if args.config:
        run.read(args.config)
    data = read_dataset(args.data)
    run.settings.update(config=cfg.to_dict())
    try:
        res = _train_into(run, data, cfg)
    except DivergenceError as exc:
        run.finish(error=str(exc))
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    losses = ", ".join("diverged" if not np.isfinite(v) else f"{v:.4f}"
                       for v in res.final_losses)
    print(f"best restart {res.best_restart} (loss {res.loss:.4f}); restart losses: {losses}")
    return 0


def _metrics_doc(truth, est) -> dict:
    m = best_perm_shd_f1(truth, est)
    doc = m.to_dict()
    doc.pop("wall_time_seconds", None)
    return doc


def cmd_eval(args, run: Run) -> int:
    if not (args.truth and args.est):
        raise UsageError("eval requires --truth and --est")
    for p in (args.truth, args.est):
        run.read(p)
    start = time.perf_counter()
    doc = _metrics_doc(read_graph(args.truth), read_graph(args.est))
    _write_json(run.path("metrics.json"), doc)
    run.wrote("metrics.json", primary=True)
    run.extra["eval_seconds"] = time.perf_counter() - start
    print(f"shd {doc['shd']}  f1 {doc['f1']:.4f}")
    return 0


def _mean_std(vals) -> str:
    vals = np.asarray(vals, dtype=float)
    return f"{vals.mean():.2f} ({vals.std():.2f})"


def cmd_e2e(args, run: Run) -> int:
    g = builtin(args.builtin)
    activation = ACTIVATION_ALIASES[args.activation]
    cfg = _train_config(args) if args.method == "train" else None
    run.settings.update(builtin=args.builtin, method=args.method, trials=args.trials,
                        activation=activation, samples=args.samples, seed=args.seed)
    if cfg is not None:
        run.settings["config"] = cfg.to_dict()
    if args.method == "statistical":
        run.settings.update(_rank_settings(args))
    rows, times = [], []
    for k in range(args.trials):
        seed = args.seed + k
        prefix = f"trial-{k}/"
        run.path(prefix).mkdir(exist_ok=True)
        start = time.perf_counter()
        ds = sample_sem(g, SemSpec(activation=activation, samples=args.samples, seed=seed))
        write_dataset(ds, run.path(prefix + "data.csv"))
        try:
            if args.method == "oracle":
                est, trace = recover_full(ExactOracle(g), g.num_measured)
            elif args.method == "statistical":
                est, trace = recover_full(_stat_oracle(ds, args, seed), g.num_measured)
            else:
                trial_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + k})
                est, trace = _train_into(run, ds, trial_cfg, prefix).graph, None
        except (ModelViolationError, QueryBudgetExceeded) as exc:
            # a failed recovery scores as the empty graph
            print(f"trial {k}: {exc}", file=sys.stderr)
            est, trace = None, None
        if est is None:
            est = HierGraph(g.num_measured, [], [])
        if trace is not None:
            trace.write(run.path(prefix + "trace.jsonl"))
        if args.method != "train":
            write_graph(est, run.path(prefix + "graph.json"))
            run.wrote(prefix + "graph.json", primary=True)
        doc = _metrics_doc(g, est)
        _write_json(run.path(prefix + "metrics.json"), doc)
        run.wrote(prefix + "metrics.json", primary=True)
        rows.append(doc)
        times.append(time.perf_counter() - start)
        print(f"trial {k}: shd {doc['shd']}  f1 {doc['f1']:.4f}  ({times[-1]:.1f} s)")
    shd = [r["shd"] for r in rows]
    f1 = [r["f1"] for r in rows]
    summary = {"structure": args.builtin, "activation": ACTIVATION_LABELS[activation],
               "method": args.method, "trials": args.trials,
               "shd": shd, "f1": f1,
               "shd_mean": float(np.mean(shd)), "shd_std": float(np.std(shd)),
               "f1_mean": float(np.mean(f1)), "f1_std": float(np.std(f1))}
    _write_json(run.path("summary.json"), summary)
    run.wrote("summary.json", primary=True)
    header = f"{'Structure':<10} {'Activation':<10} {'Method':<12} {'SHD':<14} {'F1':<14} Time (s)"
    line = (f"{args.builtin:<10} {ACTIVATION_LABELS[activation]:<10} {args.method:<12} "
            f"{_mean_std(shd):<14} {_mean_std(f1):<14} {_mean_std(times)}")
    run.path("table.txt").write_text(header + "\n" + line + "\n")
    run.wrote("table.txt")
    print(header)
    print(line)
    return 0


def cmd_oracle_query(args, run: Run | None) -> int:
    S, T = _parse_set(args.S), _parse_set(args.T)
    if args.oracle == "exact":
        if not args.graph:
            raise UsageError("--oracle exact requires --graph")
        oracle = ExactOracle(read_graph(args.graph))
        answer = {"r": oracle.query(S, T)}
    else:
        if not args.data:
            raise UsageError("--oracle statistical requires --data")
        oracle = _stat_oracle(read_dataset(args.data), args, args.seed)
        d = oracle.decide(S, T)
        answer = {"r": d.rank, "spectrum": np.round(d.spectrum, 6).tolist()}
        if d.heldout_r2 is not None:
            answer["heldout_r2"] = d.heldout_r2
    answer.update(S=S, T=T)
    print(json.dumps(answer, sort_keys=True))
    if run is not None:
        _write_json(run.path("answer.json"), answer)
        run.wrote("answer.json", primary=True)
    return 0


def cmd_replay(args, run: Run | None) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if not args.out:
        raise UsageError("replay requires --out")
    out = Path(args.out).resolve()
    argv = list(manifest["argv"])
    i = argv.index("--out") if "--out" in argv else None
    if i is not None:
        argv[i + 1] = str(out)
    else:
        argv += ["--out", str(out)]
    # relative paths in the recorded argv refer to the original directory
    here = os.getcwd()
    os.chdir(manifest.get("cwd", here))
    try:
        code = main(argv)
    finally:
        os.chdir(here)
    if code:
        return code
    fresh = json.loads((out / "manifest.json").read_text())
    bad = [name for name in manifest["primary_outputs"]
           if fresh["outputs"].get(name) != manifest["outputs"][name]]
    for name in bad:
        print(f"differs: {name}", file=sys.stderr)
    if not bad:
        print(f"replay identical: {len(manifest['primary_outputs'])} primary outputs")
    return 1 if bad else 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_rank_flags(p):
    p.add_argument("--rank-tol", type=float, default=None,
                   help=f"relative singular-value cutoff (default {DEFAULT_TOL} for jacobian, "
                        f"{CROSSCOV_TOL} for crosscov)")
    p.add_argument("--rank-points", type=int, default=64)
    p.add_argument("--rank-mode", choices=("jacobian", "crosscov"), default="jacobian")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON training config; unknown keys are rejected")
    p.add_argument("--restarts", type=int)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierlatent", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a dataset from a graph")
    p.add_argument("--builtin", choices=sorted(BUILTINS))
    p.add_argument("--graph", help="graph JSON file")
    p.add_argument("--random", metavar="N,L", help="random graph with N measured, L layers")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--activation", choices=sorted(ACTIVATION_ALIASES), default="leakyrelu")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("recover", help="rank-based layer-by-layer recovery")
    p.add_argument("--oracle", choices=("exact", "statistical"), default="exact")
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--seed", type=int, default=0, help="regressor seed")
    p.add_argument("--subset-cap", type=int, default=DEFAULT_SUBSET_CAP)
    p.add_argument("--budget", type=int, default=DEFAULT_QUERY_BUDGET)
    p.add_argument("--check-symmetry", action="store_true")
    _add_rank_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("train", help="differentiable structure learning")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    _add_train_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="SHD and F1 of an estimate against the truth")
    p.add_argument("--truth")
    p.add_argument("--est")
    p.add_argument("--out")

    p = sub.add_parser("e2e", help="generate, recover or train, and evaluate over trials")
    p.add_argument("--builtin", choices=sorted(BUILTINS), required=True)
    p.add_argument("--method", choices=("oracle", "statistical", "train"), default="oracle")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--activation", choices=sorted(ACTIVATION_ALIASES), default="leakyrelu")
    p.add_argument("--seed", type=int, default=0)
    _add_rank_flags(p)
    _add_train_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("oracle-query", help="answer a single r(S, T) query")
    p.add_argument("--oracle", choices=("exact", "statistical"), default="exact")
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--S", required=True, help="comma-separated measured indices")
    p.add_argument("--T", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_rank_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-run a manifest and compare primary outputs")
    p.add_argument("manifest")
    p.add_argument("--out")
    return parser


COMMANDS = {"generate": cmd_generate, "recover": cmd_recover, "train": cmd_train,
            "eval": cmd_eval, "e2e": cmd_e2e, "oracle-query": cmd_oracle_query,
            "replay": cmd_replay}
NO_RUN_DIR = {"replay"}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command in NO_RUN_DIR or (args.command == "oracle-query" and not args.out):
            return COMMANDS[args.command](args, None)
        run = Run(args.command, argv, _out_dir(args))
        code = COMMANDS[args.command](args, run)
        if code == 0:
            run.finish()
        return code
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hierlatent: error: {exc}", file=sys.stderr)
        return 2
    except (HierLatentError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"hierlatent: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
