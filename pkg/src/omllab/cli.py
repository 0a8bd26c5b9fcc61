"""Command-line experiment runner.

Subcommands: ``meta-train``, ``eval``, ``retention``, ``analyze``, ``sweep``.
Every run writes into ``<out>/<subcommand>-<config hash>[-<checkpoint digest>]-seed<seed>``
together with a ``manifest.json`` listing the files it produced.

Exit codes: 0 success, 2 config or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import config as configmod
from .analysis import dump_representation, sparsity_report, write_summary
from .autodiff import Value
from .errors import ConfigError, ContractError, DataError, IngestionError, NumericError, SweepError
from .evaluation import (
    evaluate,
    evaluate_representation,
    iid_evaluate,
    lr_sweep,
    make_eval_runs,
    pretrain_baseline,
    pretrain_network,
    write_curves,
)
from .metatrain import meta_train
from .network import NetworkSpec, ParameterSet, build, init_pln, load_checkpoint, save_checkpoint
from .problems import SineSource, SplitSource, load_image_dataset, sample_sine_functions, sine_eval_grid, synthetic_class_dataset
from .retention import METHODS, TABLE_FIELDS, append_table_row, run_method
from .rng import stream

log = logging.getLogger("omllab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
DATA_ENV = "OMLLAB_DATA"


class UsageError(Exception):
    """Bad command-line usage; maps to exit code 2."""


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    subcommand: str
    outputs: list[str] = field(default_factory=list)
    wall_seconds: float = 0.0
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path


# ---------------------------------------------------------------------------
# problem setup


@dataclass
class Setup:
    kind: str
    meta_source: object
    eval_source: object
    input_dim: int
    meta_output: int
    eval_output: int
    eval_k: int
    dataset: object = None
    pretrain_output: int = 1


def _dataset_path(name: str) -> Path:
    p = Path(name)
    if not p.is_absolute() and os.environ.get(DATA_ENV):
        p = Path(os.environ[DATA_ENV]) / p
    return p


def setup_problem(cfg: dict) -> Setup:
    """Problem sources and dimensions for ``cfg``; all data randomness comes from the root seed."""
    prob = cfg["problem"]
    seed = cfg["seed"]
    bs = prob.get("batch_size", 8 if prob["kind"] == "sine" else 1)
    per_block = prob.get("eval_batches_per_block", 40 if prob["kind"] == "sine" else 15)
    if prob["kind"] == "sine":
        n = prob.get("n_functions", 10)
        pool = sample_sine_functions(stream(seed, "train-pool"), prob.get("train_pool", 400))
        test_pool = sample_sine_functions(stream(seed, "test-pool"), prob.get("test_pool", 500))
        return Setup("regression", SineSource(pool, n, bs), SineSource(test_pool, n, bs), n + 1, 1, 1, n * per_block)
    name = prob.get("dataset", "synthetic")
    if name == "synthetic":
        ds = synthetic_class_dataset(prob.get("dataset_classes", 200), prob.get("dataset_dim", 32),
                                     stream(seed, "dataset"), sigma=prob.get("dataset_sigma", 0.3))
    else:
        ds = load_image_dataset(_dataset_path(name), resolution=prob.get("resolution", 28))
    n_eval = prob.get("n_classes", 20)
    n_meta = prob.get("meta_classes", n_eval)
    n_test_pool = ds.n_classes - ds.n_meta_train
    if n_meta > ds.n_meta_train or n_eval > n_test_pool:
        raise ConfigError(f"dataset has {ds.n_meta_train} meta-train and {n_test_pool} meta-test classes",
                          field="problem.n_classes")
    if per_block * bs > ds.train.shape[1]:
        raise ConfigError(f"at most {ds.train.shape[1]} training images per class", field="problem.eval_batches_per_block")
    return Setup("classification", SplitSource(ds, n_meta, bs), SplitSource(ds, n_eval, bs, pool="meta_test"),
                 ds.dim, n_meta, n_eval, n_eval * per_block, ds, ds.n_meta_train)


def _spec(cfg: dict, setup: Setup, output_dim: int, rln_depth: int | None = None) -> NetworkSpec:
    net = cfg["network"]
    return NetworkSpec(setup.input_dim, output_dim, tuple(net["widths"]), rln_depth or net["rln_depth"])


def _eval_runs(cfg: dict, setup: Setup, seed: int):
    ev = cfg["eval"]
    gp = ev.get("grid_points", 50)
    val = make_eval_runs(setup.eval_source, ev["n_validation"], setup.eval_k, stream(seed, "validation"), gp)
    rep = make_eval_runs(setup.eval_source, ev["n_reporting"], setup.eval_k, stream(seed, "reporting"), gp)
    return val, rep


def _load_for_eval(path, cfg: dict, setup: Setup) -> tuple[ParameterSet, NetworkSpec]:
    if path is None:
        raise UsageError("--checkpoint is required")
    try:
        params = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    spec = params.spec
    if spec.input_dim != setup.input_dim:
        raise ConfigError(f"checkpoint input_dim {spec.input_dim} != problem input_dim {setup.input_dim}",
                          field="checkpoint.input_dim")
    if list(spec.widths) != list(cfg["network"]["widths"]):
        raise ConfigError(f"checkpoint widths {list(spec.widths)} != config {cfg['network']['widths']}",
                          field="network.widths")
    return params, NetworkSpec(spec.input_dim, setup.eval_output, spec.widths, spec.rln_depth)


def _digest(path) -> str:
    h = hashlib.sha256()
    ckpt = Path(path)
    for name in ("manifest.txt", "params.bin"):
        h.update((ckpt / name).read_bytes())
    return h.hexdigest()[:12]


def _run_dir(out, sub: str, cfg: dict, extra: str = "") -> Path:
    tag = "-".join(filter(None, [sub, configmod.config_hash(cfg)[:16], extra, f"seed{cfg['seed']}"]))
    d = Path(out) / tag
    d.mkdir(parents=True, exist_ok=True)
    return d


def _files(run_dir: Path) -> list[str]:
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file() and p != run_dir / "manifest.json")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_meta_train(cfg: dict, out, jobs: int = 1, **_) -> Path:
    setup = setup_problem(cfg)
    run_dir = _run_dir(out, "meta-train", cfg)
    seed = cfg["seed"]
    objective = cfg["meta"].get("objective", "oml")
    info = {}
    if objective == "pretraining":
        pre = cfg.get("pretrain", {})
        depths = [d for d in pre.get("candidate_depths", [cfg["network"]["rln_depth"]]) if d <= len(cfg["network"]["widths"])]
        val, _ = _eval_runs(cfg, setup, seed)
        kw = {k: pre[k] for k in ("steps", "lr", "batch_size", "steps_per_problem") if k in pre}
        labels = "global" if setup.kind == "classification" else "problem"
        theta, espec, res = pretrain_baseline(setup.meta_source, _spec(cfg, setup, setup.pretrain_output),
                                              stream(seed, "pretrain"), val, depths, setup.eval_output,
                                              cfg["eval"]["lr_grid"], seed, labels=labels, **kw)
        params = ParameterSet(espec, theta, init_pln(espec, stream(seed, "pretrain-head")), seed,
                              {"objective": "pretraining"})
        save_checkpoint(run_dir / "checkpoint", params)
        _write_json(run_dir / "pretrain.json", {
            "rln_depth": res["rln_depth"],
            "split_scores": {str(k): {"score": v[0], "lr": v[1]} for k, v in res["split_scores"].items()},
            "final_loss": float(np.mean(res["losses"][-100:])),
        })
        info["rln_depth"] = res["rln_depth"]
    elif objective == "scratch":
        spec = _spec(cfg, setup, setup.eval_output)
        params = build(spec, stream(seed, "init"))
        params.meta["objective"] = "scratch"
        save_checkpoint(run_dir / "checkpoint", params)
    else:
        mcfg = configmod.meta_train_config(cfg)
        spec = _spec(cfg, setup, setup.meta_output)
        meta_train(mcfg, setup.meta_source, spec, stream(seed, "init"), stream(seed, "episodes"), out_dir=run_dir)
    return run_dir


def cmd_eval(cfg: dict, out, checkpoint=None, **_) -> Path:
    setup = setup_problem(cfg)
    params, espec = _load_for_eval(checkpoint, cfg, setup)
    run_dir = _run_dir(out, "eval", cfg, _digest(checkpoint))
    seed = cfg["seed"]
    val, rep = _eval_runs(cfg, setup, seed)
    grid = cfg["eval"]["lr_grid"]
    report, results = evaluate_representation(params.theta, espec, val, rep, grid, seed, str(checkpoint))
    report.checkpoint = params.meta.get("objective", "")
    if cfg["eval"].get("iid_epochs", 0) > 0:
        report.iid = iid_evaluate(params.theta, espec, val, rep, cfg["eval"]["iid_epochs"], grid, seed)
    report.to_json(run_dir / "report.json")
    write_curves(run_dir / "curves.csv", results, rep)
    with open(run_dir / "per_block.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "metric"])
        for b, v in enumerate(report.per_block):
            writer.writerow([b + 1, repr(v)])
    return run_dir


def _retention_seed(cfg: dict, seed: int, method: str, theta_arrays: list, espec: NetworkSpec, standard: bool) -> dict:
    """Tuned-lr accuracy of ``method`` for one repetition seed."""
    setup = setup_problem(cfg)
    theta = [Value(a, requires_grad=True) for a in theta_arrays]
    val, rep = _eval_runs(cfg, setup, seed)
    ret = cfg["retention"]
    kw = {"capacity": ret["capacity"], "replay_batch": ret["replay_batch"], "lam": ret["ewc_lambda"]}

    def runner(lr, run, rng):
        th, w, _ = run_method(method, theta, init_pln(espec, rng), run.trajectory, lr, run.kind, rng,
                              update_theta=standard, **kw)
        return evaluate(th, w, run.eval_x, run.eval_y, run.kind)

    lr, _ = lr_sweep(theta, espec, val, cfg["eval"]["lr_grid"], seed, runner=runner)
    rng = np.random.default_rng(seed + 1)
    accs = [runner(lr, run, rng) for run in rep]
    return {"seed": seed, "lr": lr, "accuracy": float(np.mean(accs)), "per_run": accs}


def _standard_init(cfg: dict, setup: Setup) -> tuple[list, NetworkSpec]:
    """Whole network trained i.i.d. on meta-training data; the head is replaced at meta-test."""
    pre = cfg.get("pretrain", {})
    kw = {k: pre[k] for k in ("steps", "lr", "batch_size", "steps_per_problem") if k in pre}
    labels = "global" if setup.kind == "classification" else "problem"
    params, _ = pretrain_network(setup.meta_source, _spec(cfg, setup, setup.pretrain_output),
                                 stream(cfg["seed"], "standard-pretrain"), labels=labels, **kw)
    return params.theta, _spec(cfg, setup, setup.eval_output)


def cmd_retention(cfg: dict, out, checkpoint=None, method=None, standard=False, jobs=1, table=None, **_) -> Path:
    """One method over the configured seeds.

    The network comes from ``--checkpoint`` or, with ``--standard`` alone, from
    i.i.d. pre-training. ``--standard`` trains the whole network online;
    otherwise only the PLN learns.
    """
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {list(METHODS)}")
    if not standard and checkpoint is None:
        raise UsageError("give --checkpoint, --standard, or both")
    setup = setup_problem(cfg)
    if checkpoint is not None:
        params, espec = _load_for_eval(checkpoint, cfg, setup)
        theta, representation = params.theta, params.meta.get("objective", "unknown")
        tag = _digest(checkpoint)
    else:
        theta, espec = _standard_init(cfg, setup)
        representation, tag = "standard", "standard"
    extra = "-".join([method, tag, "full" if standard else "fixed"])
    run_dir = _run_dir(out, "retention", cfg, extra)
    seeds = cfg["retention"]["seeds"]
    workers_dir = run_dir / "workers"
    workers_dir.mkdir(exist_ok=True)
    arrays = [np.array(p.data) for p in theta]
    args = [(cfg, s, method, arrays, espec, standard) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_retention_seed, *zip(*args)))
    else:
        results = [_retention_seed(*a) for a in args]
    for res in results:
        wdir = workers_dir / f"seed{res['seed']}"
        wdir.mkdir(exist_ok=True)
        _write_json(wdir / "result.json", res)
    accs = np.array([r["accuracy"] for r in results])
    row = {
        "method": method,
        "representation": representation,
        "mode": "full-network" if standard else "fixed-rln",
        "accuracy_mean": repr(float(accs.mean())),
        "accuracy_std": repr(float(accs.std())),
        "seeds": " ".join(str(s) for s in seeds),
    }
    with open(run_dir / "row.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        writer.writerow(row)
    flags = {"ewc_boundaries": "task-aware", "w0": "fresh-random", **cfg["retention"]}
    _write_json(run_dir / "row.json", {**row, "flags": flags, "per_seed": [{k: r[k] for k in ("seed", "lr", "accuracy")} for r in results]})
    if table is not None:
        append_table_row(table, row)
    return run_dir


def _corpus(cfg: dict, setup: Setup) -> np.ndarray:
    """Inputs the representation is probed on: meta-training data."""
    if setup.dataset is not None:
        ds = setup.dataset
        return ds.train[ds.pool("meta_train")].reshape(-1, ds.dim)
    rng = stream(cfg["seed"], "analysis-corpus")
    grids = [sine_eval_grid(setup.meta_source.sample_problem(rng), cfg["eval"].get("grid_points", 50))[0] for _ in range(10)]
    return np.concatenate(grids)


def cmd_analyze(cfg: dict, out, checkpoint=None, **_) -> Path:
    setup = setup_problem(cfg)
    params, _ = _load_for_eval(checkpoint, cfg, setup)
    run_dir = _run_dir(out, "analyze", cfg, _digest(checkpoint))
    an = cfg["analysis"]
    corpus = _corpus(cfg, setup)
    report = sparsity_report(params.theta, corpus, an.get("threshold", 0.0))
    report.to_json(run_dir / "sparsity.json")
    dump_representation(params.theta, corpus, an["reshape_rows"], run_dir / "dumps", an.get("n_instances", 4))
    write_summary(run_dir / "summary.csv", [{"method": params.meta.get("objective", "unknown"), **asdict(report)}])
    return run_dir


def cmd_sweep(cfg: dict, out, checkpoint=None, **_) -> Path:
    setup = setup_problem(cfg)
    params, espec = _load_for_eval(checkpoint, cfg, setup)
    run_dir = _run_dir(out, "sweep", cfg, _digest(checkpoint))
    val, _ = _eval_runs(cfg, setup, cfg["seed"])
    best, scores = lr_sweep(params.theta, espec, val, cfg["eval"]["lr_grid"], cfg["seed"])
    _write_json(run_dir / "sweep.json", {"best_lr": best, "scores": {repr(k): v for k, v in scores.items()}})
    return run_dir


COMMANDS = {
    "meta-train": cmd_meta_train,
    "eval": cmd_eval,
    "retention": cmd_retention,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--preset", choices=sorted(configmod.PRESETS), help="named base config")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for seed repetitions")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output root directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="omllab", description="Meta-learned representations for continual learning.")
    parser.add_argument("--version", action="version", version=f"omllab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("meta-train", parents=[common], help="meta-train a representation (or a baseline)")
    for name, text in (("eval", "online evaluation with a learning-rate sweep"),
                       ("analyze", "sparsity statistics and activation dumps"),
                       ("sweep", "learning-rate sweep only")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("retention", parents=[common], help="one continual-learning method, mean and std over seeds")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--standard", action="store_true", help="train the whole randomly initialized network online")
    p.add_argument("--method", required=True)
    p.add_argument("--table", type=Path, help="also append the result row to this CSV")
    return parser


def run(argv=None) -> tuple[int, Path | None]:
    """Parse, dispatch and write the run manifest. Returns ``(exit code, run directory)``."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"omllab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    except SystemExit as exc:
        return int(exc.code or 0), None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = configmod.load(args.config, preset=args.preset, seed=args.seed)
        kwargs = {k: v for k, v in vars(args).items() if k not in ("config", "preset", "seed", "command", "verbose")}
        run_dir = COMMANDS[args.command](cfg, **kwargs)
    except ConfigError as exc:
        print(f"omllab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    except (UsageError, ContractError, DataError, IngestionError, FileNotFoundError) as exc:
        print(f"omllab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    except (NumericError, SweepError) as exc:
        print(f"omllab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None
    inputs = {}
    if getattr(args, "checkpoint", None) is not None:
        inputs["checkpoint"] = str(args.checkpoint)
    manifest = RunManifest(
        config_hash=configmod.config_hash(cfg),
        version=__version__,
        seed=cfg["seed"],
        subcommand=args.command,
        outputs=_files(run_dir),
        wall_seconds=time.perf_counter() - t0,
        config=cfg,
        inputs=inputs,
    )
    manifest.write(run_dir)
    print(run_dir)
    return EXIT_OK, run_dir


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
