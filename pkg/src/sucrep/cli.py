"""Command-line entry point: ``sucrep <command> [options]``.

Exit codes: 0 success, 1 I/O or file format, 2 configuration, 3 violated
modelling assumption, 4 numeric abort, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import envgen, evalkit, linrep, mdp_core, nnkit, trainer
from .errors import ArtifactError, ConfigError, DomainError, NumericError, PreconditionError

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERIC, EXIT_ARTIFACT = range(6)

ABLATIONS = {
    "base": {},
    "-a": {"action_conditioned": False},
    "f_l2": {"loss_f": "l2"},
    "-psi_b": {"bidirectional": False},
    "gamma=0": {"gamma": 0.0},
}


# Per-method settings applied by sweeps: TRA is action-free, FB action-conditioned,
# and neither has a backward predictor.
METHOD_DEFAULTS = {
    "tra": {"action_conditioned": False, "bidirectional": False},
    "fb": {"action_conditioned": True, "bidirectional": False},
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- manifests ------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    seed: int | None = None
    dataset: str | None = None
    dataset_sha256: str | None = None
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    started_at: str = ""
    finished_at: str = ""

    def add(self, out_dir: Path, path: Path) -> None:
        self.artifacts[str(path.relative_to(out_dir))] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- helpers --------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None


def _load_mdp(path):
    text = _read_text(path)
    try:
        return mdp_core.parse_mdp_text(text)
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError(EXIT_IO, f"cannot parse MDP file {path}: {exc}") from None


def _load_maze(spec: str) -> envgen.Maze:
    if spec in envgen.BUILTIN_MAZES:
        return envgen.load_maze(spec)
    try:
        return envgen.parse_maze(_read_text(spec))
    except ValueError as exc:
        raise CliError(EXIT_IO, f"cannot parse maze {spec}: {exc}") from None


def _load_dataset(path) -> envgen.Dataset:
    try:
        return envgen.dataset_from_jsonl(_read_text(path))
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot parse dataset {path}: {exc}") from None


def _gamma(value: float) -> float:
    if not 0.0 <= value < 1.0:
        raise CliError(EXIT_CONFIG, "gamma must be < 1 (and >= 0)")
    return value


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metrics_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trainer.METRIC_COLUMNS)
    for row in metrics:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in trainer.METRIC_COLUMNS[1:]])
    return buf.getvalue()


def _config_from(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if getattr(args, "config", None):
        cfg = trainer.parse_config(_read_text(args.config))
    overrides = {}
    for key in ("alpha", "gamma", "method", "seed", "steps"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return cfg.replace(**overrides) if overrides else cfg


# -- commands -------------------------------------------------------------


def cmd_sr(args) -> int:
    mdp, policy, file_gamma = _load_mdp(args.mdp)
    gamma = args.gamma if args.gamma is not None else file_gamma
    if gamma is None:
        raise CliError(EXIT_CONFIG, "no gamma given on the command line or in the MDP file")
    gamma = _gamma(gamma)
    p_pi = mdp_core.policy_transition(mdp, policy)
    sm = mdp_core.successor_representation(p_pi, gamma)
    m_tilde = mdp_core.normalize_sm(sm).m
    rows = []
    for name, mat in (("M", sm.m), ("M_tilde", m_tilde)):
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                rows.append([name, i, j, repr(float(mat[i, j]))])
    out = Path(args.out)
    _write_csv(out, ["matrix", "row", "col", "value"], rows)
    print(f"bellman_residual {mdp_core.bellman_residual(sm, p_pi):.3e}")
    return EXIT_OK


def _ode_problem(args):
    if args.graph:
        name, _, size = args.graph.partition(":")
        if name not in mdp_core.BUILTIN_CHAINS or not size.isdigit():
            raise CliError(EXIT_CONFIG, f"unknown graph {args.graph!r}; use ring:N, grid:N or complete:N")
        p = mdp_core.BUILTIN_CHAINS[name](int(size))
        mdp = mdp_core.FiniteMdp.from_markov_chain(p)
        return mdp, mdp_core.TabularPolicy.uniform(mdp.n_states, 1), None
    if not args.mdp:
        raise CliError(EXIT_CONFIG, "give --graph or --mdp")
    return _load_mdp(args.mdp)


def cmd_ode(args) -> int:
    mdp, policy, file_gamma = _ode_problem(args)
    gamma = _gamma(args.gamma if args.gamma is not None else (file_gamma if file_gamma is not None else 0.9))
    try:
        cfg = linrep.OdeConfig(step_size=args.step_size, n_steps=args.steps, record_every=args.record_every)
    except DomainError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if not 1 <= args.d <= mdp.n_states:
        raise CliError(EXIT_CONFIG, f"d must lie in [1, {mdp.n_states}]")
    trace = linrep.byol_gamma_ode(mdp, policy, gamma, args.d, cfg, np.random.default_rng(args.seed))
    Path(args.out).write_text(trace.to_csv())
    optimum = linrep.eckart_young_error(trace.target, args.d)
    final = trace.surrogate_values[-1]
    ratio = final / optimum if optimum > 0 else (1.0 if final <= 1e-12 else float("inf"))
    print(f"final_surrogate {final:.6e} eckart_young {optimum:.6e} ratio {ratio:.6f}")
    return EXIT_OK


def cmd_gen(args) -> int:
    maze = _load_maze(args.maze)
    if args.span_limit >= max(maze.width, maze.height) - 1:
        warnings.warn(f"span limit {args.span_limit} exceeds the maze extent; spans are bounded by the maze",
                      stacklevel=1)
    try:
        ds = envgen.generate_stitch_dataset(maze, args.span_limit, args.n, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(envgen.dataset_to_jsonl(ds))
    man = RunManifest("gen", _argv(args), {"maze": args.maze, "span_limit": args.span_limit, "n": args.n},
                      args.seed, str(out), sha256_file(out), started_at=_now())
    man.artifacts[out.name] = man.dataset_sha256
    man.finished_at = _now()
    man.write(out.parent) if args.manifest is None else Path(args.manifest).write_text(
        json.dumps(asdict(man), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} trajectories, coverage {envgen.coverage_of(ds, maze.n_cells):.3f}")
    return EXIT_OK


def run_training(dataset_path, cfg: trainer.TrainConfig, out_dir, argv=None, *, quiet=True) -> dict:
    """Train one config and write checkpoint, metrics, config and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("train", argv or [], {"text": trainer.format_config(cfg)}, cfg.seed,
                      str(dataset_path), sha256_file(dataset_path), started_at=_now())
    ds = _load_dataset(dataset_path)
    params, metrics = trainer.train(ds, cfg)
    maze, feats = trainer.dataset_features(ds, cfg)
    ckpt = out / "checkpoint.bin"
    nnkit.save_checkpoint(ckpt, params.named_tensors(),
                          trainer.params_descriptor(params, cfg, feats.shape[1], maze.n_cells))
    (out / "metrics.csv").write_text(_metrics_csv(metrics))
    (out / "config.txt").write_text(trainer.format_config(cfg))
    for name in ("checkpoint.bin", "metrics.csv", "config.txt"):
        man.add(out, out / name)
    man.finished_at = _now()
    man.write(out)
    if not quiet:
        print(f"bc_loss {metrics[0]['bc_loss']:.4f} -> {metrics[-1]['bc_loss']:.4f}")
    return {"params": params, "cfg": cfg, "metrics": metrics, "maze": maze}


def cmd_train(args) -> int:
    cfg = _config_from(args)
    run_training(args.dataset, cfg, args.out_dir, _argv(args), quiet=False)
    return EXIT_OK


def load_model(path, maze: envgen.Maze):
    try:
        tensors, desc = nnkit.load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_ARTIFACT, f"corrupt checkpoint {path}: {exc}") from None
    if desc.get("kind") != "sucrep-gcbc":
        raise CliError(EXIT_ARTIFACT, "checkpoint is not a GCBC model")
    params, cfg = trainer.params_from_tensors(tensors, desc)
    feat_dim = envgen.state_features(maze, cfg.features).shape[1]
    if desc["n_states"] != maze.n_cells or desc["feat_dim"] != feat_dim:
        raise CliError(EXIT_ARTIFACT, f"checkpoint was trained on {desc['n_states']} cells, "
                                      f"maze has {maze.n_cells}")
    return params, cfg


def _read_tasks(path, maze) -> list:
    tasks = []
    for row in csv.DictReader(io.StringIO(_read_text(path))):
        try:
            tasks.append(envgen.make_task(maze, int(row["start"]), int(row["goal"])))
        except (KeyError, ValueError) as exc:
            raise CliError(EXIT_IO, f"bad task row {row}: {exc}") from None
    return tasks


def cmd_eval(args) -> int:
    maze = _load_maze(args.maze)
    params, cfg = load_model(args.checkpoint, maze)
    if args.tasks:
        tasks = _read_tasks(args.tasks, maze)
    else:
        tasks = envgen.default_base_tasks(maze, args.n_tasks) if args.horizon else envgen.all_pair_tasks(maze)
    if args.horizon:
        tasks = envgen.make_horizon_tasks(maze, tasks, np.random.default_rng(args.seed))
    if not tasks:
        raise CliError(EXIT_CONFIG, "no evaluation tasks")
    report = evalkit.evaluate(maze, params, cfg, tasks, args.episodes, _int_list(args.seeds),
                              stitch_threshold=args.span_limit, stochastic=args.stochastic)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.csv").write_text(report.to_csv())
    Path(f"{prefix}.json").write_text(report.summary_json() + "\n")
    print(report.summary_json())
    return EXIT_OK


def _parse_xy(text: str):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"goal must be 'x,y', got {text!r}") from None
    return x, y


def cmd_heatmap(args) -> int:
    maze = _load_maze(args.maze)
    params, cfg = load_model(args.checkpoint, maze)
    x, y = _parse_xy(args.goal)
    if not (0 <= x < maze.width and 0 <= y < maze.height) or maze.walls[y, x]:
        raise CliError(EXIT_CONFIG, f"goal ({x}, {y}) is a wall or outside the maze")
    hm = evalkit.similarity_heatmap(maze, params, cfg, maze.cell_at(x, y), args.action)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.csv").write_text(hm.to_csv())
    Path(f"{prefix}.pgm").write_text(hm.to_pgm())
    return EXIT_OK


# -- sweeps ---------------------------------------------------------------


def sweep_plan(base: trainer.TrainConfig, methods, alphas, seeds, ablate: bool) -> list[tuple[str, trainer.TrainConfig]]:
    """Cross product of (variant, alpha, seed); alpha is fixed to 0 for method none."""
    plan = []
    if ablate:
        variants = [(name, base.replace(method="byol_gamma", **ch)) for name, ch in ABLATIONS.items()]
    else:
        variants = [(m, base.replace(method=m, alpha=0.0 if m == "none" else base.alpha,
                                     **METHOD_DEFAULTS.get(m, {}))) for m in methods]
    for name, cfg in variants:
        alist = [0.0] if cfg.method == "none" else alphas
        for a in alist:
            for s in seeds:
                plan.append((name, cfg.replace(alpha=float(a), seed=int(s))))
    return plan


def _sweep_child(job):
    dataset, cfg, out_dir = job
    res = run_training(dataset, cfg, out_dir)
    maze = res["maze"]
    ds = _load_dataset(dataset)
    report = evalkit.evaluate(maze, res["params"], cfg, envgen.all_pair_tasks(maze),
                              stitch_threshold=ds.span_limit)
    Path(out_dir, "report.csv").write_text(report.to_csv())
    Path(out_dir, "summary.json").write_text(report.summary_json() + "\n")
    return report.in_distribution, report.out_of_distribution


def summarize_sweep(records) -> list[dict]:
    """Best alpha per variant by mean OOD success across seeds."""
    by = {}
    for r in records:
        by.setdefault(r["variant"], {}).setdefault(r["alpha"], []).append(r)
    table = []
    for variant, per_alpha in by.items():
        stats = []
        for a, rs in per_alpha.items():
            stats.append((float(np.mean([r["ood"] for r in rs])), float(np.mean([r["id"] for r in rs])), a, len(rs)))
        ood, idr, a, n = max(stats, key=lambda t: (t[0], -t[2]))
        table.append({"variant": variant, "best_alpha": a, "seeds": n, "id_success": idr,
                      "ood_success": ood, "gap": ood - idr})
    return table


def format_summary(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "best_alpha", "seeds", "id_success", "ood_success", "gap"])
    for row in table:
        w.writerow([row["variant"], row["best_alpha"], row["seeds"], f"{row['id_success']:.4f}",
                    f"{row['ood_success']:.4f}", f"{row['gap']:.4f}"])
    return buf.getvalue()


def run_sweep(dataset, base: trainer.TrainConfig, methods, alphas, seeds, out_dir, *, ablate=False,
              workers=None) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = sweep_plan(base, methods, alphas, seeds, ablate)
    jobs = []
    for name, cfg in plan:
        run_dir = out / f"{name}_a{cfg.alpha:g}_s{cfg.seed}"
        jobs.append((str(dataset), cfg, str(run_dir)))
    workers = workers or int(os.environ.get("SUCREP_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]
    records = [{"variant": name, "alpha": cfg.alpha, "seed": cfg.seed, "id": r[0], "ood": r[1]}
               for (name, cfg), r in zip(plan, results)]
    _write_csv(out / "runs.csv", ["variant", "alpha", "seed", "id_success", "ood_success"],
               [[r["variant"], r["alpha"], r["seed"], repr(r["id"]), repr(r["ood"])] for r in records])
    table = summarize_sweep(records)
    (out / "summary.csv").write_text(format_summary(table))
    return table


def cmd_sweep(args) -> int:
    base = _config_from(args)
    table = run_sweep(args.dataset, base, args.methods.split(","), _float_list(args.alphas),
                      _int_list(args.seeds), args.out_dir, ablate=args.ablate)
    print(format_summary(table), end="")
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Re-execute a manifest into a fresh directory and compare artifact hashes."""
    man = RunManifest.read(args.manifest)
    if man.dataset and man.dataset_sha256 and man.command == "train":
        if sha256_file(man.dataset) != man.dataset_sha256:
            raise CliError(EXIT_ARTIFACT, f"dataset {man.dataset} changed since the manifest was written")
    out = Path(args.out_dir)
    if man.command == "train":
        cfg = trainer.parse_config(man.config["text"])
        run_training(man.dataset, cfg, out)
    elif man.command == "gen":
        c = man.config
        ns = argparse.Namespace(maze=c["maze"], span_limit=c["span_limit"], n=c["n"], seed=man.seed,
                                out=str(out / Path(man.dataset).name), manifest=None)
        out.mkdir(parents=True, exist_ok=True)
        cmd_gen(ns)
    else:
        raise CliError(EXIT_CONFIG, f"cannot rerun command {man.command!r}")
    bad = [name for name, digest in man.artifacts.items()
           if not (out / name).exists() or sha256_file(out / name) != digest]
    if bad:
        raise CliError(EXIT_ARTIFACT, "artifacts differ: " + ", ".join(sorted(bad)))
    print(f"reproduced {len(man.artifacts)} artifacts")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def _argv(args) -> list:
    return list(getattr(args, "_argv", []))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sucrep", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", help="successor matrices of a tabular MDP")
    s.add_argument("--mdp", required=True)
    s.add_argument("--gamma", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("ode", help="BYOL-gamma flow on a symmetric chain")
    s.add_argument("--mdp")
    s.add_argument("--graph", help="built-in chain, e.g. ring:32")
    s.add_argument("--gamma", type=float)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--step-size", type=float, default=0.01)
    s.add_argument("--record-every", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ode)

    s = sub.add_parser("gen", help="generate a stitching dataset")
    s.add_argument("--maze", default="medium")
    s.add_argument("--span-limit", type=int, default=4)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_gen)

    def train_flags(s):
        s.add_argument("--dataset", required=True)
        s.add_argument("--config")
        s.add_argument("--alpha", type=float)
        s.add_argument("--gamma", type=float)
        s.add_argument("--method")
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)

    s = sub.add_parser("train", help="train GCBC with an optional auxiliary loss")
    train_flags(s)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--maze", default="medium")
    s.add_argument("--tasks", help="CSV with start,goal columns (cell indices)")
    s.add_argument("--horizon", action="store_true", help="expand base tasks into shortest-path waypoints")
    s.add_argument("--n-tasks", type=int, default=5)
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--seeds", default="0")
    s.add_argument("--seed", type=int, default=0, help="seed for waypoint tie-breaking")
    s.add_argument("--span-limit", type=int, default=4)
    s.add_argument("--stochastic", action="store_true")
    s.add_argument("--out", required=True, help="output prefix (.csv and .json)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="cosine-similarity heatmap for one goal")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--maze", default="medium")
    s.add_argument("--goal", required=True, help="x,y of the goal cell")
    s.add_argument("--action", type=int)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("sweep", help="alpha/method/seed sweep or ablation preset")
    train_flags(s)
    s.add_argument("--methods", default="none,byol_gamma")
    s.add_argument("--alphas", default="1,6,40,100")
    s.add_argument("--seeds", default="0")
    s.add_argument("--ablate", action="store_true", help="run the base config plus its ablation variants")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("rerun", help="re-execute a manifest and verify identical artifacts")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args._argv = argv
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except PreconditionError as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
