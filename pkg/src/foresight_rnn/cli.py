"""Command-line entry point: data generation, training, evaluation, analysis.

Every subcommand is deterministic given its flags and seeds.  Exit codes:
0 success, 1 usage or configuration error, 2 missing or malformed inputs
and I/O failures.  Report-producing commands write a figure next to every
CSV they emit.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .analysis import lyapunov_trace, lyapunov_trace_csv, pca_trajectory_export, variance_trace_csv
from .checkpoint import CheckpointError, load_checkpoint
from .config import VARIANTS, ConfigError, config_from_dict, load_config
from .dataset import DatasetError, Normalizer, load_dataset, save_dataset
from .doorworld import (
    DOOR_TYPES,
    OBS_BOUNDS,
    InterferenceSchedule,
    ModelPolicy,
    OraclePolicy,
    generate_dataset_records,
    make_initial_state,
    run_episode,
    trial_conditions,
)
from .network import open_loop_rollout, param_spec
from .plots import (
    plot_lyapunov,
    plot_metrics,
    plot_pca,
    plot_success_table,
    plot_variance_trace,
)
from .rng import RngStream
from .training import format_metrics_row, gradcheck_variant, metrics_header, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 (2 is reserved for
    missing/malformed inputs)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    types = tuple(t.strip() for t in args.types.split(",") if t.strip())
    for door_type in types:
        if door_type not in DOOR_TYPES:
            raise ConfigError(f"unknown door type '{door_type}' "
                              f"(choose from {', '.join(DOOR_TYPES)})")
    if args.per_type < 1:
        raise ConfigError("--per-type must be >= 1")
    records = generate_dataset_records(args.per_type, types=types,
                                       seed=args.seed)
    save_dataset(args.out, records, OBS_BOUNDS)
    counts = {t: sum(1 for _, d, _ in records if d == t) for t in types}
    for door_type in types:
        print(f"{door_type}: {counts[door_type]} demonstrations")
    print(f"wrote {len(records)} trajectories to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = load_config(args.config)
    trajectories, normalizer = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # snapshot the config verbatim before any training step
    shutil.copyfile(args.config, out / "config.txt")

    names = list(trajectories[0].observations)
    metrics_path = out / "metrics.csv"
    metrics_path.write_text(metrics_header(names) + "\n")

    def progress(row):
        with open(metrics_path, "a") as f:
            f.write(format_metrics_row(row, names) + "\n")
        if row.epoch == 1 or row.epoch % 100 == 0 or row.epoch == config.epochs:
            print(f"[{config.variant}] epoch {row.epoch}/{config.epochs} "
                  f"loss {row.loss_total:.3f}", flush=True)

    log = train(config, trajectories, normalizer, out, progress=progress)
    plot_metrics(log.rows, out / "metrics.png")
    print(f"run complete: {len(log.rows)} epochs, "
          f"{len(log.checkpoints)} checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_model(path):
    params, _, echo, epoch = load_checkpoint(path)
    config = config_from_dict(echo)
    if "modalities" not in echo or "bounds" not in echo:
        raise CheckpointError(f"{path}: checkpoint lacks dataset metadata")
    net = config.network_config([(n, d) for n, d in echo["modalities"]])
    load_checkpoint(path, expected_spec=param_spec(net))
    normalizer = Normalizer(echo["bounds"])
    return params, net, config, normalizer, epoch


class _ModelPolicyFactory:
    def __init__(self, checkpoint_path, seed):
        self.params, self.net, self.config, self.normalizer, _ = (
            _load_model(checkpoint_path))
        self.root = RngStream(seed, ("eval-noise",))
        self.index = 0

    def __call__(self):
        policy = ModelPolicy(self.params, self.net, self.config.variant,
                             self.normalizer, self.root.child(self.index),
                             foresight=self.config.foresight)
        self.index += 1
        return policy


def _parse_interference(text):
    if text is None:
        return None
    try:
        start, end = (int(part) for part in text.split(":"))
        return InterferenceSchedule(start, end)
    except ValueError as e:
        raise ConfigError(f"bad --interference '{text}': {e}") from e


_EVAL_WORKER_STATE = {}


def _eval_worker_init(checkpoint_path, oracle, seed):
    _EVAL_WORKER_STATE["oracle"] = oracle
    _EVAL_WORKER_STATE["factory"] = (
        None if oracle else _ModelPolicyFactory(checkpoint_path, seed))


def _eval_worker_run(task):
    index, condition, max_steps, interference = task
    door_type, offset, hand = condition
    if _EVAL_WORKER_STATE["oracle"]:
        policy = OraclePolicy()
    else:
        factory = _EVAL_WORKER_STATE["factory"]
        factory.index = index  # keyed by episode index for any schedule
        policy = factory()
    episode = run_episode(policy, make_initial_state(door_type, offset, hand=hand),
                          max_steps=max_steps, interference=interference)
    return index, episode


def _run_conditions(checkpoint_path, oracle, seed, conditions, max_steps,
                    interference, jobs):
    tasks = [(i, cond, max_steps, interference)
             for i, cond in enumerate(conditions)]
    if jobs <= 1:
        _eval_worker_init(checkpoint_path, oracle, seed)
        results = [_eval_worker_run(task) for task in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=jobs, initializer=_eval_worker_init,
                initargs=(checkpoint_path, oracle, seed)) as pool:
            results = list(pool.map(_eval_worker_run, tasks))
    results.sort(key=lambda pair: pair[0])
    episodes = [episode for _, episode in results]
    counts = {t: 0 for t in DOOR_TYPES}
    for episode in episodes:
        counts[episode.door_type] += int(episode.success)
    return counts, episodes


def _write_episode_files(directory: Path, index: int, episode,
                         interference) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"episode_{index:03d}_{episode.door_type}"
    steps = len(episode.commands)
    lines = []
    for t in range(steps):
        record = {
            "t": t,
            "held": bool(interference.active(t)) if interference else False,
            "command": [float(x) for x in episode.commands[t]],
            "joint": [float(x) for x in episode.observations["joint"][t + 1]],
            "feat": [float(x) for x in episode.observations["feat"][t + 1]],
            "door_open": float(episode.door_open[t + 1]),
        }
        if episode.mean_var is not None:
            record["mean_var"] = {name: float(v[t])
                                  for name, v in episode.mean_var.items()}
        if episode.foresight:
            record["foresight"] = episode.foresight[t]
        # construction order is deterministic and keeps mean_var in the
        # model's modality order, which downstream CSV exports preserve
        lines.append(json.dumps(record))
    (directory / f"{stem}.jsonl").write_text("\n".join(lines) + "\n")
    summary = dict(episode.summary())
    summary["steps"] = steps
    if interference is not None:
        summary["interference"] = [interference.hold_from, interference.hold_until]
    (directory / f"{stem}.summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")


def _checkpoint_list(args):
    if args.oracle:
        return [(0, None)]
    if args.checkpoint:
        path = Path(args.checkpoint)
        _, _, _, epoch = load_checkpoint(path)
        return [(epoch, path)]
    directory = Path(args.checkpoint_dir)
    if not directory.is_dir():
        raise CheckpointError(f"no checkpoint directory at {directory}")
    paths = sorted(directory.glob("checkpoint_*.ckpt"))
    if not paths:
        raise CheckpointError(f"no checkpoint_*.ckpt files in {directory}")
    entries = []
    for path in paths:
        _, _, _, epoch = load_checkpoint(path)
        entries.append((epoch, path))
    return entries


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint and not args.checkpoint_dir:
        raise ConfigError("eval needs --checkpoint, --checkpoint-dir, or --oracle")
    interference = _parse_interference(args.interference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conditions = trial_conditions(RngStream(args.seed, ("eval-trials",)),
                                  trials_per_type=args.trials)
    table = []
    for epoch, path in _checkpoint_list(args):
        counts, episodes = _run_conditions(
            path, args.oracle, args.seed, conditions, args.max_steps,
            interference, args.jobs)
        episode_dir = out / "episodes" / f"epoch_{epoch:06d}"
        for i, episode in enumerate(episodes):
            _write_episode_files(episode_dir, i, episode, interference)
        table.append((epoch, counts))
        total = sum(counts.values())
        print(f"epoch {epoch}: " +
              " ".join(f"{t}={counts[t]}/{args.trials}" for t in DOOR_TYPES) +
              f"  total {total}/{len(conditions)}", flush=True)

    csv_lines = ["epoch,push_successes,pull_successes,slide_successes"]
    for epoch, counts in table:
        csv_lines.append(f"{epoch},{counts['push']},{counts['pull']},"
                         f"{counts['slide']}")
    (out / "success_table.csv").write_text("\n".join(csv_lines) + "\n")
    plot_success_table(table, out / "success_table.png",
                       trials_per_type=args.trials)
    print(f"wrote {out / 'success_table.csv'}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _require(args, flag_value, flag_name, mode):
    if flag_value is None:
        raise ConfigError(f"analyze {mode} requires {flag_name}")


def _analyze_lyapunov(args, out: Path) -> int:
    _require(args, args.checkpoint, "--checkpoint", "lyapunov")
    _require(args, args.data, "--data", "lyapunov")
    params, net, _, _, _ = _load_model(args.checkpoint)
    trajectories, _ = load_dataset(args.data)
    if args.traj is not None:
        matches = [t for t in trajectories if t.id == args.traj]
        if not matches:
            raise DatasetError(f"no trajectory '{args.traj}' in {args.data}")
        trajectory = matches[0]
    else:
        trajectory = trajectories[0]
    estimates = lyapunov_trace(params, net, trajectory.observations,
                               T=args.t, epsilon=args.epsilon,
                               k_dirs=args.dirs, seed=args.seed)
    (out / "lyapunov.csv").write_text(lyapunov_trace_csv(estimates))
    plot_lyapunov(estimates, out / "lyapunov.png")
    peak = max(estimates, key=lambda e: e.exponent)
    print(f"lyapunov trace over '{trajectory.id}': {len(estimates)} steps, "
          f"peak {peak.exponent:.3f} at t={peak.timestep}")
    print(f"wrote {out / 'lyapunov.csv'}")
    return 0


def _analyze_pca(args, out: Path) -> int:
    _require(args, args.checkpoint, "--checkpoint", "pca")
    _require(args, args.data, "--data", "pca")
    params, net, config, normalizer, _ = _load_model(args.checkpoint)
    trajectories, _ = load_dataset(args.data)
    if args.offline_limit > 0:
        trajectories = trajectories[:args.offline_limit]
    offline = []
    for traj in trajectories:
        _, states = open_loop_rollout(params, net, traj.observations)
        rows = np.stack([s.shared_h[0] for s in states])
        offline.append((f"offline_{traj.id}", traj.door_type, rows))
    online = []
    online_types = tuple(t for t in args.online_types.split(",") if t)
    for door_type in online_types:
        if door_type not in DOOR_TYPES:
            raise ConfigError(f"unknown door type '{door_type}'")
        policy = ModelPolicy(params, net, config.variant, normalizer,
                             RngStream(args.seed, ("analyze-online", door_type)),
                             foresight=config.foresight)
        episode = run_episode(policy, make_initial_state(door_type, 0.0),
                              max_steps=args.max_steps)
        online.append((f"online_{door_type}", door_type, episode.shared_h))
    export = pca_trajectory_export(offline, online, k=2)
    (out / "pca.csv").write_text(export.csv())
    plot_pca(export, out / "pca.png")
    groups = len(offline) + len(online)
    explained = ", ".join(f"{v:.4f}" for v in export.explained_variance)
    print(f"pca: {groups} trajectories projected "
          f"(eigenvalues {explained})")
    print(f"wrote {out / 'pca.csv'}")
    return 0


def _analyze_variance(args, out: Path) -> int:
    _require(args, args.episode, "--episode", "variance")
    path = Path(args.episode)
    if not path.exists():
        raise DatasetError(f"no episode log at {path}")
    mean_var_rows, foresight = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path} line {lineno}: {e}") from e
        if "mean_var" not in record:
            raise DatasetError(
                f"{path} line {lineno}: no mean_var field — was this episode "
                f"driven by a model policy?")
        mean_var_rows.append(record["mean_var"])
        if "foresight" in record:
            foresight.append({"sigma": record["foresight"]["sigma"],
                              "scores": record["foresight"]["scores"],
                              "selected_index": record["foresight"]["selected_index"]})
    if not mean_var_rows:
        raise DatasetError(f"{path}: empty episode log")
    names = list(mean_var_rows[0])
    mean_var = {name: np.array([row[name] for row in mean_var_rows])
                for name in names}
    if len(foresight) != len(mean_var_rows):
        print("warning: episode has no foresight diagnostics; "
              "sigma column omitted")
        foresight = []
    (out / "variance.csv").write_text(variance_trace_csv(mean_var, foresight))
    times = np.arange(len(mean_var_rows))
    sigma = (np.array([f["sigma"] for f in foresight]) if foresight else None)
    plot_variance_trace(times, mean_var, sigma, out / "variance.png")
    print(f"wrote {out / 'variance.csv'}")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "lyapunov":
        return _analyze_lyapunov(args, out)
    if args.what == "pca":
        return _analyze_pca(args, out)
    return _analyze_variance(args, out)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    all_ok = True
    for variant in VARIANTS:
        report = gradcheck_variant(variant, seed=args.seed,
                                   inject_bug=args.inject_bug)
        ok = report.max_rel_error <= GRADCHECK_TOLERANCE
        all_ok = all_ok and ok
        print(f"{variant}: max relative error {report.max_rel_error:.3e} "
              f"({report.n_checked} coords checked, "
              f"{report.n_skipped} below the finite-difference noise floor) "
              f"{'ok' if ok else 'FAIL'}")
        for name in sorted(report.per_array):
            print(f"    {name}: {report.per_array[name]:.3e}")
    print(f"gradcheck {'passed' if all_ok else 'FAILED'} "
          f"(tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="foresight-rnn",
                     description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a scripted-demonstration dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", type=int, default=5)
    p.add_argument("--types", default=",".join(DOOR_TYPES))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run door-opening trials from checkpoints")
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--oracle", action="store_true",
                   help="test hook: run the scripted oracle instead of a model")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--interference", metavar="FROM:TO")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="export dynamics analyses from a model")
    p.add_argument("what", choices=("lyapunov", "pca", "variance"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--episode", help="episode .jsonl from eval (variance mode)")
    p.add_argument("--traj", help="trajectory id for the lyapunov trace")
    p.add_argument("--t", type=int, default=10, help="closed-loop horizon")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--dirs", type=int, default=10)
    p.add_argument("--offline-limit", type=int, default=0,
                   help="use only the first N dataset trajectories (0 = all)")
    p.add_argument("--online-types", default=",".join(DOOR_TYPES))
    p.add_argument("--max-steps", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--size", choices=("tiny",), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-bug", action="store_true",
                   help="negative control: corrupt the analytic gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
