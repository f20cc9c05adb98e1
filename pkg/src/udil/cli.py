"""Command-line driver: gen-demos, select-dims, train, eval, report.

Options can also come from an INI-style config file given with ``--config``.
Keys in ``[common]`` apply to every command, keys in a section named after
the command (``[train]``, ``[select-dims]``...) apply to that command only.
Keys use the long option name with dashes or underscores.  Command-line
flags override file values.  ``UDIL_OUTPUT_DIR`` sets the default output root.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .adversary import METRIC_COLUMNS, TrainConfig, TrainingAborted, evaluate_progress, udil_train
from .envsuite import ENV_NAMES, gen_expert_demos, make_env, scripted_progress, scripted_rollout
from .miembed import (
    DEFAULT_FRAMESKIP,
    DEFAULT_K,
    EmbeddingSpec,
    build_mi_report,
    cumulative_mi_curve,
    select_embedding,
)
from .policy import CemConfig, PolicyParams
from .trajstore import DemoParseError, ValidationError, read_demo_set, write_demo_set

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
DEFAULT_SEEDS = "0,1,2,3,4,5"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def output_root() -> Path:
    return Path(os.environ.get("UDIL_OUTPUT_DIR", "udil_out"))


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fmt(x):
    return repr(float(x))


def parse_seeds(text) -> list:
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("at least one seed is required")
    return seeds


def mean_stderr(values):
    """Mean and standard error (sample stdev / sqrt(n); 0 for one value)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    mean = math.fsum(v) / len(v)
    if len(v) < 2:
        return mean, 0.0
    return mean, float(np.std(v, ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_demos(args):
    env = make_env(args.env, seed=args.seed, horizon=args.horizon)
    demos = gen_expert_demos(env, args.n, args.horizon, seed=args.seed)
    out = Path(args.out) if args.out else output_root() / f"demos-{args.env}-n{args.n}-s{args.seed}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_demo_set(out, demos)
    final = np.array([env.progress(t[-1]) for t in demos.trajectories])
    print(f"wrote {out}")
    print(f"trajectories={len(demos)} horizon={args.horizon} dim={demos.dim}")
    print(f"final progress: mean={final.mean():.4f} min={final.min():.4f} max={final.max():.4f}")
    return EXIT_OK


def cmd_select_dims(args):
    demos = read_demo_set(args.demos)
    report = build_mi_report(demos, args.frameskip, args.k, args.seed)
    override = args.override_dims
    if override is None:
        spec = select_embedding(report, args.frameskip, args.seed)
    elif override.strip().lower() == "all":
        spec = EmbeddingSpec(list(range(demos.dim)), report, demos.dim - 1, False,
                             args.frameskip, args.k, args.seed)
    else:
        dims = [int(d) for d in override.split(",") if d.strip()]
        bad = [d for d in dims if not 0 <= d < demos.dim]
        if bad or not dims:
            raise ValidationError(f"--override-dims must list dims in [0, {demos.dim}), got {override!r}")
        spec = EmbeddingSpec(dims, report, len(dims) - 1, False, args.frameskip, args.k, args.seed)
    out = Path(args.out) if args.out else output_root() / "embedding.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    spec.save(out)

    curve = cumulative_mi_curve(report)
    print("dim  mi_nats")
    for d, mi in report.per_dim_mi:
        print(f"{d:>3}  {mi:.6f}")
    print("cumulative (sorted): " + " ".join(f"{c:.6f}" for c in curve.cumulative))
    print(f"elbow_index={spec.elbow_index} selected_dims={spec.selected_dims}")
    print(f"wrote {out}")
    return EXIT_OK


def _train_config(args, seed) -> TrainConfig:
    horizon = args.horizon
    policy = CemConfig(population=args.population, elite_frac=args.elite_frac,
                       noise_std=args.noise_std, episodes_per_candidate=args.episodes_per_candidate,
                       horizon=horizon)
    return TrainConfig(
        lr_encoder=args.lr_encoder, lr_discriminator=args.lr_discriminator,
        encoder_update_prob=args.encoder_update_prob, use_bias=args.use_bias,
        batch_size=args.batch_size, disc_updates_per_iter=args.disc_updates,
        policy=policy, total_iters=args.iters, rng_seed=seed, reward_mode=args.reward_mode,
        embedding_dim_override=args.embedding_dim, pair_input=args.ablation != "no-pair",
    )


def cmd_train(args):
    demos = read_demo_set(args.demos)
    f = EmbeddingSpec.load(args.embedding)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out) if args.out else output_root() / "run"
    for seed in seeds:
        cfg = _train_config(args, seed)
        env = make_env(args.env, seed=seed, horizon=args.horizon)
        try:
            art = udil_train(env, demos, f, cfg)
        except TrainingAborted as exc:
            print(f"seed {seed}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        d = out / f"seed-{seed}"
        d.mkdir(parents=True, exist_ok=True)
        _write(d / "metrics.csv", art.metrics_csv())
        art.policy.save(d / "policy.json")
        dc.save_checkpoint(d / "encoder.json", art.encoder)
        dc.save_checkpoint(d / "discriminator.json", art.discriminator)
        meta = {"env": args.env, "horizon": args.horizon, "seed": seed,
                "selected_dims": [int(x) for x in art.embedding.selected_dims],
                "reward_mode": cfg.reward_mode.value, "ablation": args.ablation,
                "iters": cfg.total_iters}
        _write(d / "run.json", json.dumps(meta, sort_keys=True) + "\n")
        last = art.metrics[-1] if art.metrics else None
        tail = f" eval_true_reward={last['eval_true_reward']:.4f}" if last else ""
        print(f"seed {seed}: wrote {d}{tail}")
    return EXIT_OK


def _seed_dirs(run_dir, seeds_arg):
    run_dir = Path(run_dir)
    if seeds_arg:
        dirs = [run_dir / f"seed-{s}" for s in parse_seeds(seeds_arg)]
    else:
        dirs = sorted(run_dir.glob("seed-*"), key=lambda p: int(p.name.split("-", 1)[1]))
    if not dirs:
        raise FileNotFoundError(f"no seed-* directories in {run_dir}")
    return dirs


def cmd_eval(args):
    if args.scripted:
        env = make_env(args.env, seed=0, horizon=args.horizon)
        states = scripted_rollout(env, args.episodes, args.horizon, args.eval_seed)
        prog = env.progress(states[:, -1]) - env.progress(states[:, 0])
        mean, se = mean_stderr(prog)
        ratio = mean / scripted_progress(env, args.horizon)
        print(f"scripted expert on {args.env}: progress={mean:.6f} +- {se:.6f} ratio={ratio:.6f}")
        return EXIT_OK
    rows = []
    for d in _seed_dirs(args.run_dir, args.seeds):
        ckpt = d / "policy.json"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        meta = json.loads((d / "run.json").read_text(encoding="utf-8"))
        env = make_env(meta["env"], seed=meta["seed"], horizon=meta["horizon"])
        policy = PolicyParams.load(ckpt)
        prog = evaluate_progress(env, policy, args.episodes, meta["horizon"], args.eval_seed)
        ref = scripted_progress(env, meta["horizon"])
        mean, se = mean_stderr(prog)
        rows.append((meta["seed"], mean, se, mean / ref))
    lines = ["seed,mean_progress,stderr_progress,ratio"]
    lines += [f"{s},{_fmt(m)},{_fmt(e)},{_fmt(r)}" for s, m, e, r in rows]
    ratios = [r for *_, r in rows]
    rm, rse = mean_stderr(ratios)
    out = Path(args.out) if args.out else Path(args.run_dir) / "eval.csv"
    _write(out, "\n".join(lines) + "\n")
    for s, m, e, r in rows:
        print(f"seed {s}: progress={m:.4f} +- {e:.4f} ratio={r:.4f}")
    print(f"ratio across seeds: {rm:.4f} +- {rse:.4f} (median {float(np.median(ratios)):.4f})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args):
    series = []
    for d in _seed_dirs(args.run_dir, args.seeds):
        path = d / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing metrics file {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            series.append(list(csv.DictReader(fh)))
    n_iter = min(len(s) for s in series)
    cols = METRIC_COLUMNS[1:]
    header = ["iter", "n_seeds"] + [f"{c}_{k}" for c in cols for k in ("mean", "stderr")]
    lines = [",".join(header)]
    for i in range(n_iter):
        row = [series[0][i]["iter"], str(len(series))]
        for c in cols:
            m, e = mean_stderr([float(s[i][c]) for s in series])
            row += [_fmt(m), _fmt(e)]
        lines.append(",".join(row))
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.csv"
    _write(out, "\n".join(lines) + "\n")
    print(f"aggregated {len(series)} seeds over {n_iter} iterations; wrote {out}")
    if n_iter:
        m, e = mean_stderr([float(s[n_iter - 1]["eval_true_reward"]) for s in series])
        print(f"final eval_true_reward: {m:.4f} +- {e:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


_BOOL_DESTS = {"use_bias", "scripted"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="udil", description="Cross-domain imitation from state-only demonstrations.")
    p.add_argument("--config", help="INI config file; flags override its values")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="generate scripted expert demonstrations")
    g.add_argument("--env", default="expert-line", choices=ENV_NAMES)
    g.add_argument("--n", type=int, default=20, help="number of trajectories")
    g.add_argument("--horizon", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_demos)

    s = sub.add_parser("select-dims", help="choose task-relevant dims by mutual information")
    s.add_argument("--demos", required=True)
    s.add_argument("--override-dims", help="comma-separated dims, or 'all'")
    s.add_argument("--frameskip", type=int, default=DEFAULT_FRAMESKIP)
    s.add_argument("--k", type=int, default=DEFAULT_K)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_select_dims)

    t = sub.add_parser("train", help="train encoder, discriminator and policy per seed")
    t.add_argument("--demos", required=True)
    t.add_argument("--embedding", required=True)
    t.add_argument("--env", default="learner-line-negated-scaled", choices=ENV_NAMES)
    t.add_argument("--seeds", default=DEFAULT_SEEDS)
    t.add_argument("--iters", type=int, default=100)
    t.add_argument("--horizon", type=int, default=100)
    t.add_argument("--reward-mode", default="adversarial", choices=["adversarial", "goal-distance"])
    t.add_argument("--ablation", default="none", choices=["none", "no-pair"])
    t.add_argument("--lr-encoder", type=float, default=0.001)
    t.add_argument("--lr-discriminator", type=float, default=0.001)
    t.add_argument("--encoder-update-prob", type=float, default=0.01)
    t.add_argument("--use-bias", action="store_true")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--disc-updates", type=int, default=4)
    t.add_argument("--embedding-dim", type=int, help="keep only the top-d dims by MI")
    t.add_argument("--population", type=int, default=64)
    t.add_argument("--elite-frac", type=float, default=0.125)
    t.add_argument("--noise-std", type=float, default=0.2)
    t.add_argument("--episodes-per-candidate", type=int, default=2)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained policies without action noise")
    e.add_argument("--run-dir")
    e.add_argument("--seeds")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--eval-seed", type=int, default=12345)
    e.add_argument("--scripted", action="store_true", help="evaluate the scripted expert instead")
    e.add_argument("--env", default="expert-line", choices=ENV_NAMES)
    e.add_argument("--horizon", type=int, default=100)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate per-seed metrics into mean and stderr curves")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--seeds")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _config_defaults(path, command, subparser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"config file not found: {path}")
    known = {a.dest: a for a in subparser._actions}
    out = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key in cp.options(section):
            dest = key.replace("-", "_")
            if dest not in known:
                if section == "common":
                    continue
                raise ValidationError(f"{path}: unknown key {key!r} in [{section}]")
            if dest in _BOOL_DESTS:
                out[dest] = cp.getboolean(section, key)
            else:
                out[dest] = cp.get(section, key)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, rest = pre.parse_known_args(argv)
        commands = parser._subparsers._group_actions[0].choices
        command = next((a for a in rest if a in commands), None)
        if known.config and command:
            sub = commands[command]
            defaults = _config_defaults(known.config, command, sub)
            for a in sub._actions:
                if a.dest in defaults:
                    a.required = False
            # string defaults go through each option's type conversion
            sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        if args.command == "eval" and not args.scripted and not args.run_dir:
            raise ValidationError("eval needs --run-dir (or --scripted)")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, DemoParseError, ValueError, FileNotFoundError,
            json.JSONDecodeError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingAborted, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
