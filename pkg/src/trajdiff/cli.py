"""Command-line entry point: ``trajdiff {gen-data,train,sample,eval}``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("trajdiff")

DEFAULTS = {
    "task": "tabletop",
    "horizon": None,
    "geometry": {},
    "solver": {},
    "dataset": {"problems": 100, "guesses": 25, "test_fraction": 0.1, "split_seed": 0},
    "schedule": {"K": 64, "beta_start": None, "beta_end": None},
    "denoiser": {"desk_scale": True, "hidden_widths": None, "cond_encoder_widths": None, "time_embed_dim": None},
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 1e-4,
        "adam_betas": [0.9, 0.999],
        "p_uncond": 0.1,
        "violation_weight": 0.01,
        "n_gt": 10,
        "mu_floor": 1e-3,
        "constraint_aware": False,
        "gt_marginal": "consistent",
        "checkpoint_every": 0,
    },
    "eval": {
        "n_samples": 10,
        "omega": 1.0,
        "feasible_eps": 1e-6,
        "curve_data": 128,
        "curve_samples": 100,
        "uniform_per_problem": 10,
        "warm_start_per_problem": 1,
    },
    "seed": 0,
    "threads": None,
    "out": None,
}

# keys whose values are free-form dictionaries validated elsewhere
_OPEN_SECTIONS = {"geometry", "solver"}


class UsageError(Exception):
    pass


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key not in _OPEN_SECTIONS and path == "":
            if not isinstance(val, dict):
                raise UsageError(f"config key {where} must be an object")
            out[key] = merge_config(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    return merge_config(DEFAULTS, raw)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_provenance(out_dir: Path, cfg: dict, command: str, seed: int) -> None:
    import scipy
    import torch

    from . import __version__

    prov = {
        "command": command,
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": seed,
        "versions": {
            "trajdiff": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True, default=str) + "\n")


def _threads(cfg: dict) -> int:
    n = cfg.get("threads") or os.environ.get("TRAJDIFF_THREADS") or 1
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"invalid thread count {n!r}")
    if n < 1:
        raise UsageError("thread count must be >= 1")
    import torch

    torch.set_num_threads(n)
    return n


def _task_from_cfg(cfg: dict):
    from .problems import make_task

    try:
        return make_task(cfg["task"], cfg["horizon"], **cfg["geometry"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid task configuration: {exc}")


def _solver_opts(cfg: dict):
    from .solver import SolveOptions

    try:
        return SolveOptions(**cfg["solver"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid solver options: {exc}")


def _load_dataset(path):
    from . import dataset as ds_mod

    if path is None:
        raise UsageError("--data is required")
    if not Path(path).is_dir():
        raise UsageError(f"dataset path not found: {path}")
    return ds_mod.load(path)


def _train_config(cfg: dict):
    from .training import TrainConfig

    t, s = cfg["train"], cfg["schedule"]
    try:
        return TrainConfig(seed=cfg["seed"], K=s["K"], beta_start=s["beta_start"], beta_end=s["beta_end"], **t)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}")


def _split(dataset, cfg):
    from . import dataset as ds_mod

    try:
        return ds_mod.split(dataset, cfg["dataset"]["test_fraction"], cfg["dataset"]["split_seed"])
    except ValueError:
        logger.warning("fewer than 2 problems; using the whole dataset for both sides")
        return dataset, dataset


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    return Path(cfg["out"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    from . import dataset as ds_mod

    d = cfg["dataset"]
    if int(d["problems"]) < 1 or int(d["guesses"]) < 1:
        raise UsageError("--problems and --guesses must be >= 1")
    out = _out_dir(cfg)
    task = _task_from_cfg(cfg)
    opts = _solver_opts(cfg)
    n_jobs = _threads(cfg)
    ds = ds_mod.generate(task, int(d["problems"]), int(d["guesses"]), int(cfg["seed"]), opts, n_jobs=n_jobs)
    ds_mod.save(ds, out)
    (out / "generation_log.json").write_text(json.dumps(ds.provenance, indent=2, sort_keys=True) + "\n")
    write_provenance(out, cfg, "gen-data", cfg["seed"])
    print(f"wrote {len(ds)} pairs to {out}")
    return 0


def cmd_train(cfg: dict, data: str | None) -> int:
    from .denoiser import DenoiserConfig
    from .training import train

    dataset = _load_dataset(data)
    out = _out_dir(cfg)
    tcfg = _train_config(cfg)
    dn = cfg["denoiser"]
    overrides = {k: v for k, v in dn.items() if k != "desk_scale" and v is not None}
    try:
        dcfg = DenoiserConfig.for_task(dataset.task, desk_scale=dn["desk_scale"], **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid denoiser configuration: {exc}")
    _threads(cfg)
    train_part, _ = _split(dataset, cfg)
    res = train(train_part, tcfg, dcfg, out_dir=out)
    write_provenance(out, cfg, "train", cfg["seed"])
    print(f"trained {tcfg.epochs} epochs; final checkpoint {res.checkpoints[-1]}")
    return 0


def _checkpoint_schedule(meta: dict):
    from .diffusion import make_schedule

    s = meta["provenance"]["schedule"]
    return make_schedule(s["K"], s["beta_start"], s["beta_end"])


def cmd_sample(cfg: dict, ckpt: str | None, data: str | None, split_side: str) -> int:
    from . import dataset as ds_mod
    from .denoiser import DenoiserConfig, load_checkpoint, read_checkpoint_meta
    from .diffusion import sample_many

    dataset = _load_dataset(data)
    out = _out_dir(cfg)
    if ckpt is None or not Path(ckpt).is_dir():
        raise UsageError(f"checkpoint path not found: {ckpt}")
    ckpt_path = Path(ckpt)
    if not (ckpt_path / "meta.json").is_file() and (ckpt_path / "final" / "meta.json").is_file():
        ckpt_path = ckpt_path / "final"
    meta = read_checkpoint_meta(ckpt_path)
    model = load_checkpoint(ckpt_path, DenoiserConfig.for_task(dataset.task))
    model.eval()
    sched = _checkpoint_schedule(meta)
    _threads(cfg)

    train_part, test_part = _split(dataset, cfg)
    part = {"test": test_part, "train": train_part, "all": dataset}[split_side]
    ids = part.problem_ids()
    _, first = np.unique(ids, return_index=True)
    cond = part.y[np.sort(first)]
    ev = cfg["eval"]
    samples, index = sample_many(model, cond, int(ev["n_samples"]), float(ev["omega"]), sched, seed=int(cfg["seed"]))
    aware = bool(meta["provenance"].get("train_config", {}).get("constraint_aware", False))
    prov = {
        "method": "constr_diff" if aware else "diffusion",
        "checkpoint": str(ckpt_path),
        "omega": float(ev["omega"]),
        "n_per_problem": int(ev["n_samples"]),
        "seed": int(cfg["seed"]),
        "split": split_side,
    }
    out_ds = ds_mod.TrajectoryDataset(dataset.task, samples, cond[index], dataset.stats, prov, index, kind="samples")
    ds_mod.save(out_ds, out)
    write_provenance(out, cfg, "sample", cfg["seed"])
    print(f"wrote {len(out_ds)} samples for {len(cond)} problems to {out}")
    return 0


def cmd_eval(cfg: dict, data: str | None, sample_dirs, warm: bool, curves: bool, uniform: bool) -> int:
    from . import dataset as ds_mod
    from . import evaluation as ev_mod
    from .diffusion import default_schedule, make_schedule

    dataset = _load_dataset(data)
    out = _out_dir(cfg)
    ev = cfg["eval"]
    task, stats = dataset.task, dataset.stats
    opts = _solver_opts(cfg)
    _threads(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))

    sets = {}
    for path in sample_dirs or []:
        if not Path(path).is_dir():
            raise UsageError(f"samples path not found: {path}")
        s = ds_mod.load(path, expected_task=task)
        name = s.provenance.get("method", "dataset" if s.kind == "trajectory_dataset" else Path(path).name)
        while name in sets:
            name += "_"
        sets[name] = s
    if not sets and not uniform:
        # nothing to compare against: evaluate the dataset's own solutions
        sets["dataset"] = dataset

    if uniform:
        if sets:
            conds = np.unique(np.concatenate([s.y for s in sets.values()]), axis=0)
        else:
            _, test_part = _split(dataset, cfg)
            conds = np.unique(test_part.y, axis=0)
        u, uc, ui = ev_mod.uniform_baseline(conds, task, stats, int(ev["uniform_per_problem"]), rng)
        sets["uniform"] = ds_mod.TrajectoryDataset(task, stats.normalize_x(stats.denormalize_x(u)), uc, stats,
                                                   {"method": "uniform"}, ui, kind="samples")

    vio = {name: ev_mod.violation_stats(s.x, s.y, task, stats, float(ev["feasible_eps"])) for name, s in sets.items()}
    warm_stats = {}
    if warm:
        per = int(ev["warm_start_per_problem"])
        for name, s in sets.items():
            ids = s.problem_index if s.problem_index is not None else s.problem_ids()
            rows = np.concatenate([np.flatnonzero(ids == i)[:per] for i in np.unique(ids)])
            warm_stats[name] = ev_mod.warm_start_stats(s.x[rows], s.y[rows], task, stats, opts)

    curve = None
    if curves:
        s = cfg["schedule"]
        sched = default_schedule(s["K"]) if s["beta_start"] is None else make_schedule(s["K"], s["beta_start"], s["beta_end"])
        n_data = min(int(ev["curve_data"]), len(dataset))
        curve = ev_mod.gt_violation_curve(dataset, sched, n_data, int(ev["curve_samples"]), task, rng)

    rep = ev_mod.report(task, vio, warm_stats, curve, extra={"seed": int(cfg["seed"])})
    ev_mod.write_report(rep, out, curve)
    write_provenance(out, cfg, "eval", cfg["seed"])
    for row in rep.get("table1", []):
        print("{method:>12s}  mean {mean:.4f}  std {std:.4f}  q25 {q25:.4f}  feasible {feasible_per_mille:.1f}".format(**row))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int)

    g = sub.add_parser("gen-data", help="solve random problems and write a dataset")
    common(g)
    g.add_argument("--task", choices=["tabletop", "two_car", "two-car"])
    g.add_argument("--horizon", type=int)
    g.add_argument("--problems", type=int)
    g.add_argument("--guesses", type=int)

    t = sub.add_parser("train", help="train a (constraint-aware) diffusion model")
    common(t)
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--constraint-aware", action="store_true", default=None)
    t.add_argument("--lambda", dest="violation_weight", type=float)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--p-uncond", type=float)
    t.add_argument("--n-gt", type=int)
    t.add_argument("--K", type=int)

    s = sub.add_parser("sample", help="sample trajectories for dataset problems")
    common(s)
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--n", type=int)
    s.add_argument("--omega", type=float)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")

    e = sub.add_parser("eval", help="violation / warm-start statistics and curves")
    common(e)
    e.add_argument("--data")
    e.add_argument("--samples", action="append")
    e.add_argument("--warm-start", action="store_true")
    e.add_argument("--curves", action="store_true")
    e.add_argument("--uniform-baseline", action="store_true")
    e.add_argument("--K", type=int)
    return p


def _apply_flags(cfg: dict, args) -> dict:
    def put(section, key, val):
        if val is not None:
            if section is None:
                cfg[key] = val
            else:
                cfg[section][key] = val

    put(None, "seed", getattr(args, "seed", None))
    put(None, "out", getattr(args, "out", None))
    put(None, "threads", getattr(args, "threads", None))
    if getattr(args, "task", None):
        put(None, "task", args.task.replace("-", "_"))
    put(None, "horizon", getattr(args, "horizon", None))
    put("dataset", "problems", getattr(args, "problems", None))
    put("dataset", "guesses", getattr(args, "guesses", None))
    for key in ("epochs", "constraint_aware", "violation_weight", "learning_rate", "batch_size", "p_uncond", "n_gt"):
        put("train", key, getattr(args, key, None))
    put("schedule", "K", getattr(args, "K", None))
    put("eval", "n_samples", getattr(args, "n", None))
    put("eval", "omega", getattr(args, "omega", None))
    return cfg


def main(argv=None) -> int:
    from .exceptions import FormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.data)
        if args.command == "sample":
            return cmd_sample(cfg, args.ckpt, args.data, args.split)
        return cmd_eval(cfg, args.data, args.samples, args.warm_start, args.curves, args.uniform_baseline)
    except UsageError as exc:
        print(f"trajdiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"trajdiff {args.command}: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"trajdiff {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
