"""Command-line entry point: ``critstate <command> [--config C] [--seed N] [--out DIR]``.

Every command writes into its own run directory: the resolved config
(``config.json``, itself a valid ``--config``), a log, ``metrics.json`` and
any artifacts. Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import applications as apps
from . import config as C
from .core import Dataset, DatasetFormatError, load_dataset, save_dataset, split_dataset
from .evaluation import (
    ablation_run,
    ablation_table,
    category_report,
    detect,
    eval_suite,
    plot_trace,
    unstable_combinations,
    write_traces,
)
from .gridworld import generate_dataset
from .models import NumericError
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("critstate")

COMMANDS = ("gen", "train", "detect", "eval", "ablate", "attack", "compare", "improve", "plot", "sweep")


class RunError(RuntimeError):
    pass


# --- helpers ------------------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _data_paths(cfg, args) -> tuple[Path | None, Path | None]:
    """``--data`` may be a gen run directory (train.dsi + test.dsi) or one container."""
    src = args.data or cfg["io"]["data"]
    if not src:
        raise C.ConfigError("io.data: no dataset given (use --data)")
    p = Path(src)
    if p.is_dir():
        tr, te = p / "train.dsi", p / "test.dsi"
        return (tr if tr.exists() else None), (te if te.exists() else None)
    if not p.exists():
        raise RunError(f"dataset {p} does not exist")
    return p, p


def _load_train(cfg, args) -> Dataset:
    tr, _ = _data_paths(cfg, args)
    if tr is None:
        raise RunError("no train.dsi in the data directory")
    return load_dataset(tr)


def _load_test(cfg, args) -> Dataset:
    _, te = _data_paths(cfg, args)
    if te is None:
        raise RunError("no test.dsi in the data directory")
    return load_dataset(te)


def _checkpoint(cfg, args) -> dict:
    src = args.ckpt or cfg["io"]["ckpt"]
    if not src:
        raise C.ConfigError("io.ckpt: no checkpoint given (use --ckpt)")
    p = Path(src)
    if p.is_dir():
        p = p / "model.dsi"
    if not p.exists():
        raise RunError(f"checkpoint {p} does not exist")
    return load_checkpoint(p)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- commands -----------------------------------------------------------------------


def cmd_gen(cfg, args, out: Path) -> dict:
    data = generate_dataset(C.env_config(cfg), C.generation_config(cfg))
    tr, te = split_dataset(data, cfg["dataset"]["test_fraction"], cfg["seed"])
    save_dataset(tr, out / "train.dsi")
    save_dataset(te, out / "test.dsi")
    return {
        "train_counts": tr.manifest["counts"],
        "test_counts": te.manifest["counts"],
        "train_sha256": _sha256(out / "train.dsi"),
        "test_sha256": _sha256(out / "test.dsi"),
    }


def _train_eval(cfg, train_set, test_set, out_dir=None, weights=None):
    res = train(train_set, C.architecture_spec(cfg), C.train_config(cfg), weights or C.loss_weights(cfg),
                out_dir=out_dir)
    report = None
    if test_set is not None:
        report = eval_suite(res.G, res.D, test_set, tau=cfg["eval"]["tau"], window=cfg["eval"]["window"])
    return res, report


def cmd_train(cfg, args, out: Path) -> dict:
    train_set = _load_train(cfg, args)
    _, te = _data_paths(cfg, args)
    test_set = load_dataset(te) if te is not None else None
    res, report = _train_eval(cfg, train_set, test_set, out_dir=out / "checkpoints")
    save_checkpoint(out / "model.dsi", res.G, res.D, epoch=len(res.epochs))
    metrics = {"epochs": res.epochs}
    if report is not None:
        metrics["test"] = report.to_dict()
    return metrics


def cmd_detect(cfg, args, out: Path) -> dict:
    ck = _checkpoint(cfg, args)
    data = _load_test(cfg, args)
    masks = detect(ck["D"], data)
    doc = [{"index": i, "seed": e.seed, "mask": [round(float(v), 6) for v in m]}
           for i, (e, m) in enumerate(zip(data.episodes, masks))]
    (out / "masks.json").write_text(json.dumps(doc))
    write_traces(out / "traces.csv", masks, data.episodes, cfg["eval"]["window"])
    rep = eval_suite(ck["G"], None, data, masks=masks, tau=cfg["eval"]["tau"], window=cfg["eval"]["window"])
    return {"n_episodes": len(masks), "l1_mask": rep.l1_mask, "var_mask": rep.var_mask, "f1": rep.f1}


def cmd_eval(cfg, args, out: Path) -> dict:
    ck = _checkpoint(cfg, args)
    data = _load_test(cfg, args)
    rep = eval_suite(ck["G"], ck["D"], data, tau=cfg["eval"]["tau"], window=cfg["eval"]["window"])
    metrics = {"test": rep.to_dict()}
    if data.episodes and data.episodes[0].actions is not None:
        cats = category_report(ck["D"], data, C.env_config(cfg), cfg["eval"]["window"])
        metrics["categories"] = cats.to_dict()
        (out / "categories.txt").write_text(cats.table() + "\n")
    return metrics


def cmd_ablate(cfg, args, out: Path) -> dict:
    train_set, test_set = _load_train(cfg, args), _load_test(cfg, args)
    rows = ablation_run(
        train_set, test_set, C.architecture_spec(cfg), C.train_config(cfg),
        combinations=[tuple(c) for c in cfg["eval"]["ablation_combinations"]],
        seeds=cfg["eval"]["ablation_seeds"], base_weights=C.loss_weights(cfg), tau=cfg["eval"]["tau"],
        trace_dir=out / "traces",
    )
    (out / "ablation.txt").write_text(ablation_table(rows) + "\n")
    return {
        "rows": [{"terms": list(r.flags), "f1": r.f1, "median_f1": r.median_f1,
                  "reports": [x.to_dict() for x in r.reports]} for r in rows],
        "unstable": [list(f) for f in unstable_combinations(rows)],
    }


def cmd_attack(cfg, args, out: Path) -> dict:
    ck = _checkpoint(cfg, args)
    a = cfg["attack"]
    env = C.env_config(cfg)
    seeds = range(a["episode_seed_start"], a["episode_seed_start"] + a["n_episodes"])
    reports = {}
    for tag, tie in (("in_policy", None), ("unseen_seed", a["unseen_tie_seed"])):
        for mode in a["modes"]:
            r = apps.attack_eval(ck["D"], apps.attack_policy(tie), env, seeds, a["k"], mode, a["rng_seeds"],
                                 policy_tag=f"committed_optimal(tie_seed={tie})")
            reports[f"{tag}/{mode}"] = r.to_dict()
    rows = [(key, r["success_rate_clean"], r["success_rate_attacked"], r["drop"], r["drop_std"])
            for key, r in reports.items()]
    _write_csv(out / "attack.csv", ["run", "clean", "attacked", "drop", "drop_std"], rows)
    return {"reports": reports}


def cmd_compare(cfg, args, out: Path) -> dict:
    train_set, test_set = _load_train(cfg, args), _load_test(cfg, args)
    res, rep = _train_eval(cfg, train_set, test_set, out_dir=out / "checkpoints")
    save_checkpoint(out / "model.dsi", res.G, res.D, epoch=len(res.epochs))
    policy_b = test_set.subset([i for i, e in enumerate(test_set.episodes) if e.policy_id == 1])
    regions = apps.region_confidence(detect(res.D, policy_b), policy_b, C.env_config(cfg)) if len(policy_b) else {}
    return {"classifier_accuracy": rep.clean_acc, "test": rep.to_dict(), "regions": regions}


def cmd_improve(cfg, args, out: Path) -> dict:
    modes = cfg["dqn"]["modes"]
    D = _checkpoint(cfg, args)["D"] if "adaptive" in modes else None
    env = C.dqn_env_config(cfg)
    base = C.dqn_config(cfg)
    results, rows = {}, []
    for mode in modes:
        finals = []
        for seed in cfg["dqn"]["seeds"]:
            r = apps.dqn_train(env, D, replace(base, lookahead=mode), seed)
            finals.append(r.final_success_rate)
            rows += [(mode, seed, t, int(win), ret) for t, win, ret in r.curve]
            log.info("dqn %s seed %d: final success %.3f", mode, seed, r.final_success_rate)
        results[mode] = {"final_success": finals, "median_final_success": float(np.median(finals))}
    _write_csv(out / "curves.csv", ["mode", "seed", "env_step", "success", "return"], rows)
    _plot_curves(out / "curves.png", rows)
    return {"modes": results}


def _plot_curves(path, rows, window: int = 20) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for (mode, seed), grp in itertools.groupby(rows, key=lambda r: (r[0], r[1])):
        grp = list(grp)
        steps = [g[2] for g in grp]
        w = min(window, len(grp))
        wins = np.convolve([g[3] for g in grp], np.ones(w) / w, mode="same")
        ax.plot(steps, wins, label=f"{mode} s{seed}", lw=1)
    ax.set_xlabel("environment step")
    ax.set_ylabel(f"success (moving avg, {window} ep.)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_plot(cfg, args, out: Path) -> dict:
    src = args.detections or cfg["io"]["detections"]
    if not src:
        raise C.ConfigError("io.detections: no detect output given (use --detections)")
    p = Path(src)
    doc = json.loads((p / "masks.json" if p.is_dir() else p).read_text())
    data = _load_test(cfg, args)
    wanted = args.episodes if args.episodes is not None else cfg["eval"]["plot_episodes"]
    written = []
    for i in wanted:
        if not 0 <= i < len(doc):
            raise RunError(f"episode {i} not in the detect output ({len(doc)} episodes)")
        name = f"episode_{i:04d}.png"
        plot_trace(out / name, np.array(doc[i]["mask"]), data.episodes[i], cfg["eval"]["window"],
                   title=f"episode {i} (seed {doc[i]['seed']})")
        written.append(name)
    return {"plots": written}


def cmd_sweep(cfg, args, out: Path) -> dict:
    grid = cfg["eval"]["sweep"]
    if not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise C.ConfigError("eval.sweep: grid must map loss weights to non-empty lists")
    for k in grid:
        if k not in ("lambda_s", "lambda_r", "lambda_v"):
            raise C.ConfigError(f"eval.sweep.{k}: only lambda_s, lambda_r and lambda_v can be swept")
    train_set, test_set = _load_train(cfg, args), _load_test(cfg, args)
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        w = replace(C.loss_weights(cfg), **point)
        _, rep = _train_eval(cfg, train_set, test_set, weights=w)
        rows.append({**point, "f1": rep.f1, "test": rep.to_dict()})
        log.info("sweep %s: F1 %.4f", point, rep.f1)
    variance = {}
    for k in keys:
        by_value = {}
        for r in rows:
            by_value.setdefault(r[k], []).append(100 * r["f1"])
        variance[k] = float(np.var([np.mean(v) for v in by_value.values()]))
    _write_csv(out / "sweep.csv", keys + ["f1"], [[r[k] for k in keys] + [r["f1"]] for r in rows])
    return {"rows": rows, "f1_variance": variance}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --- driver -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name or JSON file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run directory (default runs/<command>)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    common.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    common.add_argument("--data", help="gen run directory or dataset container")
    common.add_argument("--ckpt", help="train run directory or checkpoint file")
    common.add_argument("--detections", help="detect run directory or masks.json")
    common.add_argument("--episodes", type=lambda s: [int(x) for x in s.split(",")], default=None,
                        help="comma-separated episode indices for plot")
    p = argparse.ArgumentParser(prog="critstate", description=__doc__.splitlines()[0])
    p.add_argument("--presets", action="store_true", help="list presets and exit")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__)
    return p


def _prepare_out(args) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise C.ConfigError(f"--out: {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.presets:
        print("\n".join(sorted(C.PRESETS)))
        return 0
    if not args.command:
        parser.print_help()
        return 2
    handler = None
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = C.load_config(args.config, overrides)
        out = _prepare_out(args)
        handler = _setup_logging(out)
        if args.jobs:
            torch.set_num_threads(max(1, args.jobs))
        (out / "config.json").write_text(C.dumps(cfg) + "\n")
        log.info("%s -> %s", args.command, out)
        metrics = HANDLERS[args.command](cfg, args, out)
        doc = {"schema": C.SCHEMA_VERSION, "command": args.command, "seed": cfg["seed"], **metrics}
        (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"{args.command}: wrote {out}")
        return 0
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RunError, NumericError, DatasetFormatError, OSError, ValueError, RuntimeError) as exc:
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 3
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
