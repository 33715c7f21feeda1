"""Command-line entry point: ``corrmae <command> [options]``.

Commands: gen-data, pretrain, finetune, eval, ablate, plot.

Configuration precedence, lowest first: built-in defaults, the ``--config``
JSON file, ``--set section.key=value`` overrides, then dedicated flags such
as ``--seed``. Every command writes ``config.json`` (the resolved config)
and ``log.jsonl`` into its output directory. Exit codes: 0 success, 1 usage
or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .corrformer import EncoderConfig
from .errors import ConfigError, CorrMAEError
from .finetune import FinetuneConfig
from .mae import PretrainConfig
from .synthdata import SceneConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "CORRMAE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

log = logging.getLogger("corrmae")

# Plain sections and their defaults; dataclass sections are validated by their own types.
_PLAIN = {
    "data": {"count": 200, "dtype": "<f8"},
    "eval": {"batch": 16},
    "ablate": {"seeds": [0, 1, 2, 3, 4], "lam_on": None},
    "plot": {"dpi": 120},
}
_DATACLASS = {"scene": SceneConfig, "encoder": EncoderConfig, "pretrain": PretrainConfig, "finetune": FinetuneConfig}
_TOP = {"schema_version", "seed", "workers", "deterministic", *_PLAIN, *_DATACLASS}
_SEEDED = ("scene", "pretrain", "finetune")


class UsageError(Exception):
    pass


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def default_config() -> dict:
    cfg = {"schema_version": SCHEMA_VERSION, "seed": 0, "workers": 1, "deterministic": False}
    for name, cls in _DATACLASS.items():
        d = cls().to_dict()
        d.pop("encoder", None)
        cfg[name] = d
    for name, d in _PLAIN.items():
        cfg[name] = dict(d)
    return cfg


def merge_config(base: dict, override: dict, problems: List[str], where: str = "") -> dict:
    """Recursive merge that records unknown keys instead of accepting them."""
    out = dict(base)
    for k, v in override.items():
        path = f"{where}{k}"
        if k not in base:
            problems.append(f"unknown config key {path!r}")
            continue
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge_config(base[k], v, problems, path + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d: dict = {}
    cur = d
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return d


def _coerce(cls, section: dict, problems: List[str], name: str):
    d = dict(section)
    for k, v in list(d.items()):
        if isinstance(v, list) and k == "depth_range":
            d[k] = tuple(v)
    try:
        return cls(**d)
    except ConfigError as e:
        problems.extend(f"{name}: {p}" for p in e.problems)
    except (TypeError, ValueError) as e:
        problems.append(f"{name}: {e}")
    return None


def resolve_config(path: Optional[str], overrides: List[str], flags: Dict[str, object]) -> dict:
    """Build and validate the run config; raises ConfigError listing every problem."""
    problems: List[str] = []
    cfg = default_config()
    user: dict = {}
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([f"cannot read config {path}: {e}"]) from e
        if not isinstance(user, dict):
            raise ConfigError(["config file must hold a JSON object"])
        if user.get("schema_version") != SCHEMA_VERSION:
            problems.append(f"schema_version must be {SCHEMA_VERSION}, got {user.get('schema_version')!r}")
    explicit_seeds = {s for s in _SEEDED if "seed" in user.get(s, {})}
    cfg = merge_config(cfg, user, problems)
    for text in overrides:
        o = parse_override(text)
        explicit_seeds |= {s for s in _SEEDED if isinstance(o.get(s), dict) and "seed" in o[s]}
        cfg = merge_config(cfg, o, problems)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    if cfg["deterministic"]:
        cfg["workers"] = 1
    for s in _SEEDED:
        if s not in explicit_seeds:
            cfg[s]["seed"] = cfg["seed"]
    for name, cls in _DATACLASS.items():
        unknown = set(cfg[name]) - _field_names(cls)
        problems.extend(f"unknown config key '{name}.{k}'" for k in sorted(unknown))
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        problems.append("workers must be a positive integer")
    if not isinstance(cfg["data"]["count"], int) or cfg["data"]["count"] < 1:
        problems.append("data.count must be a positive integer")
    if cfg["data"]["dtype"] not in ("<f8", "<f4"):
        problems.append("data.dtype must be '<f8' or '<f4'")
    enc = _coerce(EncoderConfig, cfg["encoder"], problems, "encoder")
    _coerce(SceneConfig, cfg["scene"], problems, "scene")
    if enc is not None:
        _coerce(PretrainConfig, {**cfg["pretrain"], "encoder": enc}, problems, "pretrain")
        _coerce(FinetuneConfig, {**cfg["finetune"], "encoder": enc}, problems, "finetune")
    if problems:
        raise ConfigError(problems)
    return cfg


def build(cfg: dict, name: str):
    enc = EncoderConfig(**cfg["encoder"])
    section = dict(cfg[name])
    if name == "scene":
        section["depth_range"] = tuple(section["depth_range"])
        return SceneConfig(**section)
    if name == "encoder":
        return enc
    return _DATACLASS[name](**section, encoder=enc)


class Run:
    """Output directory bookkeeping: config echo, JSONL log, cleanup on failure."""

    def __init__(self, out_dir: Path, command: str, cfg: dict):
        self.out = out_dir
        self.command = command
        self.created_dir = not out_dir.exists()
        self.out.mkdir(parents=True, exist_ok=True)
        self.before = set(self.out.iterdir())
        self.log_file = open(self.out / "log.jsonl", "a")
        with open(self.out / "config.json", "w") as f:
            json.dump({"command": command, "version": __version__, **cfg}, f, indent=1, sort_keys=True)
        self.event("start")

    def path(self, name: str) -> Path:
        return self.out / name

    def event(self, event: str, **fields) -> None:
        rec = {"time": round(time.time(), 3), "command": self.command, "event": event, **fields}
        self.log_file.write(json.dumps(rec, default=str) + "\n")
        self.log_file.flush()
        log.info("%s %s", event, json.dumps(fields, default=str) if fields else "")

    def close(self, ok: bool, error: str = "") -> None:
        if ok:
            self.event("done")
            self.log_file.close()
            return
        self.event("failed", error=error)
        self.log_file.close()
        if self.created_dir:
            shutil.rmtree(self.out, ignore_errors=True)
            return
        for p in set(self.out.iterdir()) - self.before:
            if p.name in ("log.jsonl", "config.json"):
                continue
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def cmd_gen_data(args, cfg, run: Run) -> None:
    from .synthdata import generate_dataset, read_header, write_dataset

    scene = build(cfg, "scene")
    count = cfg["data"]["count"]
    scenes = generate_dataset(scene, count, workers=cfg["workers"])
    out = run.path("dataset.bin")
    write_dataset(scenes, out, {"scene": scene.to_dict(), "count": count}, dtype=cfg["data"]["dtype"])
    header, _ = read_header(out)
    inl = float(np.mean([s.inlier_mask.mean() for s in scenes]))
    run.event("dataset", path=str(out), scenes=count, checksum=header["checksum"], mean_inlier_fraction=inl)


def _load_scenes(path: Path):
    from .synthdata import read_dataset

    return read_dataset(path / "dataset.bin" if path.is_dir() else path)


def cmd_pretrain(args, cfg, run: Run) -> None:
    from .mae import CorrMAE, dump_reconstructions, epoch_means, pretrain
    from .synthdata import pretrain_corpus

    scenes = _load_scenes(_require(args.data, "--data"))
    pcfg = build(cfg, "pretrain")
    corpus = pretrain_corpus(scenes)
    if not corpus:
        raise CorrMAEError("no scene has the 8 inliers pre-training needs")
    run.event("corpus", scenes=len(corpus), mean_M=float(np.mean([len(c) for c in corpus])))
    torch.manual_seed(pcfg.seed)
    model = CorrMAE(pcfg.encoder, pcfg.decoder_depth)
    trace = pretrain(
        model,
        corpus,
        pcfg,
        trace_path=run.path("trace.jsonl"),
        checkpoint_path=str(run.path("pretrain.ckpt")),
        on_step=lambda r: run.event("step", **r) if r["step"] % 50 == 0 else None,
    )
    dump_reconstructions(model, corpus[-8:], run.path("reconstructions.json"), pcfg.ratio, pcfg.seed)
    means = epoch_means(trace)
    run.event("pretrained", steps=len(trace), first_epoch_rec=means[0], last_epoch_rec=means[-1])


def _pruner(cfg, checkpoint: Optional[Path], run: Run):
    from .checkpoint import load_checkpoint
    from .finetune import CorrPruner

    fcfg = build(cfg, "finetune")
    torch.manual_seed(fcfg.seed)
    model = CorrPruner(fcfg)
    if checkpoint is not None:
        arrays, meta = load_checkpoint(checkpoint)
        enc = meta.get("config", {}).get("encoder")
        if enc is not None and enc != fcfg.encoder.to_dict():
            raise ConfigError([f"encoder config {fcfg.encoder.to_dict()} does not match checkpoint encoder {enc}"])
        model.load_pretrained(arrays)
        run.event("loaded", checkpoint=str(checkpoint))
    else:
        run.event("scratch", note="random initialization")
    return model, fcfg


def cmd_finetune(args, cfg, run: Run) -> None:
    from .finetune import finetune

    train = _load_scenes(_require(args.data, "--data"))
    val = _load_scenes(_require(args.val, "--val")) if args.val else None
    ckpt = _require(args.checkpoint, "--checkpoint") if args.checkpoint else None
    model, fcfg = _pruner(cfg, ckpt, run)
    metrics = finetune(
        model, train, fcfg, val_scenes=val, trace_path=run.path("metrics.jsonl"), checkpoint_path=run.path("finetune.ckpt")
    )
    run.event("finetuned", **metrics[-1])


def cmd_eval(args, cfg, run: Run) -> None:
    from .checkpoint import load_checkpoint
    from .evalkit import evaluate
    from .finetune import CorrPruner, load_finetuned

    scenes = _load_scenes(_require(args.data, "--data"))
    if args.oracle:
        model, fcfg = None, build(cfg, "finetune")
    else:
        ckpt = _require(args.checkpoint, "--checkpoint")
        arrays, meta = load_checkpoint(ckpt)
        if meta.get("stage") != "finetune":
            raise ConfigError([f"{ckpt} is a {meta.get('stage')!r} checkpoint; eval needs a fine-tuned one"])
        d = dict(meta["config"])
        enc = EncoderConfig(**d.pop("encoder"))
        fcfg = FinetuneConfig(**d, encoder=enc)
        model = CorrPruner(fcfg)
        load_finetuned(model, arrays)
    rep = evaluate(model, scenes, fcfg, oracle=args.oracle, batch=cfg["eval"]["batch"], seed=cfg["seed"])
    rep.save(run.path("report.json"))
    run.event("report", **rep.aggregates)


def cmd_ablate(args, cfg, run: Run) -> None:
    from .evalkit import ablation_mask_sweep, format_table
    from .synthdata import pretrain_corpus

    corpus = pretrain_corpus(_load_scenes(_require(args.pretrain_data, "--pretrain-data")))
    train = _load_scenes(_require(args.data, "--data"))
    val = _load_scenes(_require(args.val, "--val"))
    grid = ablation_mask_sweep(
        corpus,
        train,
        val,
        build(cfg, "pretrain"),
        build(cfg, "finetune"),
        seeds=cfg["ablate"]["seeds"],
        lam_on=cfg["ablate"]["lam_on"],
        progress=lambda kind, ratio, align, e: run.event("cell", kind=kind, ratio=ratio, align=align, **e),
    )
    with open(run.path("ablation.json"), "w") as f:
        json.dump(grid, f, indent=1)
    table = format_table(grid)
    run.path("table.txt").write_text(table + "\n")
    print(table)


def _read_jsonl(path: Path) -> List[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_plot(args, cfg, run: Run) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.inputs:
        raise UsageError("plot needs at least one input file")
    dpi = cfg["plot"]["dpi"]
    for raw in args.inputs:
        p = _require(raw, "input")
        stem = p.stem
        if p.suffix == ".jsonl":
            recs = _read_jsonl(p)
            if not recs:
                raise CorrMAEError(f"{p} is empty")
            fig, ax = plt.subplots(figsize=(6, 4))
            if "L_rec_s" in recs[0]:
                steps = [r["step"] for r in recs]
                for k in ("L_rec_s", "L_rec_t", "L_align", "total"):
                    ax.plot(steps, [r[k] for r in recs], label=k)
                ax.set_yscale("log")
                ax.set_xlabel("step")
                ax.set_title("pre-training losses")
            elif "L_cls" in recs[0]:
                ep = [r["epoch"] + 1 for r in recs]
                for k in ("P", "R", "F1"):
                    if k in recs[0]:
                        ax.plot(ep, [r[k] for r in recs], marker="o", label=k)
                ax.set_xlabel("epoch")
                ax.set_title("pruning precision / recall / F1 (validation)")
                if "P" not in recs[0]:
                    ax.plot(ep, [r["L_cls"] for r in recs], marker="o", label="L_cls")
            else:
                raise CorrMAEError(f"{p} is neither a loss trace nor a metrics trace")
            ax.legend()
            out = run.path(f"{stem}.png")
            fig.savefig(out, dpi=dpi, bbox_inches="tight")
            plt.close(fig)
            run.event("figure", source=str(p), path=str(out))
            continue
        data = json.loads(p.read_text())
        if "scenes" in data:
            scenes = data["scenes"][:4]
            fig, axes = plt.subplots(len(scenes), 2, figsize=(8, 4 * len(scenes)), squeeze=False)
            for row, s in zip(axes, scenes):
                m = np.asarray(s["masked"])
                for ax, gt, pred, title in ((row[0], m[:, :2], s["p_hat_s"], "source"), (row[1], m[:, 2:], s["p_hat_t"], "target")):
                    pred = np.asarray(pred)
                    ax.scatter(gt[:, 0], gt[:, 1], s=14, label="masked ground truth")
                    ax.scatter(pred[:, 0], pred[:, 1], s=14, marker="x", label="reconstruction")
                    for a, b in zip(gt, pred):
                        ax.plot([a[0], b[0]], [a[1], b[1]], lw=0.5, color="gray")
                    ax.set_xlim(-1, 1)
                    ax.set_ylim(-1, 1)
                    ax.set_aspect("equal")
                    ax.set_title(title)
            axes[0, 0].legend(loc="lower left", fontsize=7)
        elif data.get("schema") == "corrmae-eval-report":
            recs = data["records"]
            errs = np.sort([r["pose_err"] for r in recs])
            fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
            a1.plot(np.concatenate([[0], errs]), np.arange(len(errs) + 1) / len(errs))
            a1.set_xlim(0, 20)
            a1.set_xlabel("pose error (deg)")
            a1.set_ylabel("recall")
            a1.set_title("cumulative pose recall")
            P = np.array([r["P"] for r in recs])
            R = np.array([r["R"] for r in recs])
            order = np.argsort(-P)
            a2.plot(np.arange(1, len(P) + 1), P[order], label="precision")
            a2.plot(np.arange(1, len(P) + 1), R[order], label="recall")
            a2.set_xlabel("scene (sorted by precision)")
            a2.set_title("full-size verification per scene")
            a2.legend()
        else:
            raise CorrMAEError(f"{p}: unrecognized JSON input")
        out = run.path(f"{stem}.png")
        fig.savefig(out, dpi=dpi, bbox_inches="tight")
        plt.close(fig)
        run.event("figure", source=str(p), path=str(out))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrmae", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"corrmae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (schema_version 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. pretrain.epochs=5")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker processes for scene generation")
    common.add_argument("--deterministic", action="store_true", default=None, help="single worker, single thread, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("pretrain", parents=[common], help="masked-correspondence pre-training")
    p.add_argument("--data", help="dataset file (or a gen-data output directory)")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune the pruning network")
    p.add_argument("--data")
    p.add_argument("--val", help="validation dataset for per-epoch metrics")
    p.add_argument("--checkpoint", help="pre-training checkpoint; omit for the from-scratch baseline")
    p = sub.add_parser("eval", parents=[common], help="evaluate a fine-tuned checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use ground-truth inlier weights instead of a network")
    p = sub.add_parser("ablate", parents=[common], help="masking-ratio / type / alignment sweep")
    p.add_argument("--pretrain-data")
    p.add_argument("--data")
    p.add_argument("--val")
    p = sub.add_parser("plot", parents=[common], help="render traces, reconstructions and reports")
    p.add_argument("inputs", nargs="*")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, {"seed": args.seed, "workers": args.workers, "deterministic": args.deterministic})
    except ConfigError as e:
        print("config error:", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return 1
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if cfg["deterministic"]:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / args.command
    run = Run(out, args.command, cfg)
    try:
        COMMANDS[args.command](args, cfg, run)
    except (ConfigError, UsageError) as e:
        msg = "; ".join(e.problems) if isinstance(e, ConfigError) else str(e)
        run.close(False, msg)
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (CorrMAEError, OSError, ValueError, RuntimeError) as e:
        run.close(False, f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    run.close(True)
    print(str(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
