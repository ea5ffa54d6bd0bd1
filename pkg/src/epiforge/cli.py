"""Command-line entry point: ``epiforge {prepare,meta-train,evaluate,ablate}``.

Settings resolve as defaults <- ``--config`` JSON file <- command-line flags.
``EPIFORGE_SEED`` supplies the seed when neither the file nor a flag does.
Exit codes: 0 success, 2 usage/config error, 3 data invariant violation,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch

from .adapt import FinetuneConfig
from .dataset import DatasetError, ImageCache, generate_synthetic, load_image, load_manifest, split_by_case
from .encoder import DivergenceError, EncoderConfig, WeightFormatError, init_encoder, load_weights, save_weights
from .episodes import EpisodeSpec, build_test_tasks, save_episodes, sample_episodes
from .evaluation import METHODS, config_digest, evaluate_tasks, make_grid, run_ablation, write_report
from .fewshot import DISTANCES, TrainConfig, meta_train

log = logging.getLogger("epiforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _floats(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def _ints(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def _strs(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


COMMON = {"seed": 0, "threads": 1}

DEFAULTS = {
    "prepare": {
        "synthetic": False, "check": None, "classes": 10, "cases": 6, "images": 20,
        "class_offset": 0, "out": None, "decode": False,
    },
    "meta-train": {
        "manifest": None, "val_manifest": None, "out": None, "init": None,
        "lr": 5e-5, "epochs": 200, "tasks": 500, "val_tasks": 150, "lambda": 1e-3,
        "ways": 5, "shots": 5, "queries": 15, "val_fraction": 0.25,
        "distance": "sqeuclidean", "temperature": 1.0, "augment": True,
        "patch_size": 16, "embed_dim": 64, "depth": 4, "heads": 4, "mlp_ratio": 2.0,
    },
    "evaluate": {
        "checkpoint": None, "manifest": None, "out": None, "method": "pmt",
        "ways": 3, "shots": 50, "tasks": 5, "lr": None, "steps": 20,
        "lr_candidates": [1e-2, 1e-3, 1e-4, 0.0], "holdout": 0.2,
        "bsr": False, "bsr_lambda": 1e-3, "finetune_augment": False, "pooled": False,
        "distance": "sqeuclidean", "temperature": 1.0, "trace": None,
    },
    "ablate": {
        "checkpoint": [], "manifest": None, "out": None, "methods": ["pmf", "pmt"],
        "shots": [50, 20, 5], "lambda": None, "seeds": 5, "tasks": 5, "ways": 3,
        "lr": None, "steps": 20, "lr_candidates": [1e-2, 1e-3, 1e-4, 0.0], "holdout": 0.2,
        "bsr": False, "bsr_lambda": 1e-3, "finetune_augment": False, "pooled": False,
        "distance": "sqeuclidean", "temperature": 1.0,
    },
}

# list-valued settings, which may arrive as comma-separated strings
CONVERTERS = {
    "evaluate": {"lr_candidates": _floats},
    "ablate": {
        "lr_candidates": _floats, "methods": _strs, "shots": _ints, "lambda": _floats,
        "checkpoint": lambda v: [v] if isinstance(v, str) else [str(x) for x in v],
    },
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="epiforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", help="flat JSON file of flag names")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="torch CPU threads (default 1, for bit-reproducibility)")
        return p

    p = command("prepare", "generate synthetic data and/or validate a manifest")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--check", metavar="MANIFEST")
    p.add_argument("--decode", action="store_true", help="with --check, decode every image")
    p.add_argument("--classes", type=int)
    p.add_argument("--cases", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--class-offset", type=int)
    p.add_argument("--out")

    p = command("meta-train", "episodic meta-training of the encoder")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--out")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh encoder")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--val-tasks", type=int)
    p.add_argument("--lambda", type=float)
    p.add_argument("--ways", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--distance", choices=DISTANCES)
    p.add_argument("--temperature", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_false")
    for flag, typ in (("--patch-size", int), ("--embed-dim", int), ("--depth", int), ("--heads", int), ("--mlp-ratio", float)):
        p.add_argument(flag, type=typ)

    def finetune_flags(p):
        p.add_argument("--lr", type=float, help="fixed fine-tune learning rate (skips the search)")
        p.add_argument("--steps", type=int)
        p.add_argument("--lr-candidates")
        p.add_argument("--holdout", type=float)
        p.add_argument("--bsr", action="store_true", help="add the BSR term during fine-tuning")
        p.add_argument("--bsr-lambda", type=float)
        p.add_argument("--finetune-augment", action="store_true")
        p.add_argument("--pooled", action="store_true", help="score pooled queries instead of averaging tasks")
        p.add_argument("--distance", choices=DISTANCES)
        p.add_argument("--temperature", type=float)
        p.add_argument("--ways", type=int)
        p.add_argument("--tasks", type=int)

    p = command("evaluate", "adapt and score on case-disjoint test tasks")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--shots", type=int)
    p.add_argument("--trace", help="write the per-step adaptation trace (JSON lines) here")
    finetune_flags(p)

    p = command("ablate", "method x lambda x shots table over several seeds")
    p.add_argument("--checkpoint", action="append", help="[LAMBDA=]PATH; repeat per meta-training lambda")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--methods")
    p.add_argument("--shots")
    p.add_argument("--lambda")
    p.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    finetune_flags(p)
    return parser


def resolve_config(command: str, args: argparse.Namespace, environ=os.environ) -> dict:
    cfg = {**COMMON, **DEFAULTS[command]}
    if environ.get("EPIFORGE_SEED"):
        try:
            cfg["seed"] = int(environ["EPIFORGE_SEED"])
        except ValueError as exc:
            raise UsageError(f"EPIFORGE_SEED must be an integer, got {environ['EPIFORGE_SEED']!r}") from exc
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a flat JSON object")
        for key, value in raw.items():
            name = key.lstrip("-").replace("-", "_")
            if name not in cfg:
                raise UsageError(f"unknown setting {key!r} in {args.config}")
            cfg[name] = value
    cfg.update(flags)
    try:
        for key, conv in CONVERTERS.get(command, {}).items():
            if key in cfg and cfg[key] is not None:
                cfg[key] = conv(cfg[key])
    except ValueError as exc:
        raise UsageError(f"bad list value: {exc}") from exc
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _file_digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: dict) -> int:
    if not cfg["synthetic"] and not cfg["check"]:
        raise UsageError("prepare needs --synthetic and/or --check MANIFEST")
    if cfg["synthetic"]:
        _require(cfg, "out")
        index = generate_synthetic(cfg["out"], cfg["classes"], cfg["cases"], cfg["images"], cfg["seed"], cfg["class_offset"])
        _write_json(Path(cfg["out"]) / "prepare_config.json", cfg)
        print(f"wrote {Path(cfg['out']) / 'manifest.csv'}")
        print(json.dumps({k: v for k, v in index.summary().items() if k != "per_class"}))
    if cfg["check"]:
        index = load_manifest(cfg["check"])
        if cfg["decode"]:
            for e in index.entries:
                load_image(index.resolve(e))
        print(json.dumps(index.summary(), indent=2))
    return EXIT_OK


def _encoder_config(cfg: dict) -> EncoderConfig:
    try:
        return EncoderConfig(cfg["patch_size"], cfg["embed_dim"], cfg["depth"], cfg["heads"], cfg["mlp_ratio"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_meta_train(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    index = load_manifest(cfg["manifest"])
    if cfg["val_manifest"]:
        # one image cache serves both manifests once paths share a root
        train_index, val_index = index, load_manifest(cfg["val_manifest"]).rebased(index.source_root)
    else:
        train_index, val_index = split_by_case(index, cfg["val_fraction"], cfg["seed"])
    try:
        train_spec = EpisodeSpec(cfg["ways"], cfg["shots"], cfg["queries"])
        tconf = TrainConfig(
            learning_rate=cfg["lr"], epochs=cfg["epochs"], lambda_bsr=cfg["lambda"],
            temperature=cfg["temperature"], distance=cfg["distance"], augment=cfg["augment"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_eps = sample_episodes(train_index, train_spec, cfg["tasks"], cfg["seed"])
    val_eps = sample_episodes(val_index, train_spec, cfg["val_tasks"], cfg["seed"] + 1) if cfg["val_tasks"] else []
    save_episodes(train_eps, train_index, out / "episodes_train.jsonl")
    save_episodes(val_eps, val_index, out / "episodes_val.jsonl")

    state = load_weights(cfg["init"]) if cfg["init"] else init_encoder(_encoder_config(cfg), cfg["seed"])
    digest = config_digest(cfg)
    _write_json(out / "run_config.json", {"config": cfg, "config_digest": digest})
    log_path = out / "train_log.jsonl"
    log_path.write_text("", encoding="utf-8")

    def on_epoch(record):
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({**record, "config_digest": digest}, sort_keys=True) + "\n")

    trained, history = meta_train(state, train_eps, val_eps, tconf, ImageCache(train_index), on_epoch=on_epoch)
    meta = {**trained.metadata, "run_config": cfg, "config_digest": digest, "lambda_bsr": cfg["lambda"]}
    save_weights(replace(trained, metadata=meta), out / "checkpoint.epif")
    print(json.dumps({"checkpoint": str(out / "checkpoint.epif"), "best_epoch": history.best_epoch,
                      "final": history.epochs[-1] if history.epochs else None}))
    return EXIT_OK


def _finetune_config(cfg: dict) -> FinetuneConfig:
    try:
        fixed = cfg["lr"] is not None
        return FinetuneConfig(
            learning_rate=cfg["lr"] if fixed else 1e-3,
            steps=cfg["steps"],
            lr_candidates=tuple(cfg["lr_candidates"]),
            holdout_fraction=cfg["holdout"],
            search=not fixed,
            lambda_bsr=cfg["bsr_lambda"] if cfg["bsr"] else 0.0,
            augment=cfg["finetune_augment"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _test_index(cfg: dict):
    index = load_manifest(cfg["manifest"])
    if index.n_classes < cfg["ways"]:
        raise DatasetError(f"manifest has {index.n_classes} classes, --ways asks for {cfg['ways']}")
    if index.n_classes > cfg["ways"]:
        log.info("using the first %d of %d classes", cfg["ways"], index.n_classes)
        index = index.subset(index.entries, classes=range(cfg["ways"]))
    return index


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "checkpoint", "manifest", "out")
    ft = _finetune_config(cfg)
    state = load_weights(cfg["checkpoint"])
    index = _test_index(cfg)
    tasks = build_test_tasks(index, cfg["shots"], cfg["tasks"], cfg["seed"])
    cache = ImageCache(index)
    trace = [] if cfg["trace"] else None
    report = evaluate_tasks(cfg["method"], state, tasks, cache, ft, cfg["pooled"], cfg["distance"], cfg["temperature"], trace=trace)
    lam = float(state.metadata.get("lambda_bsr", 0.0))
    label = cfg["method"].upper() + ("+BSR" if lam > 0 else "")
    row = {"method": label, "lambda_bsr": lam, "shots": cfg["shots"], **report.to_dict(), "seeds": [cfg["seed"]]}
    config = {**cfg, "checkpoint_sha256": _file_digest(cfg["checkpoint"]), "finetune": asdict(ft)}
    json_path, csv_path = write_report(cfg["out"], "report", [row], config)
    if trace is not None:
        with Path(cfg["trace"]).open("w", encoding="utf-8") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(csv_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _checkpoints(specs: list[str]) -> dict[float, tuple[str, object]]:
    found = {}
    for spec in specs:
        lam_text, sep, path = spec.partition("=")
        if not sep:
            path, lam_text = spec, None
        state = load_weights(path)
        if lam_text is None:
            if "lambda_bsr" not in state.metadata:
                raise UsageError(f"{path} records no meta-training lambda; pass it as LAMBDA={path}")
            lam = float(state.metadata["lambda_bsr"])
        else:
            try:
                lam = float(lam_text)
            except ValueError as exc:
                raise UsageError(f"bad checkpoint spec {spec!r}") from exc
        if lam in found:
            raise UsageError(f"two checkpoints given for lambda={lam!r}")
        found[lam] = (path, state)
    return found


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    if not cfg["methods"]:
        raise UsageError("--methods must name at least one of " + ",".join(METHODS))
    if not cfg["checkpoint"]:
        raise UsageError("ablate needs at least one --checkpoint")
    ckpts = _checkpoints(cfg["checkpoint"])
    lambdas = cfg["lambda"] if cfg["lambda"] is not None else sorted(ckpts)
    missing = [lam for lam in lambdas if lam not in ckpts]
    if missing:
        raise UsageError(f"no checkpoint for lambda value(s) {missing}; known: {sorted(ckpts)}")
    try:
        grid = make_grid(cfg["methods"], lambdas, cfg["shots"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ft = _finetune_config(cfg)
    index = _test_index(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    table = run_ablation(grid, index, seeds, {lam: s for lam, (_, s) in ckpts.items()}, ft, cfg["tasks"],
                         cfg["pooled"], distance=cfg["distance"], temperature=cfg["temperature"])
    config = {**cfg, "finetune": asdict(ft),
              "checkpoint_sha256": {repr(lam): _file_digest(p) for lam, (p, _) in sorted(ckpts.items())}}
    json_path, csv_path = write_report(cfg["out"], "ablation", table.rows, config, table.failures)
    print(csv_path.read_text(encoding="utf-8"), end="")
    if table.failures:
        for f in table.failures:
            print(f"cell {f['cell']} failed: {f['error']}", file=sys.stderr)
        diverged = any(f["error"].startswith(("DivergenceError", "TrainingDiverged")) for f in table.failures)
        return EXIT_DIVERGED if diverged else EXIT_DATA
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "meta-train": cmd_meta_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        torch.set_num_threads(max(1, int(cfg["threads"])))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"epiforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"epiforge: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, WeightFormatError, FileNotFoundError) as exc:
        print(f"epiforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
