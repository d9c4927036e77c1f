"""Command-line entry points: synth, train-source, adapt, eval, prototypes, export, benchmark.

Every command resolves its parameters as flags > DSFDA_* environment > config
file > defaults, hashes the resolved tree and writes into a run directory
``{command}-{hash}-{timestamp}`` under ``--out`` (``synth`` writes the dataset
straight into ``--out``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import yaml

from .data import AUDIT, ConfigError, DataError, DomainSplit, SynthConfig, load_manifest, synth_generate
from .evaluation import evaluate, export_embeddings, project_2d
from .losses import LossWeights, NumericError
from .networks import ModelConfig, embed_split, load_checkpoint, save_checkpoint
from .prototypes import METHODS, ClusterParams, PrototypeSet, SourcePool, select_prototypes
from .training import (
    AdaptationMode, LossLog, TrainConfig, adapt_target, neutral_only_finetune, oracle_finetune, pretrain_source,
    two_stage_adapt,
)

logger = logging.getLogger("dsfda")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SETTINGS = ("source-only", "sfda", "kshot", "neutral-only", "two-stage", "oracle")

# command -> parameter defaults; every key is also a --flag and a DSFDA_<KEY> variable
DEFAULTS = {
    "synth": dict(identities=10, expressions=2, frames=20, image_size=32, noise=0.05, targets=0,
                  resting_spread=1.0, style_spread=0.6, rest_intensity=0.0, seed=0),
    "train-source": dict(data=None, epochs=100, lr=1e-5, batch_size=32, width=64, embed_dim=64, feat_dim=128,
                         feature_hw=8, norm="instance", augment=True, lambda_rec=5.0, lambda_per=1.0,
                         lambda_adv1=0.2, lambda_adv2=0.8, seed=0),
    "adapt": dict(setting=None, ckpt=None, target=None, source=None, prototypes=None, epochs=25, lr=1e-4,
                  batch_size=32, augment=True, neutral_ratio=0.5, generated_neutral=False, frames=0,
                  lambda_rec=5.0, lambda_per=1.0, lambda_adv1=0.2, lambda_adv2=0.8, seed=0),
    "eval": dict(ckpt=None, test=None, setting="source-only", video_vote=False, seed=0),
    "prototypes": dict(method="km-sub", source_embeddings=None, k=None, eps=None, min_samples=4,
                       target_embeddings=None, target_metadata=None, all_classes=False, seed=0),
    "export": dict(ckpt=None, data=None, tsne=False, seed=0),
    "benchmark": dict(seeds="0,1,2", config=None, seed=0),
}
NOT_HASHED = {"out", "config", "force", "verbose"}


class RunContext:
    def __init__(self, command: str, params: dict, out: Path, run_dir: Path):
        self.command = command
        self.params = params
        self.out = out
        self.dir = run_dir

    @property
    def hash(self) -> str:
        return config_hash(self.params)


def config_hash(params: dict) -> str:
    tree = {k: v for k, v in params.items() if k not in NOT_HASHED}
    blob = json.dumps(tree, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _env_value(raw: str):
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def resolve(command: str, flags: dict, environ=None) -> dict:
    """Merge defaults, config file, environment and explicit flags (highest wins)."""
    environ = os.environ if environ is None else environ
    params = dict(DEFAULTS[command])
    cfg_path = flags.get("config") or environ.get("DSFDA_CONFIG")
    if cfg_path and command != "benchmark":
        with open(cfg_path) as fh:
            tree = yaml.safe_load(fh) or {}
        # allow either a flat mapping or one section per command
        section = tree.get(command, tree) if isinstance(tree, dict) else {}
        for k, v in section.items():
            key = k.replace("-", "_")
            if key not in params:
                raise ConfigError(f"unknown key {k!r} in {cfg_path} for {command}")
            params[key] = v
    for key in params:
        env = environ.get("DSFDA_" + key.upper())
        if env is not None:
            params[key] = _env_value(env)
    for key, v in flags.items():
        if v is not None and key in params:
            params[key] = v
    return params


def _setup_logging(run_dir: Path | None, verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_dsfda", False):
            root.removeHandler(h)
            h.close()
    root.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.INFO if verbose else logging.WARNING)
    stream.setFormatter(fmt)
    stream._dsfda = True
    root.addHandler(stream)
    if run_dir is not None:
        fh = logging.FileHandler(run_dir / "log.txt")
        fh.setFormatter(fmt)
        fh._dsfda = True
        root.addHandler(fh)


def _open_run(command: str, params: dict, out: str, verbose: bool) -> RunContext:
    out = Path(out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    h = config_hash(params)
    run_dir = out / f"{command}-{h}-{stamp}"
    k = 1
    while run_dir.exists():  # two invocations within the same second
        run_dir = out / f"{command}-{h}-{stamp}-{k}"
        k += 1
    run_dir.mkdir(parents=True)
    with open(run_dir / "config.yaml", "w") as fh:
        yaml.safe_dump({"command": command, "config_hash": h, **params}, fh, sort_keys=True)
    _setup_logging(run_dir, verbose)
    logger.info("%s -> %s", command, run_dir)
    return RunContext(command, params, out, run_dir)


def _require(params: dict, *keys: str) -> None:
    missing = [k for k in keys if params.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _require_path(value, what: str) -> Path:
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _weights(p: dict) -> LossWeights:
    return LossWeights(float(p["lambda_rec"]), float(p["lambda_per"]), float(p["lambda_adv1"]),
                       float(p["lambda_adv2"]))


# --------------------------------------------------------------------------- commands


def cmd_synth(p: dict, out: str, force: bool = False, verbose: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(None, verbose)
    n_tgt = int(p["targets"])
    if n_tgt < 0 or n_tgt >= int(p["identities"]) - 1:
        raise ConfigError("--targets must leave at least two source identities")
    cfg = SynthConfig(n_identities=int(p["identities"]), n_expressions=int(p["expressions"]),
                      frames_per_cell=int(p["frames"]), image_size=int(p["image_size"]),
                      noise_std=float(p["noise"]), seed=int(p["seed"]),
                      resting_spread=float(p["resting_spread"]), style_spread=float(p["style_spread"]),
                      n_shifted=n_tgt, rest_intensity=float(p["rest_intensity"]))
    data = synth_generate(cfg)
    data.export(out)
    if n_tgt:
        n_src = cfg.n_identities - n_tgt
        pos = np.array([int(q.rsplit("/", 1)[1]) for q in data.paths])
        half = cfg.frames_per_cell // 2
        data.select(subjects=range(n_src)).export(out / "source")
        for t in range(n_src, cfg.n_identities):
            base = out / f"target_s{t:03d}"
            data.select(pos < half, subjects=[t], expressions=[0]).export(base / "adapt")
            data.select(pos < half, subjects=[t]).export(base / "labeled")
            data.select(pos >= half, subjects=[t]).export(base / "test")
    with open(out / "synth_config.yaml", "w") as fh:
        yaml.safe_dump({"command": "synth", "config_hash": config_hash(p), **p}, fh, sort_keys=True)
    return out / "manifest.csv"


def cmd_train_source(p: dict, ctx: RunContext) -> Path:
    _require(p, "data")
    split = load_manifest(_require_path(p["data"], "source data"), role="source")
    mcfg = ModelConfig(c_id=len(split.subjects()), c_exp=split.c_exp, image_size=split.image_size,
                       width=int(p["width"]), embed_dim=int(p["embed_dim"]), feat_dim=int(p["feat_dim"]),
                       feature_hw=int(p["feature_hw"]), norm=p["norm"])
    try:
        mcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = TrainConfig(phase="source", learning_rate=float(p["lr"]), epochs=int(p["epochs"]),
                      batch_size=int(p["batch_size"]), seed=int(p["seed"]), augment=bool(p["augment"]),
                      weights=_weights(p))
    torch.manual_seed(cfg.seed)
    log = LossLog()
    try:
        model = pretrain_source(split, cfg, mcfg, log)
    finally:
        log.write_csv(ctx.dir / "losses.csv")
    return save_checkpoint(model, ctx.dir / "source.ckpt", seed=cfg.seed, extra={"config_hash": ctx.hash})


def _load_target(path, role: str, c_exp: int) -> DomainSplit:
    split = load_manifest(_require_path(path, "target data"), role="target-test", c_exp=c_exp)
    if role == "target-adapt":
        return split.with_role("target-adapt")  # raises if any frame is not neutral
    return split


def cmd_adapt(p: dict, ctx: RunContext) -> Path:
    _require(p, "setting", "ckpt", "target")
    setting = p["setting"]
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if setting == "kshot":
        _require(p, "prototypes", "source")
    model, payload = load_checkpoint(_require_path(p["ckpt"], "checkpoint"))
    cfg = TrainConfig(phase="adapt" if setting in ("sfda", "kshot", "source-only") else setting,
                      learning_rate=float(p["lr"]), epochs=int(p["epochs"]), batch_size=int(p["batch_size"]),
                      seed=int(p["seed"]), augment=bool(p["augment"]), neutral_ratio=float(p["neutral_ratio"]),
                      generated_neutral=bool(p["generated_neutral"]), weights=_weights(p))
    log = LossLog()
    target = _load_target(p["target"], "target-test" if setting == "oracle" else "target-adapt", model.cfg.c_exp)
    if int(p["frames"]) > 0 and setting != "oracle":
        target = target.subset(range(min(int(p["frames"]), len(target))))
    AUDIT.reset()
    try:
        if setting == "source-only":
            adapted = model
        elif setting == "sfda":
            adapted = adapt_target(model, target, AdaptationMode(), cfg, log)
        elif setting == "kshot":
            source = load_manifest(_require_path(p["source"], "source image store"), role="source",
                                   c_exp=model.cfg.c_exp)
            protos = PrototypeSet.read(_require_path(p["prototypes"], "prototype CSV"), source.paths)
            mode = AdaptationMode("k-shot", len(protos), protos, source)
            adapted = adapt_target(model, target, mode, cfg, log)
        elif setting == "neutral-only":
            adapted = neutral_only_finetune(model, target, cfg, log)
        elif setting == "two-stage":
            adapted = two_stage_adapt(model, target, cfg, ctx.dir, log)
        else:
            adapted = oracle_finetune(model, target, cfg, log)
    finally:
        log.write_csv(ctx.dir / "losses.csv")
    audit = {"source_images_read": AUDIT["source"]}
    with open(ctx.dir / "audit.json", "w") as fh:
        json.dump(audit, fh, sort_keys=True)
    return save_checkpoint(adapted, ctx.dir / "adapted.ckpt", seed=cfg.seed,
                           extra={"config_hash": ctx.hash, "setting": setting, "source_seed": payload.get("seed")})


def cmd_eval(p: dict, ctx: RunContext) -> Path:
    _require(p, "ckpt", "test")
    model, _ = load_checkpoint(_require_path(p["ckpt"], "checkpoint"))
    test = load_manifest(_require_path(p["test"], "test data"), role="target-test", c_exp=model.cfg.c_exp,
                         image_size=model.cfg.image_size)
    report = evaluate(model, test, p["setting"], video_vote=bool(p["video_vote"]))
    logger.info("average accuracy %.2f%%", report.average)
    return report.write_csv(ctx.dir / "metrics.csv", ctx.hash)


def _pool_from_csv(path: Path, all_classes: bool) -> SourcePool:
    df = pd.read_csv(path)
    needed = {"subject_id", "expression"}
    if not needed <= set(df.columns):
        raise DataError(f"{path}: embeddings CSV needs columns {sorted(needed)}")
    if not all_classes:
        df = df[df["expression"] != 0]
    if df.empty:
        raise DataError(f"{path}: no non-neutral rows to select prototypes from")
    cols = [c for c in df.columns if c.startswith("e") and c[1:].isdigit()]
    rows = df.index.to_numpy()
    refs = df["frame_path"].astype(str).tolist() if "frame_path" in df else [f"#{i}" for i in rows]
    conf = df["confidence"].to_numpy() if "confidence" in df else None
    correct = df["correct"].to_numpy().astype(bool) if "correct" in df else None
    return SourcePool(df[cols].to_numpy(), df["subject_id"].to_numpy(), df["expression"].to_numpy(), rows, refs,
                      conf, correct)


def cmd_prototypes(p: dict, ctx: RunContext) -> Path:
    _require(p, "source_embeddings")
    method = str(p["method"]).lower()
    if method not in METHODS:
        raise ConfigError(f"unknown prototype method {method!r}; expected one of {METHODS}")
    pool = _pool_from_csv(_require_path(p["source_embeddings"], "source embeddings"), bool(p["all_classes"]))
    n_subjects = len(set(pool.subject_ids.tolist()))
    k = None if p["k"] is None else int(p["k"])
    if k is not None and method not in ("km-all", "db-all", "match") and k != n_subjects:
        raise ConfigError(f"{method} returns one prototype per subject ({n_subjects}); --k {k} disagrees")
    if method == "db-all" and k is not None:
        raise ConfigError("db-all chooses its own number of clusters; drop --k")
    params = ClusterParams(k=k, eps=None if p["eps"] is None else float(p["eps"]),
                           min_samples=int(p["min_samples"]), seed=int(p["seed"]))
    target_emb = None
    if p["target_embeddings"]:
        tdf = pd.read_csv(_require_path(p["target_embeddings"], "target embeddings"))
        target_emb = tdf[[c for c in tdf.columns if c.startswith("e") and c[1:].isdigit()]].to_numpy()
    meta = p["target_metadata"]
    if isinstance(meta, str):
        meta = json.loads(meta)
    if method == "match":
        pool.metadata = _subject_metadata(p)
    try:
        protos = select_prototypes(pool, method, params, target_embeddings=target_emb, target_metadata=meta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return protos.write(ctx.dir / "prototypes.csv")


def _subject_metadata(p: dict) -> dict:
    side = Path(p["source_embeddings"]).with_name("subjects.yaml")
    if not side.exists():
        raise ConfigError(f"match selection reads source subject metadata from {side}")
    with open(side) as fh:
        return {int(k): v for k, v in (yaml.safe_load(fh) or {}).items()}


def cmd_export(p: dict, ctx: RunContext) -> Path:
    _require(p, "ckpt", "data")
    model, _ = load_checkpoint(_require_path(p["ckpt"], "checkpoint"))
    split = load_manifest(_require_path(p["data"], "data"), role="target-test", c_exp=model.cfg.c_exp,
                          image_size=model.cfg.image_size)
    df = export_embeddings(model, split)
    with torch.no_grad():
        probs = model.classify_embedding(embed_split(model, split)).softmax
    y = split.expressions
    df.insert(0, "frame_path", split.paths)
    df.insert(3, "confidence", probs[torch.arange(len(y)), y].numpy())
    df.insert(4, "correct", (probs.argmax(1) == y).numpy().astype(int))
    path = ctx.dir / "embeddings.csv"
    df.to_csv(path, index=False, float_format="%.8g")
    if split.metadata:
        with open(ctx.dir / "subjects.yaml", "w") as fh:
            yaml.safe_dump({int(k): v for k, v in split.metadata.items()}, fh)
    if p["tsne"]:
        cols = [c for c in df.columns if c.startswith("e") and c[1:].isdigit()]
        project_2d(df[cols].to_numpy(), df["expression"].to_numpy(), int(p["seed"])).to_csv(
            ctx.dir / "projection.csv", index=False, float_format="%.6g")
    return path


def cmd_benchmark(p: dict, ctx: RunContext, config_file: str | None = None) -> Path:
    from .protocol import DeskConfig, run_protocol

    over = {}
    if config_file:
        with open(_require_path(config_file, "benchmark config")) as fh:
            over = yaml.safe_load(fh) or {}
    try:
        desk = DeskConfig(**over)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    with open(ctx.dir / "desk_config.yaml", "w") as fh:
        yaml.safe_dump(asdict(desk), fh, sort_keys=True)
    rows = []
    for seed in [int(s) for s in str(p["seeds"]).split(",") if s.strip()]:
        res = run_protocol(seed, desk)
        for setting, acc in res.summary().items():
            rows.append(dict(seed=seed, setting=setting, accuracy=acc, non_neutral=res.class_accuracy(setting, 1)))
    path = ctx.dir / "benchmark.csv"
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.6f")
    return path


# --------------------------------------------------------------------------- argument parsing


def _bool(v: str) -> bool:
    v = str(v).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_params(sp: argparse.ArgumentParser, command: str, help_text: dict | None = None) -> None:
    help_text = help_text or {}
    for key, default in DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        kw = dict(default=None, dest=key, help=help_text.get(key, f"default: {default}"))
        if isinstance(default, bool):
            sp.add_argument(flag, type=_bool, nargs="?", const=True, **kw)
            sp.add_argument("--no-" + key.replace("_", "-"), dest=key, action="store_const", const=False)
        elif isinstance(default, int) and not isinstance(default, bool):
            sp.add_argument(flag, type=int, **kw)
        elif isinstance(default, float):
            sp.add_argument(flag, type=float, **kw)
        elif key == "setting" and command == "adapt":
            sp.add_argument(flag, choices=SETTINGS, **kw)
        elif key in ("k", "min_samples"):
            sp.add_argument(flag, type=int, **kw)
        elif key == "eps":
            sp.add_argument(flag, type=float, **kw)
        else:
            sp.add_argument(flag, **kw)
    sp.add_argument("--out", default=None, help="output root (default: runs/)")
    if command != "benchmark":
        sp.add_argument("--config", default=None, help="YAML config file")
    sp.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsfda", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("synth", help="write a procedural face dataset")
    _add_params(sp, "synth", {"targets": "hold out the last N identities as target subjects",
                              "rest_intensity": "expression intensity the target identities show at rest"})
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    _add_params(sub.add_parser("train-source", help="adversarial pre-training on a labeled source set"),
                "train-source")
    _add_params(sub.add_parser("adapt", help="adapt a source checkpoint to one target subject"), "adapt",
                {"frames": "use only the first N neutral frames (0 = all)",
                 "source": "source manifest dir holding the k-shot prototype frames"})
    _add_params(sub.add_parser("eval", help="per-subject accuracy of a checkpoint"), "eval")
    _add_params(sub.add_parser("prototypes", help="select source prototype frames"), "prototypes",
                {"target_metadata": "JSON mapping for match selection, e.g. '{\"gender\": \"f\"}'"})
    _add_params(sub.add_parser("export", help="expression embeddings (and optional t-SNE) of a dataset"), "export")
    sp = sub.add_parser("benchmark", help="desk-scale run of every setting on synthetic data")
    _add_params(sp, "benchmark", {"config": "YAML overrides for the desk protocol"})
    return ap


COMMANDS = {
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "prototypes": cmd_prototypes,
    "export": cmd_export,
}


def run(argv=None, environ=None) -> tuple[int, Path | None]:
    """Parse ``argv`` and execute; returns (exit code, main output path)."""
    args = build_parser().parse_args(argv)
    flags = vars(args)
    command = flags.pop("command")
    out = flags.pop("out", None) or ("data" if command == "synth" else "runs")
    verbose = flags.pop("verbose", False)
    force = flags.pop("force", False)
    try:
        if command == "benchmark":
            cfg_file = flags.get("config")
            params = resolve(command, {**flags, "config": None}, environ)
            params["config"] = cfg_file
            ctx = _open_run(command, params, out, verbose)
            result = cmd_benchmark(params, ctx, cfg_file)
        else:
            params = resolve(command, flags, environ)
            if command == "synth":
                result = cmd_synth(params, out, force, verbose)
            else:
                ctx = _open_run(command, params, out, verbose)
                result = COMMANDS[command](params, ctx)
    except ConfigError as exc:
        print(f"dsfda {command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    except NumericError as exc:
        print(f"dsfda {command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None
    except (DataError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dsfda {command}: data error: {msg}", file=sys.stderr)
        return EXIT_DATA, None
    print(result)
    return 0, Path(result)


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
