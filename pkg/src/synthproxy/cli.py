"""Command-line driver for the full pipeline.

One executable covers dataset generation and splitting, proxy training and
evaluation, ranking and distribution-distance checks, sound-matching training
and evaluation, and report merging.  Every invocation resolves its settings
from built-in defaults, an optional JSON config file, and flags (flags win),
validates the result against a schema that rejects unknown keys, and persists
the fully resolved config next to every artifact it writes.

Exit codes: 0 success, 1 runtime failure, 2 config or usage violation,
3 hash mismatch, 4 missing input, 5 refusal to overwrite without --force.
Errors are emitted as one JSON object on stderr; progress goes to stderr,
data to stdout or the requested files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    DEFAULT_RMS_BOUNDS,
    DatasetChecksumError,
    generate,
    read_dataset,
    split,
    write_dataset,
)
from .encoders import ARCHITECTURES, EncoderConfig
from .evaluate import (
    DEFAULT_GROUP_SEED,
    DEFAULT_PROJECTIONS,
    GROUP_BASE_COUNT,
    GROUP_STEP_COUNT,
    MrrConfig,
    avg_l1,
    builtin_ranking_groups,
    cluster_wasserstein,
    mrr,
    ranking_score,
)
from .features import FAMILIES, REDUCTIONS, FeatureConfig, FeatureMismatchError
from .nn.checkpoint import CheckpointChecksumError
from .ssm import EstimatorConfig, ScheduleConfig, SsmTrainConfig, ssm_eval, ssm_train
from .synths import RenderConfig, space_for
from .training import distill_train, predictor_from_checkpoint

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_HASH = 3
EXIT_MISSING = 4
EXIT_OVERWRITE = 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


# ---------------------------------------------------------------------------
# run config: schema, defaults, resolution

# One row per leaf: dotted path, JSON-schema fragment, default value, pinned.
# Pinned defaults are the protocol values the shipped evaluation setup quotes
# its results against; the rest are free choices of this artifact.
_FIELDS: tuple[tuple[str, dict, object, bool], ...] = (
    ("synth", {"type": "string", "enum": ["subtoy", "fmtoy"]}, "subtoy", False),
    ("seed", {"type": "integer", "minimum": 0}, 0, False),
    ("render.sample_rate", {"type": "integer", "minimum": 1000}, 16000, False),
    ("render.total_duration", {"type": "number", "exclusiveMinimum": 0}, 2.0, False),
    ("render.midi_note", {"type": "integer", "minimum": 0, "maximum": 127}, 60, False),
    ("render.velocity", {"type": "integer", "minimum": 1, "maximum": 127}, 100, False),
    ("render.note_length", {"type": "number", "exclusiveMinimum": 0}, 1.0, False),
    ("feature.family", {"type": "string", "enum": list(FAMILIES)}, "mel192avg", False),
    ("feature.reduction", {"type": "string", "enum": list(REDUCTIONS)}, "avg_time", False),
    ("data.n", {"type": "integer", "minimum": 1}, 1000, False),
    ("data.rms_low", {"type": "number", "exclusiveMinimum": 0}, DEFAULT_RMS_BOUNDS[0], False),
    ("data.rms_high", {"type": "number", "exclusiveMinimum": 0}, DEFAULT_RMS_BOUNDS[1], False),
    (
        "data.fractions",
        {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2},
        [0.8, 0.1, 0.1],
        False,
    ),
    ("encoder.architecture", {"type": "string", "enum": list(ARCHITECTURES)}, "tfm", False),
    ("encoder.scale", {"type": "string", "enum": ["desk", "full", "custom"]}, "desk", False),
    ("encoder.output_dim", {"type": "integer", "minimum": 0}, 0, False),
    ("encoder.d_token", {"type": "integer", "minimum": 1}, 32, False),
    ("encoder.n_layers", {"type": "integer", "minimum": 1}, 1, False),
    ("encoder.d_hidden", {"type": "integer", "minimum": 1}, 256, False),
    ("encoder.n_heads", {"type": "integer", "minimum": 1}, 4, False),
    ("encoder.epochs", {"type": "integer", "minimum": 1}, 12, False),
    ("encoder.batch_size", {"type": "integer", "minimum": 1}, 256, False),
    ("encoder.base_lr", {"type": "number", "exclusiveMinimum": 0}, 1e-3, True),
    ("encoder.min_lr", {"type": "number", "exclusiveMinimum": 0}, 2e-6, True),
    ("encoder.restart_epoch", {"type": "integer", "minimum": 0}, 4, False),
    ("schedule.kind", {"type": "string", "enum": ["ploss", "mix", "switch"]}, "ploss", False),
    ("schedule.total_epochs", {"type": "integer", "minimum": 1}, 60, False),
    ("schedule.alpha", {"type": "number", "minimum": 0}, 1.0, False),
    (
        # empty means the default thirds split
        "schedule.phase_bounds",
        {"type": "array", "items": {"type": "integer", "minimum": 0}, "maxItems": 2},
        [],
        False,
    ),
    ("estimator.n_mels", {"type": "integer", "minimum": 1}, 128, True),
    ("estimator.window", {"type": "integer", "minimum": 2}, 1024, True),
    ("estimator.hop", {"type": "integer", "minimum": 1}, 512, True),
    (
        "estimator.channels",
        {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        [32, 64, 128, 128],
        False,
    ),
    ("estimator.hidden", {"type": "integer", "minimum": 1}, 256, False),
    ("ssm.batch_size", {"type": "integer", "minimum": 1}, 64, False),
    ("ssm.base_lr", {"type": "number", "exclusiveMinimum": 0}, 1e-3, False),
    ("ssm.min_lr", {"type": "number", "exclusiveMinimum": 0}, 1e-5, False),
    ("ssm.restart_epoch", {"type": "integer", "minimum": 0}, 0, False),
    ("ssm.val_every", {"type": "integer", "minimum": 1}, 1, False),
    ("mrr.queries", {"type": "integer", "minimum": 1}, 1024, False),
    ("mrr.pool", {"type": "integer", "minimum": 1}, 1024, False),
    ("mrr.runs", {"type": "integer", "minimum": 1}, 20, False),
    ("l1.sample_size", {"type": "integer", "minimum": 1}, 1024, False),
    ("l1.runs", {"type": "integer", "minimum": 1}, 1, False),
    ("rank.group_seed", {"type": "integer", "minimum": 0}, DEFAULT_GROUP_SEED, False),
    ("rank.n_bases", {"type": "integer", "minimum": 1}, GROUP_BASE_COUNT, False),
    ("rank.n_steps", {"type": "integer", "minimum": 2}, GROUP_STEP_COUNT, False),
    ("rank.groups", {"type": "array", "items": {"type": "string"}}, [], False),
    ("wasserstein.projections", {"type": "integer", "minimum": 1}, DEFAULT_PROJECTIONS, False),
)

PINNED_PATHS = frozenset(path for path, _, _, pinned in _FIELDS if pinned)


def _build_schema() -> dict:
    root: dict = {"type": "object", "additionalProperties": False, "properties": {}}
    for path, fragment, _, _ in _FIELDS:
        node = root
        parts = path.split(".")
        for part in parts[:-1]:
            node = node["properties"].setdefault(
                part, {"type": "object", "additionalProperties": False, "properties": {}}
            )
        node["properties"][parts[-1]] = fragment
    return root


RUN_SCHEMA = _build_schema()


def _default_values() -> dict:
    values: dict = {}
    for path, _, default, _ in _FIELDS:
        _set_path(values, path, copy.deepcopy(default))
    return values


def _set_path(doc: dict, path: str, value) -> None:
    parts = path.split(".")
    for part in parts[:-1]:
        doc = doc.setdefault(part, {})
    doc[parts[-1]] = value


def _get_path(doc: dict, path: str):
    for part in path.split("."):
        doc = doc[part]
    return doc


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def validate_config_doc(doc: dict) -> None:
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path)
        at = f" at {where}" if where else ""
        raise CliError(EXIT_CONFIG, "config", f"config{at}: {exc.message}")


@dataclasses.dataclass
class Resolved:
    values: dict
    origins: dict

    def __getitem__(self, path: str):
        return _get_path(self.values, path)

    def origin(self, path: str) -> str:
        return self.origins[path]


def resolve_config(args: argparse.Namespace, flag_map: tuple[tuple[str, str], ...]) -> Resolved:
    """defaults <- config file <- flags, with per-leaf origin tracking."""
    values = _default_values()
    origins = {path: "default" for path, _, _, _ in _FIELDS}

    config_path = getattr(args, "config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(EXIT_MISSING, "missing", f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, "config", f"config file is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise CliError(EXIT_CONFIG, "config", "config file must hold a JSON object")
        validate_config_doc(doc)
        for dotted, value in _flatten(doc).items():
            _set_path(values, dotted, value)
            origins[dotted] = "file"

    for dest, dotted in flag_map:
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(values, dotted, value)
            origins[dotted] = "flag"

    validate_config_doc(values)
    return Resolved(values, origins)


def run_document(command: str, cfg: Resolved) -> dict:
    """The resolved-config record persisted next to every artifact."""
    free = sorted(
        path
        for path, origin in cfg.origins.items()
        if origin == "default" and path not in PINNED_PATHS
    )
    pinned = sorted(p for p in PINNED_PATHS if cfg.origins[p] == "default")
    return {
        "tool": "synthproxy",
        "command": command,
        "seed": cfg.values.get("seed", 0),
        "config": cfg.values,
        "origins": cfg.origins,
        "pinned_defaults": pinned,
        "free_defaults": free,
        "inputs": {},
    }


# ---------------------------------------------------------------------------
# small IO helpers


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _emit_error(code: int, kind: str, message: str) -> None:
    print(json.dumps({"error": {"code": code, "kind": kind, "message": message}}), file=sys.stderr, flush=True)


def _emit_data(doc: dict) -> None:
    print(json.dumps(_json_safe(doc), indent=2, sort_keys=True))


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Path):
        return str(value)
    return value


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, "missing", f"{what} not found: {p}")
    return p


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".run.json")


def _identity(doc: dict) -> dict:
    return {k: doc[k] for k in ("command", "config", "inputs")}


def prepare_outputs(outputs: list[Path], sidecars: list[Path], doc: dict, force: bool) -> bool:
    """True when the command should produce artifacts, False when the
    existing ones were verified against the sidecar record (idempotent rerun).
    """
    if force:
        return True
    existing = [p for p in outputs if p.exists()]
    if not existing:
        return True
    if len(existing) == len(outputs) and all(s.exists() for s in sidecars):
        try:
            records = [json.loads(s.read_text()) for s in sidecars]
        except json.JSONDecodeError:
            records = []
        if records and all(_identity(r) == _identity(doc) for r in records):
            recorded = records[0].get("artifacts", {})
            for out in outputs:
                if recorded.get(out.name) != _sha256(out):
                    raise CliError(
                        EXIT_HASH,
                        "hash",
                        f"{out} does not match its recorded digest; rerun with --force to regenerate",
                    )
            _log(f"outputs verified against {sidecars[0]}; nothing to do")
            return False
        raise CliError(
            EXIT_OVERWRITE,
            "overwrite",
            f"{existing[0]} exists with a different configuration; use --force to overwrite",
        )
    raise CliError(
        EXIT_OVERWRITE,
        "overwrite",
        f"{existing[0]} already exists; use --force to overwrite",
    )


def finish_outputs(outputs: list[Path], sidecars: list[Path], doc: dict) -> dict:
    doc = dict(doc)
    doc["artifacts"] = {p.name: _sha256(p) for p in outputs}
    text = json.dumps(_json_safe(doc), indent=2, sort_keys=True)
    for sidecar in sidecars:
        sidecar.write_text(text + "\n")
    return doc


# ---------------------------------------------------------------------------
# config -> domain objects


def _render_config(cfg: Resolved) -> RenderConfig:
    try:
        return RenderConfig(
            sample_rate=cfg["render.sample_rate"],
            total_duration=cfg["render.total_duration"],
            midi_note=cfg["render.midi_note"],
            velocity=cfg["render.velocity"],
            note_length=cfg["render.note_length"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"render config: {exc}")


def _feature_config(cfg: Resolved) -> FeatureConfig:
    try:
        return FeatureConfig.default(
            cfg["feature.family"],
            reduction=cfg["feature.reduction"],
            sample_rate=cfg["render.sample_rate"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"feature config: {exc}")


def _encoder_config(cfg: Resolved, output_dim: int) -> EncoderConfig:
    scale = cfg["encoder.scale"]
    arch = cfg["encoder.architecture"]
    wanted = cfg["encoder.output_dim"]
    if wanted and wanted != output_dim:
        raise CliError(
            EXIT_CONFIG,
            "config",
            f"encoder.output_dim={wanted} but the dataset stores {output_dim}-dim embeddings",
        )
    overridable = (
        "d_token", "n_layers", "d_hidden", "n_heads",
        "epochs", "batch_size", "base_lr", "min_lr", "restart_epoch",
    )
    overrides = {
        field: cfg[f"encoder.{field}"]
        for field in overridable
        if cfg.origin(f"encoder.{field}") != "default"
    }
    try:
        if scale == "desk":
            return dataclasses.replace(EncoderConfig.desk(arch, output_dim), **overrides)
        if scale == "full":
            return dataclasses.replace(EncoderConfig.full_scale(arch, output_dim), **overrides)
        fields = {field: cfg[f"encoder.{field}"] for field in overridable}
        return EncoderConfig(architecture=arch, output_dim=output_dim, **fields)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"encoder config: {exc}")


def _schedule_config(cfg: Resolved) -> ScheduleConfig:
    bounds = cfg["schedule.phase_bounds"]
    try:
        return ScheduleConfig(
            kind=cfg["schedule.kind"],
            total_epochs=cfg["schedule.total_epochs"],
            alpha=cfg["schedule.alpha"],
            phase_bounds=tuple(bounds) if bounds else None,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"schedule config: {exc}")


def _ssm_config(cfg: Resolved) -> SsmTrainConfig:
    try:
        estimator = EstimatorConfig(
            n_mels=cfg["estimator.n_mels"],
            window=cfg["estimator.window"],
            hop=cfg["estimator.hop"],
            channels=tuple(cfg["estimator.channels"]),
            hidden=cfg["estimator.hidden"],
        )
        return SsmTrainConfig(
            schedule=_schedule_config(cfg),
            estimator=estimator,
            batch_size=cfg["ssm.batch_size"],
            base_lr=cfg["ssm.base_lr"],
            min_lr=cfg["ssm.min_lr"],
            restart_epoch=cfg["ssm.restart_epoch"],
            val_every=cfg["ssm.val_every"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"ssm config: {exc}")


def _read_dataset(path: str | Path, what: str = "dataset"):
    return read_dataset(_require_file(path, what))


# ---------------------------------------------------------------------------
# subcommands


def cmd_data_gen(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (
            ("synth", "synth"),
            ("seed", "seed"),
            ("n", "data.n"),
            ("feature", "feature.family"),
            ("reduction", "feature.reduction"),
            ("sample_rate", "render.sample_rate"),
            ("duration", "render.total_duration"),
            ("note_length", "render.note_length"),
            ("rms_low", "data.rms_low"),
            ("rms_high", "data.rms_high"),
        ),
    )
    out = Path(args.out)
    doc = run_document("data gen", cfg)
    if not prepare_outputs([out], [_sidecar(out)], doc, args.force):
        _emit_data({"status": "verified", "out": str(out), "sha256": _sha256(out)})
        return EXIT_OK

    space = space_for(cfg["synth"])
    render_cfg = _render_config(cfg)
    feature_cfg = _feature_config(cfg)
    rms = (cfg["data.rms_low"], cfg["data.rms_high"])
    if not rms[0] < rms[1]:
        raise CliError(EXIT_CONFIG, "config", "data.rms_low must be below data.rms_high")
    _log(f"generating {cfg['data.n']} {cfg['synth']} presets (seed {cfg['seed']}, jobs {args.jobs})")
    ds = generate(
        space, cfg["data.n"], cfg["seed"],
        render_cfg=render_cfg, feature_cfg=feature_cfg, rms_bounds=rms, jobs=args.jobs,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    doc = finish_outputs([out], [_sidecar(out)], doc)
    _log(f"wrote {out}")
    _emit_data({
        "status": "written",
        "out": str(out),
        "sha256": doc["artifacts"][out.name],
        "count": ds.header["count"],
        "rejections": ds.header["rejections"],
        "config_hash": ds.config_hash,
        "seed": cfg["seed"],
    })
    return EXIT_OK


def cmd_data_split(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, (("seed", "seed"), ("fractions", "data.fractions")))
    src = _require_file(args.src, "input dataset")
    outs = [Path(p) for p in args.out]
    fractions = list(cfg["data.fractions"])
    if len(outs) != len(fractions):
        raise CliError(
            EXIT_CONFIG, "config",
            f"{len(fractions)} fractions but {len(outs)} output paths",
        )
    doc = run_document("data split", cfg)
    doc["inputs"] = {str(src): _sha256(src)}
    sidecars = [_sidecar(p) for p in outs]
    if not prepare_outputs(outs, sidecars, doc, args.force):
        _emit_data({"status": "verified", "outputs": [str(p) for p in outs]})
        return EXIT_OK

    ds = _read_dataset(src)
    try:
        parts = split(ds, fractions, cfg["seed"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"split: {exc}")
    for part, out in zip(parts, outs):
        out.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(part, out)
    doc = finish_outputs(outs, sidecars, doc)
    _emit_data({
        "status": "written",
        "outputs": [
            {"path": str(o), "count": p.header["count"], "sha256": doc["artifacts"][o.name]}
            for p, o in zip(parts, outs)
        ],
        "seed": cfg["seed"],
    })
    return EXIT_OK


def cmd_proxy_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (
            ("seed", "seed"),
            ("arch", "encoder.architecture"),
            ("scale", "encoder.scale"),
            ("epochs", "encoder.epochs"),
            ("batch_size", "encoder.batch_size"),
            ("base_lr", "encoder.base_lr"),
            ("min_lr", "encoder.min_lr"),
        ),
    )
    train_path = _require_file(args.train, "training dataset")
    val_path = _require_file(args.val, "validation dataset")
    out_dir = Path(args.out_dir)
    outputs = [out_dir / "best_mrr.spck1", out_dir / "best_l1.spck1", out_dir / "journal.jsonl"]
    sidecar = out_dir / "run.json"

    doc = run_document("proxy train", cfg)
    doc["inputs"] = {str(train_path): _sha256(train_path), str(val_path): _sha256(val_path)}
    if not prepare_outputs(outputs, [sidecar], doc, args.force):
        _emit_data({"status": "verified", "out_dir": str(out_dir)})
        return EXIT_OK

    train_ds = _read_dataset(train_path)
    val_ds = _read_dataset(val_path)
    encoder_cfg = _encoder_config(cfg, train_ds.embeddings.shape[1])
    out_dir.mkdir(parents=True, exist_ok=True)
    _log(
        f"training {encoder_cfg.architecture} for {encoder_cfg.epochs} epochs "
        f"on {train_ds.values.shape[0]} presets (seed {cfg['seed']})"
    )
    result = distill_train(train_ds.space, train_ds, val_ds, encoder_cfg, cfg["seed"], out_dir)
    doc = finish_outputs(outputs, [sidecar], doc)
    _emit_data({
        "status": "written",
        "out_dir": str(out_dir),
        "best_val_mrr": result.best_val_mrr,
        "best_val_l1": result.best_val_l1,
        "best_mrr_epoch": result.best_mrr_epoch,
        "best_l1_epoch": result.best_l1_epoch,
        "final_train_loss": result.final_train_loss,
        "epochs_run": result.epochs_run,
        "seed": cfg["seed"],
    })
    return EXIT_OK


def _checked_predictor(checkpoint: str, dataset) -> object:
    predict = predictor_from_checkpoint(_require_file(checkpoint, "checkpoint"))
    got = getattr(predict, "config_hash", None)
    if got is not None and got != dataset.config_hash:
        raise CliError(
            EXIT_HASH, "hash",
            f"checkpoint feature config {got} does not match dataset {dataset.config_hash}",
        )
    return predict


def cmd_proxy_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (
            ("seed", "seed"),
            ("queries", "mrr.queries"),
            ("pool", "mrr.pool"),
            ("runs", "mrr.runs" if args.metric == "mrr" else "l1.runs"),
            ("sample_size", "l1.sample_size"),
        ),
    )
    ds = _read_dataset(args.data)
    predict = _checked_predictor(args.checkpoint, ds)
    if args.metric == "mrr":
        try:
            mrr_cfg = MrrConfig(
                q=cfg["mrr.queries"], k=cfg["mrr.pool"],
                runs=cfg["mrr.runs"], seed=cfg["seed"],
            )
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, "config", f"mrr config: {exc}")
        _log(f"mrr: q={mrr_cfg.q} k={mrr_cfg.k} runs={mrr_cfg.runs} seed={mrr_cfg.seed}")
        result = mrr(predict, ds, mrr_cfg)
        payload = {"metric": "mrr", "q": mrr_cfg.q, "k": mrr_cfg.k, "runs": mrr_cfg.runs}
    else:
        _log(f"avg_l1: sample_size={cfg['l1.sample_size']} runs={cfg['l1.runs']} seed={cfg['seed']}")
        result = avg_l1(
            predict, ds, cfg["l1.sample_size"], runs=cfg["l1.runs"], seed=cfg["seed"],
        )
        payload = {"metric": "l1", "sample_size": cfg["l1.sample_size"], "runs": cfg["l1.runs"]}
    payload.update({
        "mean": result.mean,
        "std": result.std,
        "per_run": list(result.per_run),
        "seed": cfg["seed"],
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
    })
    _write_json_output(args, cfg, f"proxy eval {args.metric}", payload)
    _emit_data(payload)
    return EXIT_OK


def _write_json_output(args: argparse.Namespace, cfg: Resolved, command: str, payload: dict) -> None:
    out = getattr(args, "out", None)
    if out is None:
        return
    out = Path(out)
    doc = run_document(command, cfg)
    doc["inputs"] = {
        str(p): _sha256(Path(p))
        for p in (getattr(args, "checkpoint", None), getattr(args, "data", None))
        if p is not None and Path(p).exists()
    }
    if prepare_outputs([out], [_sidecar(out)], doc, getattr(args, "force", False)):
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")
        finish_outputs([out], [_sidecar(out)], doc)
        _log(f"wrote {out}")


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (
            ("synth", "synth"),
            ("seed", "rank.group_seed"),
            ("feature", "feature.family"),
            ("reduction", "feature.reduction"),
            ("n_bases", "rank.n_bases"),
            ("n_steps", "rank.n_steps"),
            ("groups", "rank.groups"),
        ),
    )
    render_cfg = _render_config(cfg)
    feature_cfg = _feature_config(cfg)
    names = cfg["rank.groups"] or None
    try:
        groups = builtin_ranking_groups(
            cfg["synth"],
            seed=cfg["rank.group_seed"],
            n_bases=cfg["rank.n_bases"],
            n_steps=cfg["rank.n_steps"],
            render_cfg=render_cfg,
            names=names,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"rank groups: {exc}")
    _log(f"scoring {len(groups)} sweep groups with {feature_cfg.family}")
    scores = ranking_score(feature_cfg, groups, render_cfg)

    columns = ("group", "spearman_mean", "spearman_std", "n_bases", "n_undefined", "group_seed")
    rows = [
        {
            "group": s.name,
            "spearman_mean": s.mean,
            "spearman_std": s.std,
            "n_bases": len(s.scores),
            "n_undefined": s.n_undefined,
            "group_seed": cfg["rank.group_seed"],
        }
        for s in scores
    ]
    if args.out is not None:
        out = Path(args.out)
        doc = run_document("rank", cfg)
        if prepare_outputs([out], [_sidecar(out)], doc, args.force):
            out.parent.mkdir(parents=True, exist_ok=True)
            _write_csv(out, columns, rows)
            finish_outputs([out], [_sidecar(out)], doc)
            _log(f"wrote {out}")
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_wasserstein(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (("seed", "seed"), ("projections", "wasserstein.projections")),
    )
    ds_a = _read_dataset(args.a, "dataset a")
    ds_b = _read_dataset(args.b, "dataset b")
    if ds_a.config_hash != ds_b.config_hash:
        raise CliError(
            EXIT_HASH, "hash",
            f"datasets hold embeddings from different feature configs "
            f"({ds_a.config_hash} vs {ds_b.config_hash})",
        )
    distance = cluster_wasserstein(
        ds_a.embeddings, ds_b.embeddings,
        projections=cfg["wasserstein.projections"], seed=cfg["seed"],
    )
    payload = {
        "metric": "sliced_wasserstein",
        "distance": distance,
        "projections": cfg["wasserstein.projections"],
        "seed": cfg["seed"],
        "a": str(args.a),
        "b": str(args.b),
    }
    _write_json_output(args, cfg, "wasserstein", payload)
    _emit_data(payload)
    return EXIT_OK


def cmd_ssm_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(
        args,
        (
            ("seed", "seed"),
            ("schedule", "schedule.kind"),
            ("epochs", "schedule.total_epochs"),
            ("alpha", "schedule.alpha"),
            ("phase_bounds", "schedule.phase_bounds"),
            ("batch_size", "ssm.batch_size"),
            ("base_lr", "ssm.base_lr"),
            ("min_lr", "ssm.min_lr"),
            ("val_every", "ssm.val_every"),
        ),
    )
    train_path = _require_file(args.train, "training dataset")
    val_path = _require_file(args.val, "validation dataset")
    proxy = None
    if args.proxy is not None:
        proxy = _require_file(args.proxy, "proxy checkpoint")
    elif cfg["schedule.kind"] != "ploss":
        raise CliError(
            EXIT_CONFIG, "config",
            f"the {cfg['schedule.kind']} schedule needs --proxy",
        )
    out_dir = Path(args.out_dir)
    outputs = [out_dir / "best_estimator.spck1", out_dir / "journal.jsonl"]
    sidecar = out_dir / "run.json"

    doc = run_document("ssm train", cfg)
    doc["inputs"] = {str(train_path): _sha256(train_path), str(val_path): _sha256(val_path)}
    if proxy is not None:
        doc["inputs"][str(proxy)] = _sha256(proxy)
    if not prepare_outputs(outputs, [sidecar], doc, args.force):
        _emit_data({"status": "verified", "out_dir": str(out_dir)})
        return EXIT_OK

    train_ds = _read_dataset(train_path)
    val_ds = _read_dataset(val_path)
    ssm_cfg = _ssm_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    _log(
        f"ssm: schedule={ssm_cfg.schedule.kind} epochs={ssm_cfg.schedule.total_epochs} "
        f"seed={cfg['seed']} proxy={proxy}"
    )
    result = ssm_train(train_ds, val_ds, ssm_cfg, cfg["seed"], out_dir, proxy=proxy)
    doc = finish_outputs(outputs, [sidecar], doc)
    _emit_data({
        "status": "written",
        "out_dir": str(out_dir),
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
        "val_epochs": list(result.val_epochs),
        "val_metrics": [dict(m) for m in result.val_metrics],
        "final_train_loss": result.final_train_loss,
        "epochs_run": result.epochs_run,
        "seed": cfg["seed"],
    })
    return EXIT_OK


def cmd_ssm_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, (("seed", "seed"), ("batch_size", "ssm.batch_size")))
    estimator = _require_file(args.estimator, "estimator checkpoint")
    if args.data is not None:
        source = _read_dataset(args.data)
        source_path = Path(args.data)
    else:
        source_path = Path(args.audio_dir)
        if not source_path.is_dir():
            raise CliError(EXIT_MISSING, "missing", f"audio directory not found: {source_path}")
        source = source_path
    report = ssm_eval(
        str(estimator), source,
        batch_size=cfg["ssm.batch_size"],
        export_dir=args.export_dir,
    )
    payload = {
        "estimator": str(estimator),
        "source": str(source_path),
        "rows": len(report.rows),
        "skipped": report.skipped,
        "summary": dict(report.summary),
    }
    if args.out is not None:
        out_csv = Path(args.out)
        out_json = out_csv.with_suffix(".json")
        doc = run_document("ssm eval", cfg)
        doc["inputs"] = {str(estimator): _sha256(estimator)}
        if source_path.is_file():
            doc["inputs"][str(source_path)] = _sha256(source_path)
        outputs = [out_csv, out_json]
        if prepare_outputs(outputs, [_sidecar(out_csv)], doc, args.force):
            out_csv.parent.mkdir(parents=True, exist_ok=True)
            report.write_csv(out_csv)
            report.write_json(out_json)
            finish_outputs(outputs, [_sidecar(out_csv)], doc)
            _log(f"wrote {out_csv} and {out_json}")
    _emit_data(payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report merging


def _source_label(path: Path) -> str:
    return path.parent.name if path.stem in ("journal", "run") else path.stem


def _journal_rows(label: str, path: Path) -> tuple[list[dict], dict]:
    lines = []
    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                lines.append(json.loads(raw))
    long_rows = []
    val_series: dict[str, list[float]] = {}
    final: dict = {}
    selection = None
    epochs = 0
    for line in lines:
        kind = "selection" if "event" in line else (
            "val" if any(k.startswith("val_") for k in line) else "train"
        )
        epoch = line.get("epoch")
        if isinstance(epoch, int) and epoch >= 0:
            epochs = max(epochs, epoch + 1)
        for key, value in line.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            if key in ("step", "epoch"):
                continue
            long_rows.append({
                "source": label, "kind": kind,
                "index": "", "step": line.get("step", ""),
                "epoch": "" if epoch is None else epoch,
                "metric": key, "value": value,
            })
            if kind == "val" and key.startswith("val_"):
                val_series.setdefault(key, []).append(float(value))
        if kind == "selection":
            selection = {k: v for k, v in line.items() if k != "event"}
        elif line.get("train_loss") is not None:
            final = {
                k: v for k, v in line.items()
                if isinstance(v, (int, float)) and not isinstance(v, bool)
            }
    summary = {
        "type": "journal",
        "lines": len(lines),
        "epochs": epochs,
        "final": final,
        "val": {
            key: {"last": series[-1], "min": min(series), "max": max(series)}
            for key, series in val_series.items()
        },
        "selection": selection,
    }
    return long_rows, summary


def _table_rows(label: str, path: Path) -> tuple[list[dict], dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        records = list(reader)
    id_column = next((c for c in ("item", "file", "group", "name") if c in columns), None)
    long_rows = []
    numeric: dict[str, list[float]] = {}
    for i, record in enumerate(records):
        index = record[id_column] if id_column else str(i)
        for column, raw in record.items():
            if column == id_column:
                continue
            try:
                value = float(raw)
            except (TypeError, ValueError):
                continue
            long_rows.append({
                "source": label, "kind": "table",
                "index": index, "step": "", "epoch": "",
                "metric": column, "value": value,
            })
            numeric.setdefault(column, []).append(value)
    stats = {}
    for column, series in numeric.items():
        arr = np.asarray(series, dtype=np.float64)
        good = arr[np.isfinite(arr)]
        stats[column] = {
            "mean": float(good.mean()) if good.size else None,
            "std": float(good.std()) if good.size else None,
            "n": int(arr.size),
        }
    summary = {"type": "table", "rows": len(records), "columns": stats}
    return long_rows, summary


def cmd_report(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, ())
    inputs = [
        _require_file(p, "report input")
        for p in args.inputs
    ]
    out_dir = Path(args.out_dir)
    outputs = [out_dir / "report.json", out_dir / "summary.csv", out_dir / "long.csv"]
    sidecar = out_dir / "run.json"
    doc = run_document("report", cfg)
    doc["inputs"] = {str(p): _sha256(p) for p in inputs}
    if not prepare_outputs(outputs, [sidecar], doc, args.force):
        _emit_data({"status": "verified", "out_dir": str(out_dir)})
        return EXIT_OK

    sources: dict[str, dict] = {}
    long_rows: list[dict] = []
    for path in inputs:
        label = _source_label(path)
        if label in sources:
            label = f"{label}:{len(sources)}"
        if path.suffix == ".jsonl":
            rows, summary = _journal_rows(label, path)
        elif path.suffix == ".csv":
            rows, summary = _table_rows(label, path)
        else:
            raise CliError(
                EXIT_CONFIG, "config",
                f"report inputs must be .jsonl journals or .csv tables, got {path}",
            )
        sources[label] = summary
        long_rows.extend(rows)

    report_doc = {"command": "report", "sources": sources, "inputs": [str(p) for p in inputs]}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(_json_safe(report_doc), indent=2, sort_keys=True) + "\n"
    )

    summary_rows = []
    for label, summary in sources.items():
        if summary["type"] == "journal":
            for key, value in summary["final"].items():
                summary_rows.append({"source": label, "metric": f"final.{key}", "value": value})
            for key, stats in summary["val"].items():
                for stat, value in stats.items():
                    summary_rows.append(
                        {"source": label, "metric": f"{key}.{stat}", "value": value}
                    )
        else:
            for column, stats in summary["columns"].items():
                for stat in ("mean", "std"):
                    summary_rows.append(
                        {"source": label, "metric": f"{column}.{stat}", "value": stats[stat]}
                    )
    _write_csv(out_dir / "summary.csv", ("source", "metric", "value"), summary_rows)
    _write_csv(
        out_dir / "long.csv",
        ("source", "kind", "index", "step", "epoch", "metric", "value"),
        long_rows,
    )
    finish_outputs(outputs, [sidecar], doc)
    _log(f"wrote {out_dir}/report.json, summary.csv, long.csv")
    _emit_data(report_doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error(EXIT_CONFIG, "config", f"{self.prog}: {message}")
        raise SystemExit(EXIT_CONFIG)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_strs(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _add_common(parser: argparse.ArgumentParser, *, force: bool = True) -> None:
    parser.add_argument("--config", help="JSON run config; flags override its values")
    parser.add_argument("--seed", type=int, help="seed for all randomness in this invocation")
    if force:
        parser.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synthproxy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset generation and splitting")
    dsub = data.add_subparsers(dest="subcommand", required=True)

    gen = dsub.add_parser("gen", help="render presets and embed them into a dataset")
    _add_common(gen)
    gen.add_argument("--synth", choices=["subtoy", "fmtoy"])
    gen.add_argument("--n", type=int, help="number of gate-passing presets")
    gen.add_argument("--feature", choices=list(FAMILIES))
    gen.add_argument("--reduction", choices=list(REDUCTIONS))
    gen.add_argument("--sample-rate", dest="sample_rate", type=int)
    gen.add_argument("--duration", type=float, help="render length in seconds")
    gen.add_argument("--note-length", dest="note_length", type=float, help="note-on time in seconds")
    gen.add_argument("--rms-low", dest="rms_low", type=float)
    gen.add_argument("--rms-high", dest="rms_high", type=float)
    gen.add_argument("--jobs", type=int, default=1, help="parallel render workers")
    gen.add_argument("--out", required=True, help="output dataset path (.spds)")
    gen.set_defaults(func=cmd_data_gen)

    spl = dsub.add_parser("split", help="partition a dataset into disjoint parts")
    _add_common(spl)
    spl.add_argument("--in", dest="src", required=True, help="input dataset")
    spl.add_argument("--fractions", type=_csv_floats, help="e.g. 0.8,0.1,0.1")
    spl.add_argument("--out", nargs="+", required=True, help="one output path per fraction")
    spl.set_defaults(func=cmd_data_split)

    proxy = sub.add_parser("proxy", help="preset encoder training and evaluation")
    psub = proxy.add_subparsers(dest="subcommand", required=True)

    ptrain = psub.add_parser("train", help="distill a preset encoder from a dataset")
    _add_common(ptrain)
    ptrain.add_argument("--train", required=True, help="training dataset")
    ptrain.add_argument("--val", required=True, help="validation dataset")
    ptrain.add_argument("--arch", choices=list(ARCHITECTURES))
    ptrain.add_argument("--scale", choices=["desk", "full", "custom"])
    ptrain.add_argument("--epochs", type=int)
    ptrain.add_argument("--batch-size", dest="batch_size", type=int)
    ptrain.add_argument("--base-lr", dest="base_lr", type=float)
    ptrain.add_argument("--min-lr", dest="min_lr", type=float)
    ptrain.add_argument("--out-dir", dest="out_dir", required=True)
    ptrain.set_defaults(func=cmd_proxy_train)

    peval = psub.add_parser("eval", help="score a trained encoder on a dataset")
    peval.add_argument("metric", choices=["mrr", "l1"])
    _add_common(peval)
    peval.add_argument("--checkpoint", required=True)
    peval.add_argument("--data", required=True)
    peval.add_argument("--Q", dest="queries", type=int, help="queries per run (mrr)")
    peval.add_argument("--K", dest="pool", type=int, help="candidate pool size (mrr)")
    peval.add_argument("--runs", type=int)
    peval.add_argument("--sample-size", dest="sample_size", type=int, help="rows per run (l1)")
    peval.add_argument("--out", help="also write the result JSON here")
    peval.set_defaults(func=cmd_proxy_eval)

    rank = sub.add_parser("rank", help="sweep-group ranking scores for a feature family")
    _add_common(rank)
    rank.add_argument("--synth", choices=["subtoy", "fmtoy"])
    rank.add_argument("--feature", choices=list(FAMILIES))
    rank.add_argument("--reduction", choices=list(REDUCTIONS))
    rank.add_argument("--groups", type=_csv_strs, help="restrict to these group names")
    rank.add_argument("--n-bases", dest="n_bases", type=int)
    rank.add_argument("--n-steps", dest="n_steps", type=int)
    rank.add_argument("--out", help="write CSV here instead of stdout")
    rank.set_defaults(func=cmd_rank)

    was = sub.add_parser("wasserstein", help="sliced W1 distance between two datasets' embeddings")
    _add_common(was)
    was.add_argument("--a", required=True, help="first dataset")
    was.add_argument("--b", required=True, help="second dataset")
    was.add_argument("--projections", type=int)
    was.add_argument("--out", help="also write the result JSON here")
    was.set_defaults(func=cmd_wasserstein)

    ssm = sub.add_parser("ssm", help="sound-matching estimator training and evaluation")
    ssub = ssm.add_subparsers(dest="subcommand", required=True)

    strain = ssub.add_parser("train", help="train a preset estimator on rendered audio")
    _add_common(strain)
    strain.add_argument("--train", required=True)
    strain.add_argument("--val", required=True)
    strain.add_argument("--schedule", choices=["ploss", "mix", "switch"])
    strain.add_argument("--epochs", type=int)
    strain.add_argument("--alpha", type=float, help="embedding loss weight ceiling")
    strain.add_argument("--phase-bounds", dest="phase_bounds", type=_csv_ints, help="e.g. 20,40")
    strain.add_argument("--proxy", help="frozen proxy checkpoint (required for mix/switch)")
    strain.add_argument("--batch-size", dest="batch_size", type=int)
    strain.add_argument("--base-lr", dest="base_lr", type=float)
    strain.add_argument("--min-lr", dest="min_lr", type=float)
    strain.add_argument("--val-every", dest="val_every", type=int)
    strain.add_argument("--out-dir", dest="out_dir", required=True)
    strain.set_defaults(func=cmd_ssm_train)

    seval = ssub.add_parser("eval", help="score an estimator on presets or WAV files")
    _add_common(seval)
    seval.add_argument("--estimator", required=True, help="estimator checkpoint")
    group = seval.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="in-domain dataset")
    group.add_argument("--audio-dir", dest="audio_dir", help="directory of WAV files")
    seval.add_argument("--batch-size", dest="batch_size", type=int)
    seval.add_argument("--export-dir", dest="export_dir", help="write target/render WAV pairs here")
    seval.add_argument("--out", help="write the report CSV here (JSON lands beside it)")
    seval.set_defaults(func=cmd_ssm_eval)

    rep = sub.add_parser("report", help="merge journals and CSVs into one summary")
    _add_common(rep)
    rep.add_argument("inputs", nargs="+", help="journal .jsonl and metric .csv files")
    rep.add_argument("--out-dir", dest="out_dir", required=True)
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        _emit_error(exc.code, exc.kind, str(exc))
        return exc.code
    except (FeatureMismatchError, DatasetChecksumError, CheckpointChecksumError) as exc:
        _emit_error(EXIT_HASH, "hash", str(exc))
        return EXIT_HASH
    except FileNotFoundError as exc:
        _emit_error(EXIT_MISSING, "missing", str(exc))
        return EXIT_MISSING
    except KeyboardInterrupt:
        _emit_error(EXIT_RUNTIME, "runtime", "interrupted")
        return EXIT_RUNTIME
    except Exception as exc:
        _emit_error(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
