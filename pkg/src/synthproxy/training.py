"""Distillation trainer: fit a preset encoder to stored audio embeddings.

The loop minimizes the per-dimension mean absolute error between predicted
and stored embedding rows with Adam under a cosine-restart schedule.  After
every epoch the validation split is scored by retrieval MRR and average L1,
and the best checkpoint under each metric is kept.  Given one seed, a fixed
dataset pair, and the same BLAS configuration, reruns are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset
from .encoders import EncoderConfig, build_encoder, encode_values
from .evaluate import MrrConfig, avg_l1, mrr
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, cosine_restart_lr
from .nn.tensor import Tensor
from .presets import PresetSpace

VAL_QUERY_CAP = 256
VAL_POOL_CAP = 512

BEST_MRR_FILE = "best_mrr.spck1"
BEST_L1_FILE = "best_l1.spck1"
JOURNAL_FILE = "journal.jsonl"

CHECKPOINT_KIND = "preset-encoder"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainResult:
    best_mrr_path: Path
    best_l1_path: Path
    journal_path: Path
    best_val_mrr: float
    best_val_l1: float
    best_mrr_epoch: int
    best_l1_epoch: int
    final_train_loss: float
    epochs_run: int


def _rows_digest(values: np.ndarray) -> set[bytes]:
    return {row.tobytes() for row in np.ascontiguousarray(values, dtype=np.float32)}


def _check_datasets(space: PresetSpace, train_ds: EmbeddingDataset, val_ds: EmbeddingDataset, cfg: EncoderConfig) -> None:
    if train_ds.config_hash != val_ds.config_hash:
        raise ValueError(
            f"train and val datasets disagree on feature config: {train_ds.config_hash} vs {val_ds.config_hash}"
        )
    for name, ds in (("train", train_ds), ("val", val_ds)):
        if ds.header["synth"]["synth_id"] != space.synth_id:
            raise ValueError(f"{name} dataset was generated for {ds.header['synth']['synth_id']!r}, not {space.synth_id!r}")
        if ds.values.shape[1] != space.size:
            raise ValueError(f"{name} dataset preset width {ds.values.shape[1]} != space size {space.size}")
    m = train_ds.embeddings.shape[1]
    if val_ds.embeddings.shape[1] != m:
        raise ValueError("train and val embedding widths differ")
    if cfg.output_dim != m:
        raise ValueError(f"encoder output_dim {cfg.output_dim} does not match embedding width {m}")
    if _rows_digest(train_ds.values) & _rows_digest(val_ds.values):
        raise ValueError("validation presets overlap the training set")


def _validate(model, val_ds: EmbeddingDataset, epoch: int) -> tuple[float, float]:
    predict = encoder_predictor(model, config_hash=val_ds.config_hash)
    n = len(val_ds)
    cfg = MrrConfig(q=min(VAL_QUERY_CAP, n), k=min(VAL_POOL_CAP, n), runs=1, seed=epoch + 1)
    val_mrr = mrr(predict, val_ds, cfg).mean
    val_l1 = avg_l1(predict, val_ds, sample_size=n, runs=1, seed=0).mean
    return val_mrr, val_l1


def _checkpoint_header(cfg, space, ds, seed, epoch, val_mrr, val_l1, metric):
    return {
        "kind": CHECKPOINT_KIND,
        "metric": metric,
        "encoder": cfg.to_json_dict(),
        "space": ds.header["synth"],
        "config_hash": ds.config_hash,
        "feature": ds.header["feature"],
        "seed": seed,
        "epoch": epoch,
        "val_mrr": val_mrr,
        "val_l1": val_l1,
    }


def distill_train(
    space: PresetSpace,
    train_ds: EmbeddingDataset,
    val_ds: EmbeddingDataset,
    cfg: EncoderConfig,
    seed: int,
    out_dir: str | Path,
) -> TrainResult:
    """Train an encoder on a dataset pair and keep the two best checkpoints.

    Writes ``best_mrr.spck1``, ``best_l1.spck1`` and ``journal.jsonl`` into
    ``out_dir``.  Journal lines carry (step, epoch, lr, train_loss) per
    optimization step plus val_mrr/val_l1 on epoch boundaries; the epoch -1
    line records the untrained model's validation scores.
    """
    _check_datasets(space, train_ds, val_ds, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    journal_path = out / JOURNAL_FILE
    best_mrr_path = out / BEST_MRR_FILE
    best_l1_path = out / BEST_L1_FILE

    model = build_encoder(cfg, space, seed)
    opt = Adam(model.parameters())
    batch_size = cfg.resolved_batch_size
    n = len(train_ds)
    values = train_ds.values
    targets = train_ds.embeddings

    best_mrr = -np.inf
    best_l1 = np.inf
    best_mrr_epoch = -1
    best_l1_epoch = -1
    final_loss = np.nan
    step = 0

    with journal_path.open("w") as journal:

        def log(entry: dict) -> None:
            journal.write(json.dumps(entry) + "\n")

        val_mrr, val_l1 = _validate(model, val_ds, epoch=-1)
        log({"step": 0, "epoch": -1, "lr": 0.0, "train_loss": None, "val_mrr": val_mrr, "val_l1": val_l1})

        for epoch in range(cfg.epochs):
            lr = cosine_restart_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr, cfg.restart_epoch)
            model.train(True)
            order = np.random.default_rng([seed, epoch]).permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                pred = model(values[idx])
                target = Tensor(targets[idx].astype(pred.data.dtype))
                loss = (pred - target).abs().mean()
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}, step {step} (lr={lr:.3g}); "
                        "lower the learning rate or inspect the dataset for outliers"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                step += 1
                epoch_loss += loss_val
                n_batches += 1
                log({"step": step, "epoch": epoch, "lr": lr, "train_loss": loss_val})

            final_loss = epoch_loss / n_batches
            val_mrr, val_l1 = _validate(model, val_ds, epoch)
            log(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "train_loss": final_loss,
                    "val_mrr": val_mrr,
                    "val_l1": val_l1,
                }
            )
            if val_mrr > best_mrr:
                best_mrr = val_mrr
                best_mrr_epoch = epoch
                save_checkpoint(
                    best_mrr_path,
                    _checkpoint_header(cfg, space, train_ds, seed, epoch, val_mrr, val_l1, "val_mrr"),
                    model.state_dict(),
                )
            if val_l1 < best_l1:
                best_l1 = val_l1
                best_l1_epoch = epoch
                save_checkpoint(
                    best_l1_path,
                    _checkpoint_header(cfg, space, train_ds, seed, epoch, val_mrr, val_l1, "val_l1"),
                    model.state_dict(),
                )

    return TrainResult(
        best_mrr_path=best_mrr_path,
        best_l1_path=best_l1_path,
        journal_path=journal_path,
        best_val_mrr=float(best_mrr),
        best_val_l1=float(best_l1),
        best_mrr_epoch=best_mrr_epoch,
        best_l1_epoch=best_l1_epoch,
        final_train_loss=final_loss,
        epochs_run=cfg.epochs,
    )


def load_encoder(path: str | Path):
    """Rebuild a trained encoder from a checkpoint; returns (model, header)."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint at {path} is not a preset encoder (kind={header.get('kind')!r})")
    cfg = EncoderConfig.from_json_dict(header["encoder"])
    space = PresetSpace.from_json(json.dumps(header["space"]))
    model = build_encoder(cfg, space, seed=0)
    model.load_state_dict(tensors)
    model.eval()
    return model, header


def encoder_predictor(model, config_hash: str | None = None, batch_size: int = 512):
    """Wrap a model as a predict callable for the evaluation metrics."""

    def predict(rows: np.ndarray) -> np.ndarray:
        return encode_values(model, rows, batch_size=batch_size)

    if config_hash is not None:
        predict.config_hash = config_hash
    return predict


def predictor_from_checkpoint(path: str | Path):
    """Load a checkpoint and return its predict callable (hash-carrying)."""
    model, header = load_encoder(path)
    return encoder_predictor(model, config_hash=header["config_hash"])
