"""Sound matching: infer synthesizer presets from target audio.

A small convolutional network reads log-mel spectrograms and emits a relaxed
preset: one sigmoid value per numerical parameter and a softmax distribution
per binary and categorical one.  Training mixes a parameter-space loss with
an audio-embedding loss routed through a frozen preset encoder, under one of
three weight schedules.  Validation never touches the encoder: predictions
are hardened, rendered with the real synthesizer, and scored with the
reference spectral metrics; the kept checkpoint minimizes the mean of stft,
mstft, mel and min-max rescaled mfccd over the run's validation epochs.

Evaluation covers held-out synthetic presets (parameter plus audio metrics)
and directories of external WAV files, which carry audio metrics only since
no ground-truth parameters exist for them.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset
from .features import LOG_FLOOR, Embedding, FeatureMismatchError, mel_filterbank, stft_mag
from .features import spectral_metrics
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import BatchNorm, Conv2d, Linear, Module
from .nn.optim import Adam, cosine_restart_lr
from .nn.tensor import Tensor
from .presets import BINARY, CATEGORICAL, NUMERICAL, Preset, PresetSpace, validate_batch
from .synths import AudioBuffer, RenderConfig, render
from .training import TrainingDivergedError, _rows_digest, load_encoder
from .wav import WavReadError, export_wav, fit_length, import_wav, resample

SCHEDULE_KINDS = ("ploss", "mix", "switch")

ESTIMATOR_FILE = "best_estimator.spck1"
JOURNAL_FILE = "journal.jsonl"
SSM_CHECKPOINT_KIND = "preset-estimator"

_PROB_TOL = 1e-6
_CE_FLOOR = 1e-12
_AUDIO_METRIC_KEYS = ("stft", "mel", "mstft", "mfccd")

IN_DOMAIN_COLUMNS = ("item", "num_l1", "bin_acc", "cat_acc") + _AUDIO_METRIC_KEYS
FILE_COLUMNS = ("file",) + _AUDIO_METRIC_KEYS


# ---------------------------------------------------------------------------
# relaxed presets


@dataclass(frozen=True)
class SoftPreset:
    """Batched differentiable preset.

    ``numerical`` holds unit-interval values, one column per numerical
    parameter in space order.  ``binary`` holds the probability of value 1,
    one column per binary parameter.  ``categorical`` holds one row-stochastic
    block per categorical parameter, columns indexing categories 1..C.
    """

    space: PresetSpace
    numerical: Tensor
    binary: Tensor
    categorical: tuple[Tensor, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "categorical", tuple(self.categorical))
        n_num = len(self.space.numerical_indices)
        n_bin = len(self.space.binary_indices)
        cat_idx = self.space.categorical_indices
        if self.numerical.ndim != 2 or self.numerical.shape[1] != n_num:
            raise ValueError(f"numerical block must be (batch, {n_num})")
        if self.binary.ndim != 2 or self.binary.shape[1] != n_bin:
            raise ValueError(f"binary block must be (batch, {n_bin})")
        if len(self.categorical) != len(cat_idx):
            raise ValueError("one probability block per categorical parameter required")
        b = self.numerical.shape[0]
        for name, t in (("numerical", self.numerical), ("binary", self.binary)):
            if t.shape[0] != b:
                raise ValueError("blocks disagree on batch size")
            d = t.data
            if d.size and (d.min() < -_PROB_TOL or d.max() > 1.0 + _PROB_TOL):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        for block, i in zip(self.categorical, cat_idx):
            card = self.space.params[i].cardinality
            if block.ndim != 2 or block.shape != (b, card):
                raise ValueError(f"probabilities for parameter {i} must be (batch, {card})")
            d = block.data
            if d.min() < -_PROB_TOL or d.max() > 1.0 + _PROB_TOL:
                raise ValueError(f"probabilities for parameter {i} must lie in [0, 1]")
            if np.abs(d.sum(axis=1) - 1.0).max() > _PROB_TOL:
                raise ValueError(f"probabilities for parameter {i} must sum to 1")

    @property
    def batch(self) -> int:
        return self.numerical.shape[0]

    @property
    def dtype(self):
        for t in (self.numerical, self.binary, *self.categorical):
            if t.data.size:
                return t.data.dtype
        return self.numerical.data.dtype


def soft_from_values(space: PresetSpace, values: np.ndarray, dtype=np.float64) -> SoftPreset:
    """Degenerate relaxation of hard presets: exact values and one-hot rows."""
    rows = np.asarray(values, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    rows = validate_batch(space, rows)
    b = rows.shape[0]
    numerical = Tensor(rows[:, list(space.numerical_indices)].astype(dtype))
    binary = Tensor(rows[:, list(space.binary_indices)].astype(dtype))
    blocks = []
    for i in space.categorical_indices:
        card = space.params[i].cardinality
        onehot = np.zeros((b, card), dtype=dtype)
        onehot[np.arange(b), rows[:, i].astype(np.int64) - 1] = 1.0
        blocks.append(Tensor(onehot))
    return SoftPreset(space, numerical, binary, tuple(blocks))


def soft_inputs(sp: SoftPreset) -> tuple[Tensor, list[Tensor]]:
    """Rearrange a SoftPreset into the encoders' relaxed-forward arguments:
    a (batch, n_scaled) matrix in parameter order plus categorical blocks."""
    cols: list[Tensor] = []
    ni = bi = 0
    for p in sp.space.params:
        if p.kind == NUMERICAL:
            cols.append(sp.numerical.narrow(1, ni, 1))
            ni += 1
        elif p.kind == BINARY:
            cols.append(sp.binary.narrow(1, bi, 1))
            bi += 1
    if not cols:
        scaled = Tensor(np.zeros((sp.batch, 0), dtype=sp.dtype))
    elif len(cols) == 1:
        scaled = cols[0]
    else:
        scaled = Tensor.cat(cols, axis=1)
    return scaled, list(sp.categorical)


def harden(sp: SoftPreset) -> np.ndarray:
    """Discrete value rows: numerical copied (clipped to the unit interval),
    binary and categorical by argmax with ties resolved to the lowest code."""
    space = sp.space
    out = np.zeros((sp.batch, space.size), dtype=np.float64)
    if space.numerical_indices:
        out[:, list(space.numerical_indices)] = np.clip(
            sp.numerical.data.astype(np.float64), 0.0, 1.0
        )
    if space.binary_indices:
        out[:, list(space.binary_indices)] = (
            sp.binary.data.astype(np.float64) > 0.5
        ).astype(np.float64)
    for block, i in zip(sp.categorical, space.categorical_indices):
        out[:, i] = np.argmax(block.data, axis=1) + 1.0
    return validate_batch(space, out)


# ---------------------------------------------------------------------------
# losses


def _as_target_rows(space: PresetSpace, target) -> np.ndarray:
    if isinstance(target, Preset):
        if target.space_id != space.synth_id:
            raise ValueError(
                f"target preset belongs to {target.space_id!r}, not {space.synth_id!r}"
            )
        rows = np.asarray(target.values, dtype=np.float64)[None, :]
    else:
        rows = np.asarray(target, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
    return validate_batch(space, rows)


def param_loss(sp: SoftPreset, target) -> Tensor:
    """Mean L1 over numerical parameters plus mean cross-entropy over binary
    and categorical ones, the three terms summed unweighted.

    ``target`` is a hard preset row batch (or a single :class:`Preset`).
    Returns a scalar tensor; gradients flow to the relaxed preset.
    """
    space = sp.space
    rows = _as_target_rows(space, target)
    if rows.shape[0] != sp.batch:
        raise ValueError(f"target batch {rows.shape[0]} != prediction batch {sp.batch}")
    dtype = sp.dtype
    terms: list[Tensor] = []
    if space.numerical_indices:
        tgt = rows[:, list(space.numerical_indices)].astype(dtype)
        terms.append((sp.numerical - Tensor(tgt)).abs().mean())
    if space.binary_indices:
        t = rows[:, list(space.binary_indices)].astype(dtype)
        p = sp.binary
        ce = (
            Tensor(t) * (p + _CE_FLOOR).log() + Tensor(1.0 - t) * ((1.0 - p) + _CE_FLOOR).log()
        )
        terms.append((-ce).mean())
    if space.categorical_indices:
        picked = []
        for block, i in zip(sp.categorical, space.categorical_indices):
            card = space.params[i].cardinality
            onehot = np.zeros((sp.batch, card), dtype=dtype)
            onehot[np.arange(sp.batch), rows[:, i].astype(np.int64) - 1] = 1.0
            picked.append((block * Tensor(onehot)).sum(axis=1).reshape(sp.batch, 1))
        stacked = picked[0] if len(picked) == 1 else Tensor.cat(picked, axis=1)
        terms.append((-((stacked + _CE_FLOOR).log())).mean())
    loss = terms[0]
    for extra in terms[1:]:
        loss = loss + extra
    return loss


class FrozenProxy:
    """A trained preset encoder used as a fixed, differentiable-through
    embedding function.

    Construction flips ``requires_grad`` off on every weight, so backward
    passes treat them as constants and gradients reach only the relaxed
    preset.  The model is locked into inference mode (running batch-norm
    statistics); convert dtypes before freezing if needed, since frozen
    weights no longer appear in ``parameters()``.
    """

    def __init__(self, model, config_hash: str, header: dict | None = None):
        self.model = model
        self.config_hash = config_hash
        self.header = header
        self.weights = tuple(model.parameters())
        for w in self.weights:
            w.requires_grad = False
            w.grad = None
        model.eval()
        self.soft_calls = 0

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "FrozenProxy":
        model, header = load_encoder(path)
        return cls(model, header["config_hash"], header)

    @property
    def space(self) -> PresetSpace:
        return self.model.space

    @property
    def output_dim(self) -> int | None:
        cfg = getattr(self.model, "cfg", None)
        return None if cfg is None else cfg.output_dim

    @property
    def architecture(self) -> str | None:
        cfg = getattr(self.model, "cfg", None)
        return None if cfg is None else cfg.architecture

    def forward_soft(self, sp: SoftPreset) -> Tensor:
        self.soft_calls += 1
        scaled, blocks = soft_inputs(sp)
        return self.model.forward_soft(scaled, blocks)

    def grads_clear(self) -> bool:
        return all(w.grad is None for w in self.weights)


def embedding_loss(
    sp: SoftPreset,
    target,
    proxy: FrozenProxy,
    *,
    target_hash: str | None = None,
) -> Tensor:
    """L1 between the proxy's embedding of the relaxed preset and the target
    audio embedding; the proxy weights stay fixed.

    ``target`` is either an :class:`Embedding` (batch of one) or a raw
    (batch, m) array, in which case ``target_hash`` must name the feature
    configuration it came from.
    """
    if isinstance(target, Embedding):
        rows = np.asarray(target.values, dtype=np.float64)[None, :]
        hash_ = target.config_hash
    else:
        rows = np.asarray(target, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if target_hash is None:
            raise ValueError("raw embedding arrays need an explicit target_hash")
        hash_ = target_hash
    if hash_ != proxy.config_hash:
        raise FeatureMismatchError(
            f"target embeddings come from config {hash_}, proxy expects {proxy.config_hash}"
        )
    if proxy.space.synth_id != sp.space.synth_id:
        raise ValueError(
            f"proxy encodes {proxy.space.synth_id!r} presets, got {sp.space.synth_id!r}"
        )
    pred = proxy.forward_soft(sp)
    if rows.shape != pred.shape:
        raise ValueError(f"target embeddings {rows.shape} do not match predictions {pred.shape}")
    return (pred - Tensor(rows.astype(pred.data.dtype))).abs().mean()


# ---------------------------------------------------------------------------
# the estimator network


@dataclass(frozen=True)
class EstimatorConfig:
    """Log-mel front end and convolutional backbone dimensions."""

    n_mels: int = 128
    window: int = 1024
    hop: int = 512
    channels: tuple[int, ...] = (32, 64, 128, 128)
    hidden: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_mels < 1 or self.hidden < 1:
            raise ValueError("dimensions must be positive")
        if self.hop < 1 or self.window < 2 or self.hop > self.window:
            raise ValueError("need 1 <= hop <= window")
        if self.window // 2 + 1 < self.n_mels:
            raise ValueError("window too short for the mel band count")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("channels must be positive")

    def to_json_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "window": self.window,
            "hop": self.hop,
            "channels": list(self.channels),
            "hidden": self.hidden,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EstimatorConfig":
        obj = dict(obj)
        obj["channels"] = tuple(obj.get("channels", (32, 64, 128, 128)))
        return cls(**obj)


class PresetEstimator(Module):
    """Audio-to-preset network: stride-2 conv blocks with batch norm over a
    log-mel image, global average pooling, one hidden affine, then a sigmoid
    head for numerical parameters and softmax heads for the rest."""

    def __init__(self, cfg: EstimatorConfig, space: PresetSpace, sample_rate: int, seed: int):
        super().__init__()
        self.cfg = cfg
        self.space = space
        self.sample_rate = int(sample_rate)
        self._fb = mel_filterbank(sample_rate, cfg.window // 2 + 1, cfg.n_mels)
        rng = np.random.default_rng(seed)
        chain = (1,) + cfg.channels
        self.convs = [
            Conv2d(chain[i], chain[i + 1], kernel=3, stride=2, pad=1, rng=rng)
            for i in range(len(cfg.channels))
        ]
        self.norms = [BatchNorm(c) for c in cfg.channels]
        self.trunk = Linear(cfg.channels[-1], cfg.hidden, rng)
        n_num = len(space.numerical_indices)
        n_bin = len(space.binary_indices)
        self.num_head = Linear(cfg.hidden, n_num, rng) if n_num else None
        self.bin_head = Linear(cfg.hidden, 2 * n_bin, rng) if n_bin else None
        self.cat_heads = [
            Linear(cfg.hidden, space.params[i].cardinality, rng)
            for i in space.categorical_indices
        ]

    def log_mel(self, samples: np.ndarray) -> np.ndarray:
        """Log-mel image(s), shape (n_mels, frames); batched input batches out."""
        x = np.asarray(samples, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        mels = [
            np.log(stft_mag(r, self.cfg.window, self.cfg.hop) @ self._fb.T + LOG_FLOOR).T
            for r in rows
        ]
        out = np.stack(mels).astype(np.float32)
        return out[0] if single else out

    def forward_logmel(self, mel: np.ndarray) -> SoftPreset:
        if mel.ndim != 3 or mel.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected (batch, {self.cfg.n_mels}, frames) log-mel input")
        dtype = self.trunk.weight.data.dtype
        x = Tensor(np.ascontiguousarray(mel[:, None, :, :], dtype=dtype))
        for conv, norm in zip(self.convs, self.norms):
            x = norm(conv(x)).relu()
        pooled = x.mean(axis=(2, 3))
        h = self.trunk(pooled).relu()
        b = mel.shape[0]
        if self.num_head is not None:
            numerical = self.num_head(h).sigmoid()
        else:
            numerical = Tensor(np.zeros((b, 0), dtype=dtype))
        if self.bin_head is not None:
            n_bin = len(self.space.binary_indices)
            pairs = self.bin_head(h).reshape(b, n_bin, 2).softmax(axis=-1)
            binary = pairs.narrow(2, 1, 1).reshape(b, n_bin)
        else:
            binary = Tensor(np.zeros((b, 0), dtype=dtype))
        categorical = tuple(head(h).softmax(axis=-1) for head in self.cat_heads)
        return SoftPreset(self.space, numerical, binary, categorical)

    def forward_audio(self, audio) -> SoftPreset:
        buffers = [audio] if isinstance(audio, AudioBuffer) else list(audio)
        if not buffers:
            raise ValueError("empty audio batch")
        for buf in buffers:
            if buf.sample_rate != self.sample_rate:
                raise ValueError(
                    f"audio at {buf.sample_rate} Hz, estimator expects {self.sample_rate} Hz"
                )
        lengths = {buf.samples.shape[0] for buf in buffers}
        if len(lengths) != 1:
            raise ValueError("all buffers in a batch must share one length")
        stacked = np.stack([buf.samples for buf in buffers])
        return self.forward_logmel(self.log_mel(stacked))


# ---------------------------------------------------------------------------
# loss schedules


@dataclass(frozen=True)
class ScheduleConfig:
    """Per-epoch weighting of the parameter and embedding losses.

    ``ploss`` trains on the parameter loss alone.  ``mix`` keeps the
    parameter loss at weight 1 and ramps the embedding loss linearly from 0
    to ``alpha`` across the middle phase.  ``switch`` trades one for the
    other with the same ramp, ending on the embedding loss alone.  Phase
    boundaries default to thirds of the epoch budget.
    """

    kind: str
    total_epochs: int = 60
    alpha: float = 1.0
    phase_bounds: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise ValueError("alpha must be finite and non-negative")
        if self.phase_bounds is not None:
            object.__setattr__(self, "phase_bounds", tuple(int(b) for b in self.phase_bounds))
            if len(self.phase_bounds) != 2:
                raise ValueError("phase_bounds must hold two epochs")
        if self.kind != "ploss":
            b1, b2 = self.boundaries
            if not 0 <= b1 < b2 <= self.total_epochs:
                raise ValueError("phase boundaries must satisfy 0 <= start < end <= total")

    @property
    def boundaries(self) -> tuple[int, int]:
        if self.phase_bounds is not None:
            return self.phase_bounds
        return self.total_epochs // 3, (2 * self.total_epochs) // 3

    @classmethod
    def desk(cls, kind: str, alpha: float = 1.0) -> "ScheduleConfig":
        return cls(kind=kind, total_epochs=60, alpha=alpha)

    @classmethod
    def full_scale(cls, kind: str, alpha: float = 1.0) -> "ScheduleConfig":
        return cls(kind=kind, total_epochs=600, alpha=alpha)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "total_epochs": self.total_epochs,
            "alpha": self.alpha,
            "phase_bounds": list(self.boundaries),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ScheduleConfig":
        obj = dict(obj)
        if obj.get("phase_bounds") is not None:
            obj["phase_bounds"] = tuple(obj["phase_bounds"])
        return cls(**obj)


def schedule_weights(cfg: ScheduleConfig, epoch) -> tuple[float, float]:
    """(parameter weight, embedding weight) at an epoch; continuous in epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if cfg.kind == "ploss":
        return 1.0, 0.0
    b1, b2 = cfg.boundaries
    if epoch < b1:
        return 1.0, 0.0
    lam = min(1.0, (epoch - b1) / (b2 - b1))
    if cfg.kind == "mix":
        return 1.0, cfg.alpha * lam
    return 1.0 - lam, cfg.alpha * lam


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SsmTrainConfig:
    schedule: ScheduleConfig
    estimator: EstimatorConfig = EstimatorConfig()
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    restart_epoch: int = 0
    val_every: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 < self.min_lr <= self.base_lr:
            raise ValueError("need 0 < min_lr <= base_lr")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")
        if self.restart_epoch < 0:
            raise ValueError("restart_epoch cannot be negative")

    def to_json_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_json_dict(),
            "estimator": self.estimator.to_json_dict(),
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "min_lr": self.min_lr,
            "restart_epoch": self.restart_epoch,
            "val_every": self.val_every,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SsmTrainConfig":
        obj = dict(obj)
        obj["schedule"] = ScheduleConfig.from_json_dict(obj["schedule"])
        obj["estimator"] = EstimatorConfig.from_json_dict(obj.get("estimator", {}))
        return cls(**obj)


@dataclass(frozen=True)
class SsmTrainResult:
    checkpoint_path: Path
    journal_path: Path
    best_epoch: int
    best_score: float
    val_epochs: tuple[int, ...]
    val_metrics: tuple[dict, ...]
    val_renders: int
    val_proxy_calls: int
    final_train_loss: float
    epochs_run: int


def _check_ssm_datasets(train_ds: EmbeddingDataset, val_ds: EmbeddingDataset) -> None:
    if train_ds.config_hash != val_ds.config_hash:
        raise ValueError(
            f"train and val datasets disagree on feature config: "
            f"{train_ds.config_hash} vs {val_ds.config_hash}"
        )
    if train_ds.header["synth"] != val_ds.header["synth"]:
        raise ValueError("train and val datasets come from different parameter spaces")
    if train_ds.embeddings.shape[1] != val_ds.embeddings.shape[1]:
        raise ValueError("train and val embedding widths differ")
    if _rows_digest(train_ds.values) & _rows_digest(val_ds.values):
        raise ValueError("validation presets overlap the training set")


def _render_row(space: PresetSpace, row: np.ndarray, render_cfg: RenderConfig) -> AudioBuffer:
    return render(space, Preset(space.synth_id, row), render_cfg)


def _mel_rows(model: PresetEstimator, space, values, render_cfg) -> np.ndarray:
    rows = values.astype(np.float64)
    return np.stack([model.log_mel(_render_row(space, r, render_cfg).samples) for r in rows])


def _render_validation(model, space, val_mels, val_buffers, render_cfg, batch_size=64):
    """Harden predictions, render them with the real synthesizer, and average
    the reference spectral metrics over the validation set."""
    model.eval()
    parts = []
    for start in range(0, len(val_mels), batch_size):
        parts.append(harden(model.forward_logmel(val_mels[start : start + batch_size])))
    hard = np.concatenate(parts)
    sums = dict.fromkeys(_AUDIO_METRIC_KEYS, 0.0)
    for row, target in zip(hard, val_buffers):
        metrics = spectral_metrics(target, _render_row(space, row, render_cfg))
        for key in sums:
            sums[key] += metrics[key]
    return {key: value / len(val_buffers) for key, value in sums.items()}


def _estimator_header(cfg, ds, seed, epoch, metrics, score, proxy):
    return {
        "kind": SSM_CHECKPOINT_KIND,
        "estimator": cfg.estimator.to_json_dict(),
        "schedule": cfg.schedule.to_json_dict(),
        "space": ds.header["synth"],
        "config_hash": ds.config_hash,
        "feature": ds.header["feature"],
        "render": ds.header["render"],
        "seed": seed,
        "epoch": epoch,
        "val_metrics": metrics,
        "selection_score": score,
        "proxy_architecture": None if proxy is None else proxy.architecture,
    }


def ssm_train(
    train_ds: EmbeddingDataset,
    val_ds: EmbeddingDataset,
    cfg: SsmTrainConfig,
    seed: int,
    out_dir: str | Path,
    proxy: FrozenProxy | str | Path | None = None,
) -> SsmTrainResult:
    """Train a preset estimator on rendered in-domain audio.

    Writes ``best_estimator.spck1`` and ``journal.jsonl`` into ``out_dir``.
    Step lines carry (step, epoch, lr, w_param, w_embed, train_loss); epoch
    summary lines repeat the step count and add val_stft/val_mel/val_mstft/
    val_mfccd on validation epochs; a final line records the selection.
    Checkpoint selection minimizes the mean of stft, mstft, mel and mfccd
    min-max rescaled over this run's validation epochs.  Validation renders
    every hardened prediction with the real synthesizer; the proxy is never
    consulted there, which the loop verifies by call counting.
    """
    schedule = cfg.schedule
    if isinstance(proxy, (str, Path)):
        proxy = FrozenProxy.from_checkpoint(proxy)
    if schedule.kind != "ploss" and proxy is None:
        raise ValueError(f"schedule kind {schedule.kind!r} needs a proxy checkpoint")
    _check_ssm_datasets(train_ds, val_ds)
    space = train_ds.space
    if proxy is not None:
        if proxy.config_hash != train_ds.config_hash:
            raise FeatureMismatchError(
                f"proxy was distilled against config {proxy.config_hash}, "
                f"datasets carry {train_ds.config_hash}"
            )
        if proxy.space.synth_id != space.synth_id:
            raise ValueError(
                f"proxy encodes {proxy.space.synth_id!r}, datasets hold {space.synth_id!r}"
            )
        if proxy.output_dim not in (None, train_ds.embeddings.shape[1]):
            raise ValueError(
                f"proxy emits {proxy.output_dim}-dim embeddings, "
                f"datasets store {train_ds.embeddings.shape[1]}"
            )

    render_cfg = train_ds.render_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    journal_path = out / JOURNAL_FILE
    ckpt_path = out / ESTIMATOR_FILE

    model = PresetEstimator(cfg.estimator, space, render_cfg.sample_rate, seed)
    opt = Adam(model.parameters())

    train_mels = _mel_rows(model, space, train_ds.values, render_cfg)
    val_rows = val_ds.values.astype(np.float64)
    val_buffers = [_render_row(space, row, render_cfg) for row in val_rows]
    val_mels = np.stack([model.log_mel(buf.samples) for buf in val_buffers])

    n = len(train_ds)
    values64 = train_ds.values.astype(np.float64)
    targets = train_ds.embeddings
    ds_hash = train_ds.config_hash

    step = 0
    final_loss = np.nan
    val_epochs: list[int] = []
    val_metrics: list[dict] = []
    snapshots: list[dict] = []
    val_renders = 0
    val_proxy_calls = 0

    with journal_path.open("w") as journal:

        def log(entry: dict) -> None:
            journal.write(json.dumps(entry) + "\n")

        for epoch in range(schedule.total_epochs):
            lr = cosine_restart_lr(
                epoch, schedule.total_epochs, cfg.base_lr, cfg.min_lr, cfg.restart_epoch
            )
            w_param, w_embed = schedule_weights(schedule, epoch)
            model.train(True)
            order = np.random.default_rng([seed, epoch]).permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                sp = model.forward_logmel(train_mels[idx])
                loss = None
                if w_param > 0.0:
                    loss = param_loss(sp, values64[idx]) * w_param
                if w_embed > 0.0:
                    part = embedding_loss(sp, targets[idx], proxy, target_hash=ds_hash) * w_embed
                    loss = part if loss is None else loss + part
                loss_val = 0.0 if loss is None else float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}, step {step} "
                        f"(lr={lr:.3g}); lower the learning rate or inspect the data"
                    )
                if loss is not None:
                    opt.zero_grad()
                    loss.backward()
                    opt.step(lr)
                    if w_embed > 0.0 and not proxy.grads_clear():
                        raise RuntimeError("frozen proxy accumulated gradients")
                step += 1
                epoch_loss += loss_val
                n_batches += 1
                log(
                    {
                        "step": step,
                        "epoch": epoch,
                        "lr": lr,
                        "w_param": w_param,
                        "w_embed": w_embed,
                        "train_loss": loss_val,
                    }
                )

            final_loss = epoch_loss / n_batches
            entry = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "w_param": w_param,
                "w_embed": w_embed,
                "train_loss": final_loss,
            }
            if (epoch + 1) % cfg.val_every == 0 or epoch == schedule.total_epochs - 1:
                calls_before = 0 if proxy is None else proxy.soft_calls
                metrics = _render_validation(model, space, val_mels, val_buffers, render_cfg)
                val_renders += len(val_buffers)
                if proxy is not None:
                    val_proxy_calls += proxy.soft_calls - calls_before
                    if proxy.soft_calls != calls_before:
                        raise RuntimeError("proxy consulted during validation rendering")
                val_epochs.append(epoch)
                val_metrics.append(metrics)
                snapshots.append(model.state_dict())
                entry.update({f"val_{k}": metrics[k] for k in _AUDIO_METRIC_KEYS})
            log(entry)

        mfccd = np.array([m["mfccd"] for m in val_metrics])
        lo, hi = float(mfccd.min()), float(mfccd.max())
        scaled = (mfccd - lo) / (hi - lo) if hi > lo else np.zeros_like(mfccd)
        scores = np.array(
            [
                (m["stft"] + m["mstft"] + m["mel"] + s) / 4.0
                for m, s in zip(val_metrics, scaled)
            ]
        )
        best = int(np.argmin(scores))
        log(
            {
                "step": step,
                "event": "selection",
                "selected_epoch": val_epochs[best],
                "selection_score": float(scores[best]),
                "mfccd_low": lo,
                "mfccd_high": hi,
            }
        )

    save_checkpoint(
        ckpt_path,
        _estimator_header(
            cfg, train_ds, seed, val_epochs[best], val_metrics[best], float(scores[best]), proxy
        ),
        snapshots[best],
    )
    return SsmTrainResult(
        checkpoint_path=ckpt_path,
        journal_path=journal_path,
        best_epoch=val_epochs[best],
        best_score=float(scores[best]),
        val_epochs=tuple(val_epochs),
        val_metrics=tuple(val_metrics),
        val_renders=val_renders,
        val_proxy_calls=val_proxy_calls,
        final_train_loss=final_loss,
        epochs_run=schedule.total_epochs,
    )


def load_estimator(path: str | Path):
    """Rebuild a trained estimator from a checkpoint; returns (model, header)."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != SSM_CHECKPOINT_KIND:
        raise ValueError(
            f"checkpoint at {path} is not a preset estimator (kind={header.get('kind')!r})"
        )
    cfg = EstimatorConfig.from_json_dict(header["estimator"])
    space = PresetSpace.from_json(json.dumps(header["space"]))
    model = PresetEstimator(cfg, space, header["render"]["sample_rate"], seed=0)
    model.load_state_dict(tensors)
    model.eval()
    return model, header


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class SsmEvalReport:
    """Per-item metric rows plus their column means.

    ``summary`` averages every numeric column; parameter columns hold NaN
    when the space lacks that parameter kind.  ``skipped`` counts input
    files that could not be read.
    """

    columns: tuple[str, ...]
    rows: tuple[dict, ...]
    summary: dict
    skipped: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.columns))
            writer.writeheader()
            writer.writerows(self.rows)

    def write_json(self, path: str | Path) -> None:
        doc = {
            "columns": list(self.columns),
            "rows": list(self.rows),
            "summary": self.summary,
            "skipped": self.skipped,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _summarize(columns, rows) -> dict:
    out = {}
    for col in columns:
        vals = [row[col] for row in rows]
        out[col] = float(np.mean(vals)) if vals else float("nan")
    return out


def _export_pair(export_dir: Path, stem: str, target: AudioBuffer, rendered: AudioBuffer) -> None:
    export_dir.mkdir(parents=True, exist_ok=True)
    export_wav(target, export_dir / f"{stem}_target.wav")
    export_wav(rendered, export_dir / f"{stem}_render.wav")


def _eval_in_domain(model, ds: EmbeddingDataset, batch_size, export_dir) -> SsmEvalReport:
    space = ds.space
    if space.synth_id != model.space.synth_id:
        raise ValueError(
            f"estimator infers {model.space.synth_id!r} presets, dataset holds {space.synth_id!r}"
        )
    render_cfg = ds.render_config
    if render_cfg.sample_rate != model.sample_rate:
        raise ValueError("dataset sample rate differs from the estimator's")
    num_idx = list(space.numerical_indices)
    bin_idx = list(space.binary_indices)
    cat_idx = list(space.categorical_indices)
    values = ds.values.astype(np.float64)
    rows: list[dict] = []
    for start in range(0, len(values), batch_size):
        chunk = values[start : start + batch_size]
        targets = [_render_row(space, r, render_cfg) for r in chunk]
        hard = harden(model.forward_audio(targets))
        for j, (true_row, target_buf) in enumerate(zip(chunk, targets)):
            pred_row = hard[j]
            pred_buf = _render_row(space, pred_row, render_cfg)
            metrics = spectral_metrics(target_buf, pred_buf)
            item = start + j
            rows.append(
                {
                    "item": item,
                    "num_l1": float(np.mean(np.abs(pred_row[num_idx] - true_row[num_idx])))
                    if num_idx
                    else float("nan"),
                    "bin_acc": float(np.mean(pred_row[bin_idx] == true_row[bin_idx]))
                    if bin_idx
                    else float("nan"),
                    "cat_acc": float(np.mean(pred_row[cat_idx] == true_row[cat_idx]))
                    if cat_idx
                    else float("nan"),
                    **{k: float(metrics[k]) for k in _AUDIO_METRIC_KEYS},
                }
            )
            if export_dir is not None:
                _export_pair(Path(export_dir), f"item_{item:05d}", target_buf, pred_buf)
    summary = _summarize(IN_DOMAIN_COLUMNS[1:], rows)
    return SsmEvalReport(columns=IN_DOMAIN_COLUMNS, rows=tuple(rows), summary=summary)


def _eval_files(model, directory: Path, render_cfg, export_dir) -> SsmEvalReport:
    if render_cfg is None:
        raise ValueError("audio-file evaluation needs a render config")
    if render_cfg.sample_rate != model.sample_rate:
        raise ValueError("render config sample rate differs from the estimator's")
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    space = model.space
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".wav")
    rows: list[dict] = []
    skipped = 0
    for path in paths:
        try:
            raw = import_wav(path)
        except WavReadError as exc:
            warnings.warn(f"skipping unreadable audio file: {exc}")
            skipped += 1
            continue
        target = fit_length(resample(raw, model.sample_rate), render_cfg.n_samples)
        hard = harden(model.forward_audio([target]))
        pred_buf = _render_row(space, hard[0], render_cfg)
        metrics = spectral_metrics(target, pred_buf)
        rows.append({"file": path.name, **{k: float(metrics[k]) for k in _AUDIO_METRIC_KEYS}})
        if export_dir is not None:
            _export_pair(Path(export_dir), path.stem, target, pred_buf)
    summary = _summarize(FILE_COLUMNS[1:], rows)
    return SsmEvalReport(columns=FILE_COLUMNS, rows=tuple(rows), summary=summary, skipped=skipped)


def ssm_eval(
    estimator,
    source,
    *,
    render_cfg: RenderConfig | None = None,
    batch_size: int = 64,
    export_dir: str | Path | None = None,
) -> SsmEvalReport:
    """Score an estimator on held-out presets or a directory of WAV files.

    With a dataset source, each stored preset is rendered as the target, the
    prediction is hardened and rendered, and rows carry parameter metrics
    (numerical L1, binary/categorical accuracy) plus the four reference
    audio metrics.  With a directory source, files are resampled and padded
    or trimmed to the render length, and rows carry audio metrics only.
    ``estimator`` may be a checkpoint path, in which case the stored render
    config is the default for file sources.  Unreadable files are skipped
    with a warning and counted in ``skipped``.
    """
    if isinstance(estimator, (str, Path)):
        model, header = load_estimator(estimator)
        if render_cfg is None:
            render_cfg = RenderConfig.from_json_dict(header["render"])
    else:
        model = estimator
    eval_switch = getattr(model, "eval", None)
    if callable(eval_switch):
        eval_switch()
    if isinstance(source, EmbeddingDataset):
        return _eval_in_domain(model, source, batch_size, export_dir)
    return _eval_files(model, Path(source), render_cfg, export_dir)
