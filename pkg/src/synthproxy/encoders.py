"""Preset encoders: map synthesizer presets to audio-feature embeddings.

Five architectures cover two input representations.  One-hot models consume
the flat encoding from :mod:`synthproxy.presets`; token models consume a
learned per-parameter token matrix.  Every architecture shares the same
projection head: a single affine layer onto the embedding space.

Each model exposes two forward paths.  ``forward_values`` takes a plain
(batch, n_params) value matrix.  ``forward_soft`` takes differentiable
relaxed presets (values for numerical/binary parameters, probability vectors
for categorical ones) so downstream estimators can backpropagate through the
preset representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from synthproxy.nn.layers import (
    BatchNorm,
    BiGRU,
    Highway,
    LayerNorm,
    Linear,
    Module,
    SinusoidalPE,
    TransformerBlock,
    normal_embedding,
)
from synthproxy.nn.tensor import Tensor
from synthproxy.presets import CATEGORICAL, PresetSpace, one_hot_batch, validate_batch

ARCHITECTURES = ("mlp_oh", "hn_oh", "hn_pt", "hn_ptgru", "tfm")

# token models feed tokens straight into their backbone, so the transformer
# width is the token width; its feed-forward inner dim is the usual 4x
TFM_FF_MULT = 4


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and training hyperparameters for one preset encoder."""

    architecture: str
    output_dim: int
    d_token: int = 0
    n_layers: int = 1
    d_hidden: int = 256
    n_heads: int = 4
    epochs: int = 30
    batch_size: int | None = None
    base_lr: float = 1e-3
    min_lr: float = 2e-6
    restart_epoch: int = 10

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.output_dim <= 0 or self.d_hidden <= 0 or self.n_layers <= 0:
            raise ValueError("dimensions must be positive")
        if self.architecture in ("hn_pt", "hn_ptgru", "tfm") and self.d_token <= 0:
            raise ValueError(f"{self.architecture} needs d_token > 0")
        if self.architecture == "hn_ptgru" and self.d_hidden % 2:
            raise ValueError("hn_ptgru needs an even d_hidden (two GRU directions)")
        if self.architecture == "tfm":
            if self.d_hidden % self.n_heads:
                raise ValueError("tfm needs d_hidden divisible by n_heads")
            if self.d_token != self.d_hidden:
                raise ValueError("tfm feeds tokens straight into attention; d_token must equal d_hidden")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0.0 < self.min_lr <= self.base_lr:
            raise ValueError("need 0 < min_lr <= base_lr")

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 256 if self.architecture == "tfm" else 512

    @classmethod
    def desk(cls, architecture: str, output_dim: int) -> "EncoderConfig":
        """Small profile sized for single-CPU runs."""
        if architecture == "tfm":
            # attention width equals token width, so shrink both together
            dims = dict(d_token=128, d_hidden=128, n_layers=3)
        else:
            dims = dict(d_token=32, d_hidden=256, n_layers=4)
        return cls(
            architecture=architecture,
            output_dim=output_dim,
            n_heads=4,
            epochs=12,
            batch_size=256,
            restart_epoch=4,
            **dims,
        )

    @classmethod
    def full_scale(cls, architecture: str, output_dim: int) -> "EncoderConfig":
        """Full-size profile for each architecture."""
        dims = {
            "mlp_oh": dict(d_token=0, n_layers=2, d_hidden=2048),
            "hn_oh": dict(d_token=0, n_layers=6, d_hidden=768),
            "hn_pt": dict(d_token=64, n_layers=6, d_hidden=512),
            "hn_ptgru": dict(d_token=384, n_layers=6, d_hidden=768),
            "tfm": dict(d_token=256, n_layers=6, d_hidden=256, n_heads=8),
        }[architecture]
        return cls(architecture=architecture, output_dim=output_dim, **dims)

    def to_json_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "output_dim": self.output_dim,
            "d_token": self.d_token,
            "n_layers": self.n_layers,
            "d_hidden": self.d_hidden,
            "n_heads": self.n_heads,
            "epochs": self.epochs,
            "batch_size": self.resolved_batch_size,
            "base_lr": self.base_lr,
            "min_lr": self.min_lr,
            "restart_epoch": self.restart_epoch,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


class PresetTokenizer(Module):
    """Learned per-parameter tokens.

    Numerical and binary parameters each own a trainable vector scaled by the
    parameter value; categorical parameters own a lookup table indexed by the
    1-based category.  Rows come out in parameter order.
    """

    def __init__(self, space: PresetSpace, d_token: int, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.d_token = d_token
        self.scaled_indices = tuple(
            i for i, p in enumerate(space.params) if p.kind != CATEGORICAL
        )
        self.cat_indices = space.categorical_indices
        self.value_vectors = Tensor(
            normal_embedding(rng, (len(self.scaled_indices), d_token)), requires_grad=True
        )
        self.cat_tables = [
            Tensor(normal_embedding(rng, (space.params[i].cardinality, d_token)), requires_grad=True)
            for i in self.cat_indices
        ]
        # concatenation emits the scaled block then the categorical block;
        # this permutation restores parameter order
        concat_order = list(self.scaled_indices) + list(self.cat_indices)
        perm = np.empty(space.size, dtype=np.int64)
        for pos, param_index in enumerate(concat_order):
            perm[param_index] = pos
        self.perm = perm

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + "value_vectors", self.value_vectors)]
        out.extend(
            (f"{prefix}cat_tables.{k}", t) for k, t in enumerate(self.cat_tables)
        )
        return out

    def __call__(self, values: np.ndarray) -> Tensor:
        values = validate_batch(self.space, values)
        dtype = self.value_vectors.data.dtype
        scaled = Tensor(values[:, list(self.scaled_indices), None].astype(dtype))
        parts = [scaled * self.value_vectors]
        batch = values.shape[0]
        for table, i in zip(self.cat_tables, self.cat_indices):
            codes = values[:, i].astype(np.int64) - 1
            parts.append(table.index_select(0, codes).reshape(batch, 1, self.d_token))
        seq = parts[0] if len(parts) == 1 else Tensor.cat(parts, axis=1)
        return seq.index_select(1, self.perm)

    def forward_soft(self, scaled_values: Tensor, cat_probs: list[Tensor]) -> Tensor:
        """Differentiable tokens from relaxed presets.

        ``scaled_values`` holds numerical/binary entries in parameter order
        restricted to those kinds, shape (batch, n_scaled); ``cat_probs``
        holds one probability row per categorical parameter, each summing
        to 1.  Deterministic inputs reproduce the hard path exactly.
        """
        _check_soft_inputs(self.space, scaled_values, cat_probs)
        batch = scaled_values.shape[0]
        parts = [scaled_values.reshape(batch, len(self.scaled_indices), 1) * self.value_vectors]
        for table, probs in zip(self.cat_tables, cat_probs):
            parts.append((probs @ table).reshape(batch, 1, self.d_token))
        seq = parts[0] if len(parts) == 1 else Tensor.cat(parts, axis=1)
        return seq.index_select(1, self.perm)


def _check_soft_inputs(space: PresetSpace, scaled_values: Tensor, cat_probs: list[Tensor]) -> None:
    n_scaled = space.size - len(space.categorical_indices)
    if scaled_values.ndim != 2 or scaled_values.shape[1] != n_scaled:
        raise ValueError(f"expected (batch, {n_scaled}) scaled values")
    data = scaled_values.data
    if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
        raise ValueError("relaxed numerical/binary values outside [0, 1]")
    if len(cat_probs) != len(space.categorical_indices):
        raise ValueError("one probability row per categorical parameter required")
    for probs, i in zip(cat_probs, space.categorical_indices):
        card = space.params[i].cardinality
        if probs.ndim != 2 or probs.shape[1] != card:
            raise ValueError(f"probabilities for parameter {i} must have {card} columns")
        p = probs.data
        if p.min() < -1e-6 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
            raise ValueError(f"probabilities for parameter {i} must be a distribution")


def _soft_one_hot(space: PresetSpace, scaled_values: Tensor, cat_probs: list[Tensor]) -> Tensor:
    """Relaxed flat encoding laid out exactly like the hard one-hot."""
    _check_soft_inputs(space, scaled_values, cat_probs)
    columns: list[Tensor] = []
    scaled_pos = 0
    cat_pos = 0
    for p in space.params:
        if p.kind == CATEGORICAL:
            columns.append(cat_probs[cat_pos])
            cat_pos += 1
        else:
            columns.append(scaled_values.narrow(1, scaled_pos, 1))
            scaled_pos += 1
    return Tensor.cat(columns, axis=1)


class _EncoderBase(Module):
    space: PresetSpace
    cfg: EncoderConfig

    def _dtype(self):
        return self.head.weight.data.dtype

    def forward_values(self, values: np.ndarray) -> Tensor:
        raise NotImplementedError

    def forward_soft(self, scaled_values: Tensor, cat_probs: list[Tensor]) -> Tensor:
        raise NotImplementedError

    def __call__(self, values: np.ndarray) -> Tensor:
        return self.forward_values(values)


class _OneHotEncoder(_EncoderBase):
    def _flat_values(self, values: np.ndarray) -> Tensor:
        values = validate_batch(self.space, values)
        return Tensor(one_hot_batch(self.space, values).astype(self._dtype()))

    def forward_values(self, values: np.ndarray) -> Tensor:
        return self._trunk(self._flat_values(values))

    def forward_soft(self, scaled_values: Tensor, cat_probs: list[Tensor]) -> Tensor:
        return self._trunk(_soft_one_hot(self.space, scaled_values, cat_probs))


class MlpOneHot(_OneHotEncoder):
    """Plain MLP on the flat encoding; each hidden affine is followed by
    batch normalization and a ReLU."""

    def __init__(self, space: PresetSpace, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.cfg = cfg
        dims = [space.one_hot_dim] + [cfg.d_hidden] * cfg.n_layers
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims, dims[1:])]
        self.norms = [BatchNorm(cfg.d_hidden) for _ in self.hidden]
        self.head = Linear(cfg.d_hidden, cfg.output_dim, rng)

    def _trunk(self, x: Tensor) -> Tensor:
        for lin, bn in zip(self.hidden, self.norms):
            x = bn(lin(x)).relu()
        return self.head(x)


class HighwayOneHot(_OneHotEncoder):
    """Input affine plus a highway stack on the flat encoding."""

    def __init__(self, space: PresetSpace, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.cfg = cfg
        self.input = Linear(space.one_hot_dim, cfg.d_hidden, rng)
        self.norm = BatchNorm(cfg.d_hidden)
        self.blocks = [Highway(cfg.d_hidden, rng) for _ in range(cfg.n_layers - 1)]
        self.head = Linear(cfg.d_hidden, cfg.output_dim, rng)

    def _trunk(self, x: Tensor) -> Tensor:
        x = self.norm(self.input(x)).relu()
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class _TokenEncoder(_EncoderBase):
    def forward_values(self, values: np.ndarray) -> Tensor:
        return self._trunk(self.tokenizer(values))

    def forward_soft(self, scaled_values: Tensor, cat_probs: list[Tensor]) -> Tensor:
        return self._trunk(self.tokenizer.forward_soft(scaled_values, cat_probs))


class HighwayTokens(_TokenEncoder):
    """Flattened token matrix into an input affine plus a highway stack."""

    def __init__(self, space: PresetSpace, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.cfg = cfg
        self.tokenizer = PresetTokenizer(space, cfg.d_token, rng)
        self.input = Linear(space.size * cfg.d_token, cfg.d_hidden, rng)
        self.norm = BatchNorm(cfg.d_hidden)
        self.blocks = [Highway(cfg.d_hidden, rng) for _ in range(cfg.n_layers - 1)]
        self.head = Linear(cfg.d_hidden, cfg.output_dim, rng)

    def _trunk(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        x = self.norm(self.input(tokens.reshape(b, n * d))).relu()
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class HighwayGruTokens(_TokenEncoder):
    """Positional encoding, one bidirectional GRU whose concatenated final
    states feed a highway stack; sequence length drops out of the input
    dimension."""

    def __init__(self, space: PresetSpace, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.cfg = cfg
        self.tokenizer = PresetTokenizer(space, cfg.d_token, rng)
        self.pe = SinusoidalPE(cfg.d_token, max_len=space.size + 8)
        self.gru = BiGRU(cfg.d_token, cfg.d_hidden // 2, rng)
        self.norm = BatchNorm(cfg.d_hidden)
        self.blocks = [Highway(cfg.d_hidden, rng) for _ in range(cfg.n_layers - 1)]
        self.head = Linear(cfg.d_hidden, cfg.output_dim, rng)

    def _trunk(self, tokens: Tensor) -> Tensor:
        x = self.norm(self.gru(self.pe(tokens)))
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class TransformerTokens(_TokenEncoder):
    """Learnable first token, positional encoding, post-norm attention
    blocks; the first position is normalized, rectified, and projected."""

    def __init__(self, space: PresetSpace, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.space = space
        self.cfg = cfg
        self.tokenizer = PresetTokenizer(space, cfg.d_token, rng)
        self.cls = Tensor(normal_embedding(rng, (1, 1, cfg.d_token)), requires_grad=True)
        self.pe = SinusoidalPE(cfg.d_token, max_len=space.size + 8)
        self.blocks = [
            TransformerBlock(cfg.d_token, TFM_FF_MULT * cfg.d_token, cfg.n_heads, rng)
            for _ in range(cfg.n_layers)
        ]
        self.final_norm = LayerNorm(cfg.d_token)
        self.head = Linear(cfg.d_token, cfg.output_dim, rng)

    def _trunk(self, tokens: Tensor) -> Tensor:
        b, _, d = tokens.shape
        lead = self.cls * Tensor(np.ones((b, 1, 1), dtype=self.cls.data.dtype))
        x = self.pe(Tensor.cat([lead, tokens], axis=1))
        for block in self.blocks:
            x = block(x)
        first = x.narrow(1, 0, 1).reshape(b, d)
        return self.head(self.final_norm(first).relu())


_ARCH_CLASSES = {
    "mlp_oh": MlpOneHot,
    "hn_oh": HighwayOneHot,
    "hn_pt": HighwayTokens,
    "hn_ptgru": HighwayGruTokens,
    "tfm": TransformerTokens,
}


def build_encoder(cfg: EncoderConfig, space: PresetSpace, seed: int) -> _EncoderBase:
    rng = np.random.default_rng(seed)
    return _ARCH_CLASSES[cfg.architecture](space, cfg, rng)


def tokenizer_parameter_count(space: PresetSpace, d_token: int) -> int:
    n_scaled = space.size - len(space.categorical_indices)
    cats = sum(space.params[i].cardinality for i in space.categorical_indices)
    return (n_scaled + cats) * d_token


def parameter_count(cfg: EncoderConfig, space: PresetSpace) -> int:
    """Exact trainable scalar count from closed-form per-architecture sums.

    Batch normalization contributes nothing (statistics only); layer
    normalization contributes a gain and bias pair.
    """
    h, m, L = cfg.d_hidden, cfg.output_dim, cfg.n_layers
    d_in = space.one_hot_dim
    head = h * m + m
    affine = lambda a, b: a * b + b
    highway = lambda width: 2 * affine(width, width)
    if cfg.architecture == "mlp_oh":
        return affine(d_in, h) + (L - 1) * affine(h, h) + head
    if cfg.architecture == "hn_oh":
        return affine(d_in, h) + (L - 1) * highway(h) + head
    tok = tokenizer_parameter_count(space, cfg.d_token)
    if cfg.architecture == "hn_pt":
        return tok + affine(space.size * cfg.d_token, h) + (L - 1) * highway(h) + head
    if cfg.architecture == "hn_ptgru":
        half = h // 2
        gru = 2 * (cfg.d_token * 3 * half + half * 3 * half + 2 * 3 * half)
        return tok + gru + (L - 1) * highway(h) + head
    d = cfg.d_token
    block = affine(d, 3 * d) + affine(d, d) + affine(d, TFM_FF_MULT * d) + affine(TFM_FF_MULT * d, d) + 4 * d
    return tok + d + L * block + 2 * d + d * m + m


def encode_values(model: _EncoderBase, values: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode embeddings for a value matrix, batched to bound memory."""
    model.eval()
    rows = []
    for start in range(0, len(values), batch_size):
        rows.append(model.forward_values(values[start : start + batch_size]).data)
    return np.concatenate(rows, axis=0)
