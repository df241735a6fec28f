"""Synthesizer parameter spaces and presets.

A parameter space is an ordered list of typed parameters: numerical values in
[0, 1], binary flags in {0, 1}, and categorical choices in {1, ..., C} (1-based
so an unset categorical slot can never be confused with a valid choice).  A
preset is one value per parameter in space order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

NUMERICAL = "numerical"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (NUMERICAL, BINARY, CATEGORICAL)


class PresetLengthError(ValueError):
    """Preset value count does not match the parameter space."""


class SpaceFormatError(ValueError):
    """Malformed parameter-space JSON."""


@dataclass(frozen=True)
class ParamSpec:
    """One parameter: a name, a kind, and (for categoricals) a cardinality.

    ``bipolar`` marks numerical parameters whose 0.5 midpoint maps to a
    physically neutral setting (e.g. zero detune); it only affects how sweep
    tooling treats the parameter, not validation.
    """

    name: str
    kind: str
    cardinality: int | None = None
    bipolar: bool = False

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.cardinality is None or self.cardinality < 2:
                raise ValueError(f"categorical {self.name!r} needs cardinality >= 2")
        elif self.cardinality is not None:
            raise ValueError(f"{self.kind} parameter {self.name!r} cannot have a cardinality")
        if self.bipolar and self.kind != NUMERICAL:
            raise ValueError(f"bipolar only applies to numerical parameters ({self.name!r})")


@dataclass(frozen=True)
class PresetSpace:
    """Ordered, immutable collection of parameters for one synthesizer."""

    synth_id: str
    params: tuple[ParamSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise ValueError("parameter space cannot be empty")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def size(self) -> int:
        return len(self.params)

    @cached_property
    def numerical_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.params) if p.kind == NUMERICAL)

    @cached_property
    def binary_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.params) if p.kind == BINARY)

    @cached_property
    def categorical_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.params) if p.kind == CATEGORICAL)

    @property
    def one_hot_dim(self) -> int:
        # one slot per numerical/binary parameter, one block per categorical
        dim = len(self.numerical_indices) + len(self.binary_indices)
        for i in self.categorical_indices:
            dim += self.params[i].cardinality  # type: ignore[operator]
        return dim

    def index_of(self, name: str) -> int:
        for i, p in enumerate(self.params):
            if p.name == name:
                return i
        raise KeyError(name)

    def to_json(self) -> str:
        """Canonical JSON (sorted keys, no whitespace); stable across runs."""
        obj = {
            "synth_id": self.synth_id,
            "params": [
                {
                    "name": p.name,
                    "kind": p.kind,
                    "cardinality": p.cardinality,
                    "bipolar": p.bipolar,
                }
                for p in self.params
            ],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "PresetSpace":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpaceFormatError(f"invalid space JSON: {exc}") from exc
        try:
            params = tuple(
                ParamSpec(
                    name=p["name"],
                    kind=p["kind"],
                    cardinality=p.get("cardinality"),
                    bipolar=bool(p.get("bipolar", False)),
                )
                for p in obj["params"]
            )
            return cls(synth_id=obj["synth_id"], params=params)
        except (KeyError, TypeError, ValueError) as exc:
            raise SpaceFormatError(f"invalid space JSON: {exc}") from exc


@dataclass(frozen=True)
class Preset:
    """One value per parameter of a space, in space order.

    Values are stored as an immutable float64 vector; categorical values hold
    exact small integers.
    """

    space_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 1:
            raise ValueError("preset values must be a flat vector")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def replace(self, index: int, value: float) -> "Preset":
        v = self.values.copy()
        v[index] = value
        return Preset(self.space_id, v)


def validate(space: PresetSpace, preset: Preset) -> list[tuple[int, str]]:
    """Return a list of (index, reason) violations; empty means valid.

    A length mismatch is a structural error and raises instead of being
    reported per index.
    """
    if preset.space_id != space.synth_id:
        return [(-1, f"preset targets space {preset.space_id!r}, not {space.synth_id!r}")]
    if preset.values.shape[0] != space.size:
        raise PresetLengthError(
            f"preset has {preset.values.shape[0]} values, space {space.synth_id!r} has {space.size}"
        )
    bad: list[tuple[int, str]] = []
    for i, (p, v) in enumerate(zip(space.params, preset.values)):
        if not np.isfinite(v):
            bad.append((i, f"{p.name}: non-finite value {v!r}"))
        elif p.kind == NUMERICAL:
            if not 0.0 <= v <= 1.0:
                bad.append((i, f"{p.name}: {v!r} outside [0, 1]"))
        elif p.kind == BINARY:
            if v not in (0.0, 1.0):
                bad.append((i, f"{p.name}: {v!r} not in {{0, 1}}"))
        else:
            if v != int(v) or not 1 <= v <= p.cardinality:  # type: ignore[operator]
                bad.append((i, f"{p.name}: {v!r} not an integer in [1, {p.cardinality}]"))
    return bad


def is_valid(space: PresetSpace, preset: Preset) -> bool:
    return not validate(space, preset)


def validate_batch(space: PresetSpace, values: np.ndarray) -> np.ndarray:
    """Vectorized validity check over a (batch, size) value matrix.

    Returns the matrix as float64; raises on the first violated kind with a
    batch-level message rather than per-row detail.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != space.size:
        raise ValueError(f"expected (batch, {space.size}) values, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite preset values")
    num = list(space.numerical_indices)
    if num and (values[:, num].min() < 0.0 or values[:, num].max() > 1.0):
        raise ValueError("numerical parameter outside [0, 1]")
    for i in space.binary_indices:
        col = values[:, i]
        if not np.all((col == 0.0) | (col == 1.0)):
            raise ValueError(f"binary parameter {i} not in {{0, 1}}")
    for i in space.categorical_indices:
        col = values[:, i]
        card = space.params[i].cardinality
        if not np.all((col == np.round(col)) & (col >= 1.0) & (col <= card)):
            raise ValueError(f"categorical parameter {i} outside 1..{card}")
    return values


def sample_values(space: PresetSpace, rng: np.random.Generator) -> np.ndarray:
    """Draw one uniform value per parameter, in space order."""
    out = np.empty(space.size, dtype=np.float64)
    for i, p in enumerate(space.params):
        if p.kind == NUMERICAL:
            out[i] = rng.uniform()
        elif p.kind == BINARY:
            out[i] = float(rng.integers(0, 2))
        else:
            out[i] = float(rng.integers(1, p.cardinality + 1))  # type: ignore[operator]
    return out


def sample_preset(space: PresetSpace, seed: int) -> Preset:
    """Uniform preset, deterministic for a given 64-bit seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return Preset(space.synth_id, sample_values(space, rng))


def one_hot(space: PresetSpace, preset: Preset) -> np.ndarray:
    """Flat encoding: numerical and binary values copied through, categorical
    values expanded to one-hot blocks, laid out in parameter order."""
    bad = validate(space, preset)
    if bad:
        raise ValueError(f"invalid preset: {bad[:3]}")
    out = np.zeros(space.one_hot_dim, dtype=np.float64)
    pos = 0
    for p, v in zip(space.params, preset.values):
        if p.kind == CATEGORICAL:
            out[pos + int(v) - 1] = 1.0
            pos += p.cardinality  # type: ignore[operator]
        else:
            out[pos] = v
            pos += 1
    return out


def one_hot_batch(space: PresetSpace, values: np.ndarray) -> np.ndarray:
    """Vectorized ``one_hot`` over a (batch, size) value matrix.

    Assumes rows already validate; used on datasets whose records were
    validated at load time.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    out = np.zeros((n, space.one_hot_dim), dtype=np.float64)
    pos = 0
    rows = np.arange(n)
    for i, p in enumerate(space.params):
        if p.kind == CATEGORICAL:
            out[rows, pos + values[:, i].astype(np.int64) - 1] = 1.0
            pos += p.cardinality  # type: ignore[operator]
        else:
            out[:, pos] = values[:, i]
            pos += 1
    return out
