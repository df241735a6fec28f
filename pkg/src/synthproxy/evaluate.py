"""Retrieval and perceptual-ordering metrics for preset encoders.

Three families of checks live here.  Retrieval metrics (``mrr``, ``avg_l1``)
measure how well a preset encoder reproduces the stored audio embeddings of a
dataset.  The ranking score measures whether embedding distances order sounds
the same way a monotone sweep of one synth parameter does.  The sliced
Wasserstein distance compares two embedding clouds.

Encoders enter through plain predict callables mapping a batch of preset
value rows to embedding rows, so this module never imports the network code.
A callable may carry a ``config_hash`` attribute; when present it must match
the dataset's feature-config hash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import DEFAULT_RMS_BOUNDS, EmbeddingDataset
from .features import FeatureConfig, embed
from .presets import NUMERICAL, Preset, sample_values, validate_batch
from .synths import RenderConfig, render, rms, space_for

PredictFn = Callable[[np.ndarray], np.ndarray]

DESK_POOL_SIZE = 1024
DESK_RUNS = 20
FULL_POOL_SIZE = 4096
FULL_RUNS = 100

DEFAULT_PROJECTIONS = 128
DEFAULT_GROUP_SEED = 1009
GROUP_BASE_COUNT = 10
GROUP_STEP_COUNT = 20

# Query rows processed per distance-matrix block; bounds peak memory at
# roughly block * K * dim float64.
_QUERY_BLOCK = 64

_MAX_BASE_REDRAWS = 200


class GroupConstructionError(RuntimeError):
    """No gate-passing base preset could be drawn for a ranking group."""


@dataclass(frozen=True)
class MetricResult:
    """Aggregate of a repeated evaluation: mean and population std over runs."""

    mean: float
    std: float
    per_run: tuple[float, ...]

    @classmethod
    def from_runs(cls, values: Sequence[float]) -> "MetricResult":
        arr = np.asarray(values, dtype=np.float64)
        return cls(float(arr.mean()), float(arr.std()), tuple(float(v) for v in arr))


@dataclass(frozen=True)
class MrrConfig:
    """Retrieval setup: per run, ``k`` presets are drawn without replacement
    and the first ``q`` of them serve as query targets."""

    q: int
    k: int
    runs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.q <= self.k:
            raise ValueError(f"need 1 <= q <= k, got q={self.q}, k={self.k}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def desk(cls, seed: int = 0) -> "MrrConfig":
        return cls(q=DESK_POOL_SIZE, k=DESK_POOL_SIZE, runs=DESK_RUNS, seed=seed)

    @classmethod
    def full_scale(cls, seed: int = 0) -> "MrrConfig":
        return cls(q=FULL_POOL_SIZE, k=FULL_POOL_SIZE, runs=FULL_RUNS, seed=seed)


def _check_predict_hash(predict: PredictFn, dataset: EmbeddingDataset) -> None:
    got = getattr(predict, "config_hash", None)
    if got is not None and got != dataset.config_hash:
        raise ValueError(
            f"predictor was trained against feature config {got}, dataset holds {dataset.config_hash}"
        )


def _predict_rows(predict: PredictFn, values: np.ndarray, dim: int) -> np.ndarray:
    out = np.asarray(predict(values), dtype=np.float64)
    if out.shape != (values.shape[0], dim):
        raise ValueError(f"predictor returned shape {out.shape}, expected {(values.shape[0], dim)}")
    return out


def mrr(predict: PredictFn, dataset: EmbeddingDataset, cfg: MrrConfig) -> MetricResult:
    """Mean reciprocal rank of the correct preset under L1 embedding retrieval.

    Per run, ``cfg.k`` dataset rows form the candidate pool and the first
    ``cfg.q`` of them are queried: candidates are ranked by ascending L1
    distance between their predicted embeddings and the query's stored
    embedding.  Ties resolve by pool position (stable sort order).
    """
    _check_predict_hash(predict, dataset)
    n = dataset.values.shape[0]
    if cfg.k > n:
        raise ValueError(f"candidate pool k={cfg.k} exceeds dataset size {n}")
    dim = dataset.embeddings.shape[1]
    positions = np.arange(cfg.k)
    per_run = []
    for run in range(cfg.runs):
        rng = np.random.default_rng([cfg.seed, run])
        pool = rng.choice(n, size=cfg.k, replace=False)
        preds = _predict_rows(predict, dataset.values[pool], dim)
        stored = dataset.embeddings[pool].astype(np.float64)
        recip_sum = 0.0
        for t0 in range(0, cfg.q, _QUERY_BLOCK):
            t1 = min(t0 + _QUERY_BLOCK, cfg.q)
            d = np.abs(preds[None, :, :] - stored[t0:t1, None, :]).sum(axis=2)
            own = np.arange(t0, t1)
            d_own = d[np.arange(t1 - t0), own]
            smaller = (d < d_own[:, None]).sum(axis=1)
            tied_before = ((d == d_own[:, None]) & (positions[None, :] < own[:, None])).sum(axis=1)
            ranks = 1 + smaller + tied_before
            recip_sum += float((1.0 / ranks).sum())
        per_run.append(recip_sum / cfg.q)
    return MetricResult.from_runs(per_run)


def avg_l1(
    predict: PredictFn,
    dataset: EmbeddingDataset,
    sample_size: int,
    runs: int = 1,
    seed: int = 0,
) -> MetricResult:
    """Per-dimension mean absolute error between predicted and stored embeddings."""
    _check_predict_hash(predict, dataset)
    n = dataset.values.shape[0]
    if not 1 <= sample_size <= n:
        raise ValueError(f"sample_size must be in [1, {n}], got {sample_size}")
    if runs < 1:
        raise ValueError("runs must be at least 1")
    dim = dataset.embeddings.shape[1]
    per_run = []
    for run in range(runs):
        rng = np.random.default_rng([seed, run])
        idx = rng.choice(n, size=sample_size, replace=False)
        preds = _predict_rows(predict, dataset.values[idx], dim)
        stored = dataset.embeddings[idx].astype(np.float64)
        per_run.append(float(np.abs(preds - stored).mean()))
    return MetricResult.from_runs(per_run)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values receiving the mean of their positions."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    new_group = np.concatenate(([True], xs[1:] != xs[:-1]))
    group = np.cumsum(new_group) - 1
    pos = np.arange(1, x.size + 1, dtype=np.float64)
    avg = np.bincount(group, weights=pos) / np.bincount(group)
    out = np.empty(x.size, dtype=np.float64)
    out[order] = avg[group]
    return out


def spearman(ranking: Sequence[float], reference: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either input has zero rank variance.
    """
    a = np.asarray(ranking, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"expected equal-length vectors, got shapes {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two entries to correlate")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    if denom == 0.0:
        return float("nan")
    return float((ra * rb).sum() / denom)


def _wasserstein_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact 1-D W1 between empirical distributions of possibly unequal size."""
    xs = np.sort(x)
    ys = np.sort(y)
    nx, ny = xs.size, ys.size
    if nx == ny:
        return float(np.abs(xs - ys).mean())
    grid = np.union1d(np.arange(1, nx + 1) / nx, np.arange(1, ny + 1) / ny)
    widths = np.diff(grid, prepend=0.0)
    # Quantile functions are right-continuous step functions; the small slack
    # keeps k/n grid points from rounding up to the next index.
    xi = np.ceil(grid * nx - 1e-9).astype(np.int64) - 1
    yi = np.ceil(grid * ny - 1e-9).astype(np.int64) - 1
    return float(np.sum(widths * np.abs(xs[xi] - ys[yi])))


def cluster_wasserstein(
    a: np.ndarray,
    b: np.ndarray,
    projections: int = DEFAULT_PROJECTIONS,
    seed: int = 0,
) -> float:
    """Sliced W1 distance between two embedding sets (rows are samples)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("embedding sets must be 2-D arrays")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("embedding sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if projections < 1:
        raise ValueError("projections must be at least 1")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((projections, a.shape[1]))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    directions /= norms
    total = 0.0
    for u in directions:
        total += _wasserstein_1d(a @ u, b @ u)
    return total / projections


@dataclass(frozen=True)
class RankingGroup:
    """A swept numerical parameter plus the base presets it is swept within.

    ``base_values`` holds one full preset row per base; ``steps`` holds the
    strictly increasing sweep values of the attribute parameter, one row per
    base preset.  For bipolar parameters every step row must sit strictly on
    one side of the 0.5 midpoint.
    """

    name: str
    synth_id: str
    param_index: int
    base_values: np.ndarray
    steps: np.ndarray

    def __post_init__(self) -> None:
        space = space_for(self.synth_id)
        base = validate_batch(space, np.array(self.base_values, dtype=np.float64, copy=True))
        steps = np.array(self.steps, dtype=np.float64, copy=True)
        if not 0 <= self.param_index < space.size:
            raise ValueError(f"parameter index {self.param_index} outside space of {space.size}")
        spec = space.params[self.param_index]
        if spec.kind != NUMERICAL:
            raise ValueError(f"ranking groups sweep numerical parameters, {spec.name!r} is {spec.kind}")
        if steps.ndim != 2 or steps.shape[0] != base.shape[0]:
            raise ValueError("steps must hold one row per base preset")
        if steps.shape[1] < 3:
            raise ValueError("need at least three sweep steps")
        if np.any(steps < 0.0) or np.any(steps > 1.0):
            raise ValueError("sweep values must lie in [0, 1]")
        if not np.all(np.diff(steps, axis=1) > 0.0):
            raise ValueError("sweep values must be strictly increasing")
        if spec.bipolar:
            above = np.all(steps > 0.5, axis=1)
            below = np.all(steps < 0.5, axis=1)
            if not np.all(above | below):
                raise ValueError("bipolar sweeps must stay strictly on one side of 0.5")
        base.flags.writeable = False
        steps.flags.writeable = False
        object.__setattr__(self, "base_values", base)
        object.__setattr__(self, "steps", steps)

    @property
    def n_bases(self) -> int:
        return self.base_values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.steps.shape[1]

    def sweep(self, base_index: int) -> np.ndarray:
        """Full preset rows for one base, attribute set to each step value."""
        rows = np.tile(self.base_values[base_index], (self.n_steps, 1))
        rows[:, self.param_index] = self.steps[base_index]
        return rows


@dataclass(frozen=True)
class GroupScore:
    """Per-base ranking scores for one group; NaN marks a degenerate base."""

    name: str
    scores: tuple[float, ...]

    def _defined(self) -> np.ndarray:
        arr = np.asarray(self.scores, dtype=np.float64)
        return arr[~np.isnan(arr)]

    @property
    def n_undefined(self) -> int:
        return int(np.isnan(np.asarray(self.scores)).sum())

    @property
    def mean(self) -> float:
        d = self._defined()
        return float(d.mean()) if d.size else float("nan")

    @property
    def std(self) -> float:
        d = self._defined()
        return float(d.std()) if d.size else float("nan")


def ranking_from_embeddings(embeddings: np.ndarray) -> float:
    """Ordering score of one rendered sweep given its embedding rows.

    Rows must follow the ascending sweep order.  Sounds are ranked by L1
    distance from the first row (ascending reference) and from the last row
    (descending reference); the score is the mean of the two Spearman
    coefficients.  Returns NaN when either anchor sees identical distances
    everywhere, which makes the ordering undefined.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 3:
        raise ValueError("need a 2-D array with at least three embedding rows")
    n = e.shape[0]
    d = np.abs(e[:, None, :] - e[None, :, :]).sum(axis=2)
    from_min = d[0]
    from_max = d[-1]
    if np.ptp(from_min) == 0.0 or np.ptp(from_max) == 0.0:
        return float("nan")
    ascending = np.arange(n, dtype=np.float64)
    r_min = spearman(np.argsort(from_min, kind="stable"), ascending)
    r_max = spearman(np.argsort(from_max, kind="stable"), ascending[::-1])
    return 0.5 * (r_min + r_max)


def sweep_embeddings(
    group: RankingGroup,
    base_index: int,
    feature_cfg: FeatureConfig,
    render_cfg: RenderConfig | None = None,
) -> np.ndarray:
    """Render one base preset's sweep and embed every step."""
    cfg = render_cfg if render_cfg is not None else RenderConfig()
    space = space_for(group.synth_id)
    rows = group.sweep(base_index)
    out = [embed(render(space, Preset(space.synth_id, row), cfg), feature_cfg).values for row in rows]
    return np.stack(out)


def ranking_score(
    feature_cfg: FeatureConfig,
    groups: Sequence[RankingGroup],
    render_cfg: RenderConfig | None = None,
) -> tuple[GroupScore, ...]:
    """Ordering scores of a feature family over a list of parameter sweeps."""
    results = []
    for group in groups:
        scores = [
            ranking_from_embeddings(sweep_embeddings(group, b, feature_cfg, render_cfg))
            for b in range(group.n_bases)
        ]
        results.append(GroupScore(group.name, tuple(scores)))
    return tuple(results)


def _linspace_steps(lo: float, hi: float, n_steps: int) -> np.ndarray:
    return np.linspace(lo, hi, n_steps, dtype=np.float64)


# Pinned helper values per built-in group.  Pins keep the swept attribute
# audible (routing, envelope gates, level of the carrying operator) and freeze
# interactions that would map unequal attribute values to identical audio;
# everything unpinned stays sampled so the 10 base presets differ.
_SUBTOY_GROUPS: tuple[tuple[str, float, float, dict[str, float]], ...] = (
    ("amp_attack", 0.05, 0.80, {"amp_sustain": 1.0, "amp_decay": 0.5, "lfo_dest": 1, "cutoff": 0.8, "filt_env_amount": 0.5, "osc1_wave": 3}),
    ("amp_decay", 0.35, 0.80, {"amp_sustain": 0.0, "amp_attack": 0.0, "amp_release": 0.4, "lfo_dest": 1}),
    ("amp_release", 0.30, 0.82, {"amp_sustain": 1.0, "amp_attack": 0.05, "lfo_dest": 1}),
    ("cutoff", 0.15, 0.95, {"osc1_wave": 3, "amp_sustain": 1.0, "amp_attack": 0.05, "filt_env_amount": 0.5, "lfo_dest": 1}),
    ("resonance", 0.05, 0.95, {"osc1_wave": 3, "cutoff": 0.5, "amp_sustain": 1.0, "amp_attack": 0.05, "filt_env_amount": 0.5, "lfo_dest": 1}),
    ("lfo_rate", 0.05, 0.95, {"lfo_dest": 3, "lfo_depth": 0.8, "lfo_retrigger": 1, "cutoff": 0.6, "filt_env_amount": 0.5, "amp_sustain": 1.0, "amp_attack": 0.05}),
    ("lfo_depth", 0.05, 0.95, {"lfo_dest": 3, "lfo_rate": 0.6, "lfo_retrigger": 1, "cutoff": 0.6, "filt_env_amount": 0.5, "amp_sustain": 1.0, "amp_attack": 0.05}),
    ("osc2_coarse", 0.0, 0.0, {"osc2_on": 1, "osc_mix": 0.5, "osc2_fine": 0.5, "cutoff": 0.85, "filt_env_amount": 0.5, "lfo_dest": 1, "amp_sustain": 1.0, "amp_attack": 0.05}),
)

_FMTOY_GROUPS: tuple[tuple[str, float, float, dict[str, float]], ...] = (
    ("op1_ratio", 0.10, 0.90, {"algorithm": 8, "op1_level": 0.9, "op1_sustain": 1.0, "op1_attack": 0.05}),
    ("op2_level", 0.0, 0.95, {"algorithm": 1, "op1_level": 0.9, "op1_sustain": 1.0, "op1_attack": 0.05, "op2_ratio": 0.55, "op2_sustain": 1.0, "op2_attack": 0.05}),
    ("op1_attack", 0.05, 0.80, {"algorithm": 8, "op1_level": 0.9, "op1_sustain": 1.0}),
    ("feedback", 0.0, 0.95, {"algorithm": 8, "op4_level": 0.9, "op4_sustain": 1.0, "op4_attack": 0.05}),
)

# Sweep sides for the bipolar osc2_coarse group: alternating bases take the
# upper and lower half so both detune directions are covered.
_COARSE_UPPER = (0.525, 0.975)
_COARSE_LOWER = (0.025, 0.475)


def _build_group(
    space,
    name: str,
    lo: float,
    hi: float,
    pins: dict[str, float],
    rng: np.random.Generator,
    n_bases: int,
    n_steps: int,
    render_cfg: RenderConfig,
    rms_bounds: tuple[float, float],
) -> RankingGroup:
    index_of = {p.name: i for i, p in enumerate(space.params)}
    param_index = index_of[name]
    bipolar = space.params[param_index].bipolar
    lo_rms, hi_rms = rms_bounds
    bases = np.empty((n_bases, space.size), dtype=np.float64)
    steps = np.empty((n_bases, n_steps), dtype=np.float64)
    for b in range(n_bases):
        if bipolar:
            side = _COARSE_UPPER if b % 2 == 0 else _COARSE_LOWER
            row_steps = _linspace_steps(side[0], side[1], n_steps)
        else:
            row_steps = _linspace_steps(lo, hi, n_steps)
        for attempt in range(_MAX_BASE_REDRAWS):
            row = sample_values(space, rng)
            for pin_name, pin_value in pins.items():
                row[index_of[pin_name]] = pin_value
            ok = True
            for v in row_steps:
                row[param_index] = v
                level = rms(render(space, Preset(space.synth_id, row), render_cfg))
                if not lo_rms <= level <= hi_rms:
                    ok = False
                    break
            if ok:
                bases[b] = row
                steps[b] = row_steps
                break
        else:
            raise GroupConstructionError(
                f"no gate-passing base preset for group {name!r} after {_MAX_BASE_REDRAWS} draws"
            )
    return RankingGroup(name, space.synth_id, param_index, bases, steps)


def builtin_ranking_groups(
    synth_id: str,
    seed: int = DEFAULT_GROUP_SEED,
    n_bases: int = GROUP_BASE_COUNT,
    n_steps: int = GROUP_STEP_COUNT,
    render_cfg: RenderConfig | None = None,
    rms_bounds: tuple[float, float] = DEFAULT_RMS_BOUNDS,
    names: Sequence[str] | None = None,
) -> tuple[RankingGroup, ...]:
    """Construct the shipped sweep groups with seeded, gate-passing bases.

    Each group draws its own substream keyed by its position in the full
    list, so restricting ``names`` never changes the presets of the groups
    that are kept.
    """
    table = {"subtoy": _SUBTOY_GROUPS, "fmtoy": _FMTOY_GROUPS}.get(synth_id)
    if table is None:
        raise ValueError(f"unknown synth {synth_id!r}")
    space = space_for(synth_id)
    cfg = render_cfg if render_cfg is not None else RenderConfig()
    wanted = set(names) if names is not None else None
    if wanted is not None:
        known = {entry[0] for entry in table}
        missing = wanted - known
        if missing:
            raise ValueError(f"unknown group names for {synth_id}: {sorted(missing)}")
    groups = []
    for gi, (name, lo, hi, pins) in enumerate(table):
        if wanted is not None and name not in wanted:
            continue
        rng = np.random.default_rng([seed, gi])
        groups.append(_build_group(space, name, lo, hi, pins, rng, n_bases, n_steps, cfg, rms_bounds))
    return tuple(groups)
