"""Synthetic preset datasets with precomputed audio-feature embeddings.

Records pair a preset (float32 values) with the embedding of its rendered
audio.  Generation samples presets uniformly, renders them, and keeps only
those whose RMS falls inside a loudness gate.  Preset values are rounded to
float32 *before* rendering so a record read back from disk re-renders and
re-embeds to exactly the stored bytes.

On-disk layout ("SPDS1"): magic, u32 header length, canonical JSON header
carrying a SHA-256 of the record region, u32 CRC-32 of the header bytes,
then packed little-endian float32 records.  Every slot draws from its own
generator seeded with ``seed XOR index``, so the output is byte-identical
no matter how generation is parallelized.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from synthproxy.features import FeatureConfig, embed, embedding_dim
from synthproxy.presets import Preset, PresetSpace, sample_values, validate_batch
from synthproxy.synths import RenderConfig, render, rms
from synthproxy._kernels import warm_up

MAGIC = b"SPDS1"
DEFAULT_RMS_BOUNDS = (1e-3, 1.0)
REJECTION_WINDOW = 10_000
# a window is degenerate when more than this fraction of its draws fail the gate
MAX_REJECTION_RATE = 0.99


class DatasetFormatError(ValueError):
    """File is not a parseable dataset."""


class DatasetChecksumError(DatasetFormatError):
    """File parsed but its contents fail integrity checks."""


class GenerationError(RuntimeError):
    """The sampling gate rejected essentially everything."""


@dataclass
class EmbeddingDataset:
    header: dict
    values: np.ndarray       # (count, preset_width) float32
    embeddings: np.ndarray   # (count, embedding_width) float32

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.values.ndim != 2 or self.embeddings.ndim != 2:
            raise ValueError("records must be 2-D")
        if len(self.values) != len(self.embeddings):
            raise ValueError("preset/embedding row counts differ")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def space(self) -> PresetSpace:
        return PresetSpace.from_json(json.dumps(self.header["synth"]))

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig.from_json_dict(self.header["feature"])

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig.from_json_dict(self.header["render"])

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]

    def check(self) -> None:
        """Raise if any stored preset is invalid or any embedding non-finite."""
        validate_batch(self.space, self.values)
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite embedding present")


def _record_region(ds: EmbeddingDataset) -> bytes:
    packed = np.concatenate([ds.values, ds.embeddings], axis=1).astype("<f4")
    return np.ascontiguousarray(packed).tobytes()


def write_dataset(ds: EmbeddingDataset, path: str | Path) -> None:
    region = _record_region(ds)
    header = dict(ds.header)
    header["format"] = "SPDS1"
    header["count"] = len(ds)
    header["preset_width"] = int(ds.values.shape[1])
    header["embedding_width"] = int(ds.embeddings.shape[1])
    header["records_sha256"] = hashlib.sha256(region).hexdigest()
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", zlib.crc32(raw)))
        fh.write(region)


def read_dataset(path: str | Path) -> EmbeddingDataset:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        (header_len,) = struct.unpack_from("<I", blob, off)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated before header") from exc
    off += 4
    raw = blob[off : off + header_len]
    if len(raw) != header_len:
        raise DatasetFormatError(f"{path}: truncated header")
    off += header_len
    try:
        (crc,) = struct.unpack_from("<I", blob, off)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated checksum") from exc
    off += 4
    if zlib.crc32(raw) != crc:
        raise DatasetChecksumError(f"{path}: header CRC mismatch")
    header = json.loads(raw.decode("utf-8"))

    region = blob[off:]
    if hashlib.sha256(region).hexdigest() != header.get("records_sha256"):
        raise DatasetChecksumError(f"{path}: record region digest mismatch")
    count = header["count"]
    width = header["preset_width"] + header["embedding_width"]
    expected = count * width * 4
    if len(region) != expected:
        raise DatasetFormatError(f"{path}: record region is {len(region)} bytes, expected {expected}")
    table = np.frombuffer(region, dtype="<f4").reshape(count, width).copy()
    ds = EmbeddingDataset(
        header=header,
        values=table[:, : header["preset_width"]],
        embeddings=table[:, header["preset_width"] :],
    )
    ds.check()
    return ds


def _make_record(
    space: PresetSpace,
    index: int,
    seed: int,
    render_cfg: RenderConfig,
    feature_cfg: FeatureConfig,
    lo: float,
    hi: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    rng = np.random.Generator(np.random.PCG64(seed ^ index))
    attempts = 0
    while True:
        drawn = sample_values(space, rng).astype(np.float32)
        preset = Preset(space.synth_id, drawn.astype(np.float64))
        buf = render(space, preset, render_cfg)
        attempts += 1
        level = rms(buf)
        if lo <= level <= hi:
            return drawn, embed(buf, feature_cfg).values, attempts
        if attempts >= REJECTION_WINDOW:
            raise GenerationError(
                f"slot {index}: {attempts} consecutive draws rejected by "
                f"rms gate [{lo}, {hi}]; bounds look degenerate"
            )


def _generate_shard(args) -> tuple[np.ndarray, np.ndarray, list[int]]:
    space, start, stop, seed, render_cfg, feature_cfg, lo, hi = args
    vals, embs, attempts = [], [], []
    for i in range(start, stop):
        v, e, a = _make_record(space, i, seed, render_cfg, feature_cfg, lo, hi)
        vals.append(v)
        embs.append(e)
        attempts.append(a)
    return np.stack(vals), np.stack(embs), attempts


class _WindowGuard:
    """Aborts when any fixed-size window of the draw stream is almost all
    rejections.  Slots feed their draw counts in index order, which keeps the
    decision independent of how work was scheduled."""

    def __init__(self, window: int = REJECTION_WINDOW):
        self.window = window
        self.attempts = 0
        self.accepts = 0

    def _close(self) -> None:
        if 1.0 - self.accepts / self.window > MAX_REJECTION_RATE:
            raise GenerationError(
                f"{self.accepts} acceptances in the last {self.window} draws; "
                "rms bounds look degenerate"
            )
        self.attempts = 0
        self.accepts = 0

    def feed(self, slot_attempts: int) -> None:
        rejections = slot_attempts - 1
        while rejections > 0:
            take = min(rejections, self.window - self.attempts)
            self.attempts += take
            rejections -= take
            if self.attempts == self.window:
                self._close()
        self.attempts += 1
        self.accepts += 1
        if self.attempts == self.window:
            self._close()


def generate(
    space: PresetSpace,
    n: int,
    seed: int,
    render_cfg: RenderConfig | None = None,
    feature_cfg: FeatureConfig | None = None,
    rms_bounds: tuple[float, float] = DEFAULT_RMS_BOUNDS,
    jobs: int = 1,
) -> EmbeddingDataset:
    """Exactly ``n`` gate-passing records, deterministic for a given seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    lo, hi = rms_bounds
    if not lo < hi:
        raise ValueError("rms bounds must satisfy lo < hi")
    render_cfg = render_cfg or RenderConfig()
    feature_cfg = feature_cfg or FeatureConfig.default("mel192avg", sample_rate=render_cfg.sample_rate)

    guard = _WindowGuard()
    total_attempts = 0
    if jobs <= 1:
        vals, embs = [], []
        for i in range(n):
            v, e, a = _make_record(space, i, seed, render_cfg, feature_cfg, lo, hi)
            guard.feed(a)
            total_attempts += a
            vals.append(v)
            embs.append(e)
        values = np.stack(vals)
        embeddings = np.stack(embs)
    else:
        warm_up()  # compile the render kernels once before forking
        shard = max(64, -(-n // (jobs * 4)))
        shards = [
            (space, s, min(s + shard, n), seed, render_cfg, feature_cfg, lo, hi)
            for s in range(0, n, shard)
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_shard, shards))
        for _, _, attempts in results:
            for a in attempts:
                guard.feed(a)
                total_attempts += a
        values = np.concatenate([r[0] for r in results])
        embeddings = np.concatenate([r[1] for r in results])

    header = {
        "format": "SPDS1",
        "synth": json.loads(space.to_json()),
        "feature": feature_cfg.to_json_dict(),
        "config_hash": feature_cfg.config_hash(),
        "render": render_cfg.to_json_dict(),
        "seed": seed,
        "rms_bounds": [lo, hi],
        "rejections": total_attempts - n,
        "count": n,
        "preset_width": space.size,
        "embedding_width": embedding_dim(feature_cfg, render_cfg.n_samples),
    }
    ds = EmbeddingDataset(header=header, values=values, embeddings=embeddings)
    ds.check()
    return ds


def split(ds: EmbeddingDataset, fractions: list[float], seed: int) -> list[EmbeddingDataset]:
    """Disjoint, exhaustive, seeded-shuffle partition of the records."""
    fr = list(fractions)
    if not fr or any(f <= 0 for f in fr):
        raise ValueError("fractions must be positive")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(ds)
    sizes = [int(f * n) for f in fr]
    remainders = [f * n - s for f, s in zip(fr, sizes)]
    for k in sorted(range(len(fr)), key=lambda k: -remainders[k])[: n - sum(sizes)]:
        sizes[k] += 1
    if any(s == 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} contain an empty part")

    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for k, size in enumerate(sizes):
        idx = order[start : start + size]
        start += size
        header = dict(ds.header)
        header["count"] = size
        header["split"] = {"seed": seed, "fractions": fr, "part": k}
        parts.append(
            EmbeddingDataset(header=header, values=ds.values[idx], embeddings=ds.embeddings[idx])
        )
    return parts
