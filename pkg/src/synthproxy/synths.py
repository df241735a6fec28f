"""Two deterministic toy synthesizers: a subtractive voice and a 4-op FM voice.

Both render a single note with sample-accurate, bit-reproducible output.  All
normalized parameters live in [0, 1] and are mapped to physical ranges by the
curves documented next to each constant below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from synthproxy import _kernels
from synthproxy.presets import (
    BINARY,
    CATEGORICAL,
    NUMERICAL,
    ParamSpec,
    Preset,
    PresetSpace,
    validate,
)


class UnknownSynthError(ValueError):
    """Space's synth_id does not name a registered synthesizer."""


@dataclass(frozen=True)
class RenderConfig:
    """Single-note render contract shared by both synths."""

    sample_rate: int = 16000
    total_duration: float = 2.0
    midi_note: int = 60
    velocity: int = 100
    note_length: float = 1.0

    def __post_init__(self) -> None:
        if self.sample_rate < 8000:
            raise ValueError("sample_rate must be >= 8000")
        if not 0 <= self.midi_note <= 127:
            raise ValueError("midi_note must be in [0, 127]")
        if not 1 <= self.velocity <= 127:
            raise ValueError("velocity must be in [1, 127]")
        if self.note_length <= 0 or self.total_duration <= 0:
            raise ValueError("durations must be positive")
        if self.note_length > self.total_duration:
            raise ValueError("note_length cannot exceed total_duration")
        n = self.sample_rate * self.total_duration
        if abs(n - round(n)) > 1e-9:
            raise ValueError("sample_rate * total_duration must be an integer sample count")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.total_duration))

    def to_json_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "total_duration": self.total_duration,
            "midi_note": self.midi_note,
            "velocity": self.velocity,
            "note_length": self.note_length,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RenderConfig":
        return cls(**obj)


@dataclass(frozen=True)
class AudioBuffer:
    """Mono float32 samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        s = np.array(self.samples, dtype=np.float32, copy=True)
        if s.ndim != 1:
            raise ValueError("audio must be mono")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


def rms(buf: AudioBuffer) -> float:
    x = buf.samples.astype(np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def midi_to_hz(note: float) -> float:
    return 440.0 * 2.0 ** ((note - 69.0) / 12.0)


# ---------------------------------------------------------------------------
# parameter mapping curves (normalized v in [0, 1] -> physical units)

ENV_TIME_MIN_S = 0.001  # t(v) = 0.001 * 4000**v, so 1 ms .. 4 s
ENV_TIME_MAX_S = 4.0
CUTOFF_MIN_HZ = 20.0  # f(v) = 20 * 350**v, so 20 Hz .. 7 kHz
CUTOFF_MAX_HZ = 7000.0
Q_MIN = 0.5  # q(v) = 0.5 * 20**v, so 0.5 .. 10
Q_MAX = 10.0
LFO_RATE_MIN_HZ = 0.1  # f(v) = 0.1 * 200**v, so 0.1 .. 20 Hz
LFO_RATE_MAX_HZ = 20.0
OSC2_COARSE_SEMITONES = 12.0  # bipolar: (2v - 1) * 12 semitones
OSC2_FINE_SEMITONES = 1.0  # bipolar: (2v - 1) * 1 semitone
FILT_ENV_OCTAVES = 4.0  # bipolar: cutoff shifted by up to +-4 octaves
LFO_PITCH_SEMITONES = 1.0  # vibrato depth at lfo_depth = 1
LFO_CUTOFF_OCTAVES = 2.0  # cutoff wobble depth at lfo_depth = 1
LFO_FREE_PHASE = 0.37  # LFO start phase in cycles when retrigger is off
SOFT_CLIP_THRESHOLD = 0.99  # tanh engages only beyond this amplitude
FM_MOD_INDEX = 4.0  # peak phase deviation (radians) per unit modulator
FM_FEEDBACK_MAX = math.pi  # op-4 self-modulation depth at feedback = 1
FILTER_MIN_HZ = 10.0  # effective cutoff clamp floor
FILTER_MAX_FRACTION = 0.45  # effective cutoff clamp: 0.45 * sample_rate


def env_time(v: float) -> float:
    return ENV_TIME_MIN_S * (ENV_TIME_MAX_S / ENV_TIME_MIN_S) ** v


def cutoff_hz(v: float) -> float:
    return CUTOFF_MIN_HZ * (CUTOFF_MAX_HZ / CUTOFF_MIN_HZ) ** v


def resonance_q(v: float) -> float:
    return Q_MIN * (Q_MAX / Q_MIN) ** v


def lfo_rate_hz(v: float) -> float:
    return LFO_RATE_MIN_HZ * (LFO_RATE_MAX_HZ / LFO_RATE_MIN_HZ) ** v


def bipolar(v: float) -> float:
    """Map [0, 1] to [-1, 1] with 0.5 at exactly 0."""
    return 2.0 * v - 1.0


def adsr_envelope(
    n: int,
    sr: int,
    attack_s: float,
    decay_s: float,
    sustain: float,
    release_s: float,
    gate_s: float,
) -> np.ndarray:
    """Linear-segment ADSR sampled at t = k / sr.

    Attack ramps 0 to 1, decay ramps to the sustain level, the level holds
    until the gate closes at ``gate_s``, then release ramps linearly to 0 from
    whatever level the envelope had at gate time.
    """
    t = np.arange(n, dtype=np.float64) / sr
    attack_s = max(attack_s, 0.5 / sr)
    decay_s = max(decay_s, 0.5 / sr)
    release_s = max(release_s, 0.5 / sr)

    gate_env = np.where(
        t < attack_s,
        t / attack_s,
        np.maximum(1.0 - (1.0 - sustain) * (t - attack_s) / decay_s, sustain),
    )
    if gate_s < attack_s:
        level_at_gate = gate_s / attack_s
    else:
        level_at_gate = max(1.0 - (1.0 - sustain) * (gate_s - attack_s) / decay_s, sustain)
    release_env = level_at_gate * np.maximum(1.0 - (t - gate_s) / release_s, 0.0)
    return np.where(t < gate_s, gate_env, release_env)


_WAVE_NAMES_OSC = ("sine", "triangle", "saw", "square")
_WAVE_NAMES_LFO = ("sine", "triangle", "square")


def _waveform(phase: np.ndarray, shape: str) -> np.ndarray:
    """Evaluate a naive (non-bandlimited) waveform at fractional phase [0, 1)."""
    frac = phase - np.floor(phase)
    if shape == "sine":
        return np.sin(2.0 * np.pi * frac)
    if shape == "triangle":
        return 4.0 * np.abs(frac - 0.5) - 1.0
    if shape == "saw":
        return 2.0 * frac - 1.0
    if shape == "square":
        return np.where(frac < 0.5, 1.0, -1.0)
    raise ValueError(f"unknown waveform {shape!r}")


def soft_clip(x: np.ndarray) -> np.ndarray:
    """Identity below the threshold, saturating tanh above; output in (-1, 1)."""
    a = np.abs(x)
    span = 1.0 - SOFT_CLIP_THRESHOLD
    over = SOFT_CLIP_THRESHOLD + span * np.tanh((a - SOFT_CLIP_THRESHOLD) / span)
    return np.where(a > SOFT_CLIP_THRESHOLD, np.sign(x) * over, x)


# ---------------------------------------------------------------------------
# SubToy: 2-osc subtractive voice with resonant low-pass, two ADSRs and an LFO

SUBTOY_ID = "subtoy"


def subtoy_space() -> PresetSpace:
    params = [
        ParamSpec("osc_mix", NUMERICAL),
        ParamSpec("osc2_coarse", NUMERICAL, bipolar=True),
        ParamSpec("osc2_fine", NUMERICAL, bipolar=True),
        ParamSpec("amp_attack", NUMERICAL),
        ParamSpec("amp_decay", NUMERICAL),
        ParamSpec("amp_release", NUMERICAL),
        ParamSpec("amp_sustain", NUMERICAL),
        ParamSpec("cutoff", NUMERICAL),
        ParamSpec("resonance", NUMERICAL),
        ParamSpec("filt_env_amount", NUMERICAL, bipolar=True),
        ParamSpec("filt_attack", NUMERICAL),
        ParamSpec("filt_decay", NUMERICAL),
        ParamSpec("filt_sustain", NUMERICAL),
        ParamSpec("filt_release", NUMERICAL),
        ParamSpec("lfo_rate", NUMERICAL),
        ParamSpec("lfo_depth", NUMERICAL),
        ParamSpec("osc2_on", BINARY),
        ParamSpec("filter_keytrack", BINARY),
        ParamSpec("lfo_retrigger", BINARY),
        ParamSpec("osc1_wave", CATEGORICAL, cardinality=4),
        ParamSpec("osc2_wave", CATEGORICAL, cardinality=4),
        ParamSpec("lfo_dest", CATEGORICAL, cardinality=4),  # none/pitch/cutoff/amp
        ParamSpec("lfo_wave", CATEGORICAL, cardinality=3),
    ]
    return PresetSpace(SUBTOY_ID, tuple(params))


def _render_subtoy(space: PresetSpace, preset: Preset, cfg: RenderConfig) -> np.ndarray:
    g = {p.name: v for p, v in zip(space.params, preset.values)}
    sr = cfg.sample_rate
    n = cfg.n_samples
    t = np.arange(n, dtype=np.float64) / sr
    f0 = midi_to_hz(cfg.midi_note)

    lfo_dest = int(g["lfo_dest"])  # 1 none, 2 pitch, 3 cutoff, 4 amp
    lfo_depth = g["lfo_depth"]
    lfo_phase0 = 0.0 if g["lfo_retrigger"] == 1.0 else LFO_FREE_PHASE
    lfo_phase = lfo_rate_hz(g["lfo_rate"]) * t + lfo_phase0
    lfo = _waveform(lfo_phase, _WAVE_NAMES_LFO[int(g["lfo_wave"]) - 1])

    pitch_factor = np.ones(n)
    if lfo_dest == 2 and lfo_depth > 0.0:
        pitch_factor = 2.0 ** (LFO_PITCH_SEMITONES * lfo_depth * lfo / 12.0)

    f1 = f0 * pitch_factor
    phase1 = np.cumsum(f1 / sr)
    osc = _waveform(phase1, _WAVE_NAMES_OSC[int(g["osc1_wave"]) - 1])
    if g["osc2_on"] == 1.0:
        semis = bipolar(g["osc2_coarse"]) * OSC2_COARSE_SEMITONES
        semis += bipolar(g["osc2_fine"]) * OSC2_FINE_SEMITONES
        f2 = f0 * 2.0 ** (semis / 12.0) * pitch_factor
        phase2 = np.cumsum(f2 / sr)
        osc2 = _waveform(phase2, _WAVE_NAMES_OSC[int(g["osc2_wave"]) - 1])
        mix = g["osc_mix"]
        osc = (1.0 - mix) * osc + mix * osc2

    filt_env = adsr_envelope(
        n,
        sr,
        env_time(g["filt_attack"]),
        env_time(g["filt_decay"]),
        g["filt_sustain"],
        env_time(g["filt_release"]),
        cfg.note_length,
    )
    octaves = bipolar(g["filt_env_amount"]) * FILT_ENV_OCTAVES * filt_env
    if lfo_dest == 3 and lfo_depth > 0.0:
        octaves = octaves + LFO_CUTOFF_OCTAVES * lfo_depth * lfo
    base = cutoff_hz(g["cutoff"])
    if g["filter_keytrack"] == 1.0:
        base *= 2.0 ** ((cfg.midi_note - 60) / 12.0)
    cutoff = np.clip(base * 2.0**octaves, FILTER_MIN_HZ, FILTER_MAX_FRACTION * sr)

    filtered = _kernels.biquad_lowpass_sweep(
        np.ascontiguousarray(osc), np.ascontiguousarray(cutoff), resonance_q(g["resonance"]), float(sr)
    )

    amp_env = adsr_envelope(
        n,
        sr,
        env_time(g["amp_attack"]),
        env_time(g["amp_decay"]),
        g["amp_sustain"],
        env_time(g["amp_release"]),
        cfg.note_length,
    )
    gain = amp_env * (cfg.velocity / 127.0)
    if lfo_dest == 4 and lfo_depth > 0.0:
        gain = gain * (1.0 - lfo_depth * 0.5 * (lfo + 1.0))
    return soft_clip(filtered * gain)


# ---------------------------------------------------------------------------
# FMToy: 4 sine operators with per-op ADSR, 8 routing algorithms, op-4 feedback

FMTOY_ID = "fmtoy"
FM_RATIO_MIN = 0.5  # r(v) = 0.5 * 16**v, so 0.5 .. 8 x the note frequency
FM_RATIO_MAX = 8.0

# Routing table;  mods maps each operator to the higher-numbered operators that
# phase-modulate it (1-based names, stored 0-based below).  Algorithm 1 is the
# pure serial chain, algorithm 8 the pure parallel bank.
FM_ALGORITHMS: tuple[dict, ...] = (
    {"mods": {2: (3,), 1: (2,), 0: (1,)}, "carriers": (0,)},  # 1: 4>3>2>1
    {"mods": {1: (2, 3), 0: (1,)}, "carriers": (0,)},  # 2: (3,4)>2>1
    {"mods": {2: (3,), 1: (2,)}, "carriers": (0, 1)},  # 3: 4>3>2, plain 1
    {"mods": {2: (3,), 0: (1,)}, "carriers": (0, 2)},  # 4: two 2-op stacks
    {"mods": {0: (3,), 1: (3,), 2: (3,)}, "carriers": (0, 1, 2)},  # 5: fan-out
    {"mods": {2: (3,)}, "carriers": (0, 1, 2)},  # 6: one stack + 2 plain
    {"mods": {0: (1, 2, 3)}, "carriers": (0,)},  # 7: fan-in
    {"mods": {}, "carriers": (0, 1, 2, 3)},  # 8: parallel bank
)


def fmtoy_space() -> PresetSpace:
    params: list[ParamSpec] = []
    for op in range(1, 5):
        params.append(ParamSpec(f"op{op}_ratio", NUMERICAL))
        params.append(ParamSpec(f"op{op}_level", NUMERICAL))
        params.append(ParamSpec(f"op{op}_attack", NUMERICAL))
        params.append(ParamSpec(f"op{op}_decay", NUMERICAL))
        params.append(ParamSpec(f"op{op}_sustain", NUMERICAL))
        params.append(ParamSpec(f"op{op}_release", NUMERICAL))
    params.append(ParamSpec("feedback", NUMERICAL))
    params.append(ParamSpec("algorithm", CATEGORICAL, cardinality=len(FM_ALGORITHMS)))
    return PresetSpace(FMTOY_ID, tuple(params))


def fm_ratio(v: float) -> float:
    return FM_RATIO_MIN * (FM_RATIO_MAX / FM_RATIO_MIN) ** v


def fm_modulator_ops(algorithm: int) -> tuple[int, ...]:
    """0-based operators acting as modulators under a 1-based algorithm index."""
    alg = FM_ALGORITHMS[algorithm - 1]
    mods: set[int] = set()
    for sources in alg["mods"].values():
        mods.update(sources)
    return tuple(sorted(mods))


def _render_fmtoy(space: PresetSpace, preset: Preset, cfg: RenderConfig) -> np.ndarray:
    g = {p.name: v for p, v in zip(space.params, preset.values)}
    sr = cfg.sample_rate
    n = cfg.n_samples
    f0 = midi_to_hz(cfg.midi_note)
    alg = FM_ALGORITHMS[int(g["algorithm"]) - 1]

    phase_inc = np.empty(4, dtype=np.float64)
    levels = np.empty(4, dtype=np.float64)
    env = np.empty((4, n), dtype=np.float64)
    for op in range(4):
        name = f"op{op + 1}"
        phase_inc[op] = 2.0 * np.pi * f0 * fm_ratio(g[f"{name}_ratio"]) / sr
        levels[op] = g[f"{name}_level"]
        env[op] = adsr_envelope(
            n,
            sr,
            env_time(g[f"{name}_attack"]),
            env_time(g[f"{name}_decay"]),
            g[f"{name}_sustain"],
            env_time(g[f"{name}_release"]),
            cfg.note_length,
        )

    mod_matrix = np.zeros((4, 4), dtype=np.int8)
    for dst, sources in alg["mods"].items():
        for src in sources:
            mod_matrix[dst, src] = 1
    carrier_gain = np.zeros(4, dtype=np.float64)
    carrier_gain[list(alg["carriers"])] = 1.0 / len(alg["carriers"])

    out = _kernels.fm_stack(
        phase_inc,
        np.ascontiguousarray(env),
        levels,
        mod_matrix,
        carrier_gain,
        FM_MOD_INDEX,
        FM_FEEDBACK_MAX * g["feedback"],
        n,
    )
    return soft_clip(out * (cfg.velocity / 127.0))


# ---------------------------------------------------------------------------

_RENDERERS = {SUBTOY_ID: _render_subtoy, FMTOY_ID: _render_fmtoy}
_SPACES = {SUBTOY_ID: subtoy_space, FMTOY_ID: fmtoy_space}


def space_for(synth_id: str) -> PresetSpace:
    try:
        return _SPACES[synth_id]()
    except KeyError:
        raise UnknownSynthError(f"no synthesizer registered as {synth_id!r}") from None


def render(space: PresetSpace, preset: Preset, cfg: RenderConfig | None = None) -> AudioBuffer:
    """Render one note; raises on invalid presets or unknown synths."""
    cfg = cfg or RenderConfig()
    try:
        fn = _RENDERERS[space.synth_id]
    except KeyError:
        raise UnknownSynthError(f"no synthesizer registered as {space.synth_id!r}") from None
    bad = validate(space, preset)
    if bad:
        raise ValueError(f"invalid preset for {space.synth_id}: {bad[:3]}")
    samples = fn(space, preset, cfg)
    return AudioBuffer(samples.astype(np.float32), cfg.sample_rate)
