from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from synthproxy.data import generate, split
from synthproxy.encoders import EncoderConfig, PresetTokenizer, build_encoder, encode_values
from synthproxy.features import Embedding, FeatureMismatchError
from synthproxy.nn.checkpoint import load_checkpoint
from synthproxy.nn.gradcheck import grad_check
from synthproxy.nn.tensor import Tensor
from synthproxy.presets import (
    BINARY,
    CATEGORICAL,
    NUMERICAL,
    ParamSpec,
    Preset,
    PresetSpace,
    sample_values,
)
from synthproxy.ssm import (
    EstimatorConfig,
    FrozenProxy,
    PresetEstimator,
    ScheduleConfig,
    SoftPreset,
    SsmTrainConfig,
    embedding_loss,
    harden,
    load_estimator,
    param_loss,
    schedule_weights,
    soft_from_values,
    soft_inputs,
    ssm_eval,
    ssm_train,
)
from synthproxy.synths import AudioBuffer, RenderConfig, fmtoy_space, render, subtoy_space
from synthproxy.training import TrainingDivergedError, distill_train
from synthproxy.wav import export_wav

SPACE = subtoy_space()
RC = RenderConfig(sample_rate=16000, total_duration=0.5, note_length=0.25)
EST_TINY = EstimatorConfig(n_mels=8, window=64, hop=32, channels=(2, 3), hidden=8)

TINY_SPACE = PresetSpace(
    "toyspace",
    (
        ParamSpec("level", NUMERICAL),
        ParamSpec("tone", NUMERICAL),
        ParamSpec("gate", BINARY),
        ParamSpec("mode", CATEGORICAL, cardinality=3),
    ),
)

STEP_KEYS = {"step", "epoch", "lr", "w_param", "w_embed", "train_loss"}
VAL_KEYS = {"val_stft", "val_mel", "val_mstft", "val_mfccd"}


@pytest.fixture(scope="module")
def ssm_pair():
    ds = generate(SPACE, 16, seed=77, render_cfg=RC)
    train, val = split(ds, [0.75, 0.25], seed=2)
    return train, val


@pytest.fixture(scope="module")
def proxy_ckpt(tmp_path_factory, ssm_pair):
    train, val = ssm_pair
    cfg = EncoderConfig(
        "mlp_oh", 192, n_layers=1, d_hidden=16,
        epochs=1, batch_size=8, base_lr=1e-3, min_lr=1e-4, restart_epoch=1,
    )
    res = distill_train(SPACE, train, val, cfg, seed=5, out_dir=tmp_path_factory.mktemp("proxy"))
    return res.best_l1_path


@pytest.fixture(scope="module")
def trained_ssm(tmp_path_factory, ssm_pair):
    train, val = ssm_pair
    cfg = SsmTrainConfig(
        schedule=ScheduleConfig("ploss", total_epochs=2),
        estimator=EST_TINY, batch_size=8, base_lr=3e-3, min_lr=1e-3,
    )
    return ssm_train(train, val, cfg, seed=11, out_dir=tmp_path_factory.mktemp("ssm"))


def journal_lines(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def random_rows(space, n, seed):
    rng = np.random.default_rng(seed)
    return np.stack([sample_values(space, rng) for _ in range(n)])


def tiny_soft(batch=2, requires_grad=False, dtype=np.float64):
    """Hand-built relaxed presets for TINY_SPACE, bounded away from 0 and 1."""
    num = Tensor(np.array([[0.23, 0.71], [0.64, 0.38]][:batch], dtype=dtype), requires_grad)
    binary = Tensor(np.array([[0.81], [0.27]][:batch], dtype=dtype), requires_grad)
    cat = Tensor(np.array([[0.2, 0.3, 0.5], [0.6, 0.15, 0.25]][:batch], dtype=dtype), requires_grad)
    return SoftPreset(TINY_SPACE, num, binary, (cat,))


# ---------------------------------------------------------------------------
# relaxed presets and hardening


def test_soft_from_values_harden_roundtrip():
    rows = random_rows(SPACE, 5, seed=3)
    sp = soft_from_values(SPACE, rows)
    assert sp.batch == 5
    assert np.array_equal(harden(sp), rows)


def test_harden_resolves_ties_to_lowest_code():
    num = Tensor(np.array([[0.3, 0.7]]))
    binary = Tensor(np.array([[0.5]]))
    cat = Tensor(np.array([[1.0, 1.0, 1.0]]) / 3.0)
    hard = harden(SoftPreset(TINY_SPACE, num, binary, (cat,)))
    assert hard[0, 2] == 0.0
    assert hard[0, 3] == 1.0

    cat2 = Tensor(np.array([[0.2, 0.4, 0.4]]))
    hard2 = harden(SoftPreset(TINY_SPACE, num, binary, (cat2,)))
    assert hard2[0, 3] == 2.0


def test_harden_clips_numerical_tolerance_overshoot():
    num = Tensor(np.array([[1.0 + 5e-7, -5e-7]]))
    binary = Tensor(np.array([[0.9]]))
    cat = Tensor(np.array([[1.0, 0.0, 0.0]]))
    hard = harden(SoftPreset(TINY_SPACE, num, binary, (cat,)))
    assert hard[0, 0] == 1.0
    assert hard[0, 1] == 0.0


def test_soft_preset_validation_rejects_malformed_blocks():
    num = Tensor(np.array([[0.2, 0.5]]))
    binary = Tensor(np.array([[0.5]]))
    good = Tensor(np.array([[0.5, 0.25, 0.25]]))
    with pytest.raises(ValueError, match="sum to 1"):
        SoftPreset(TINY_SPACE, num, binary, (Tensor(np.array([[0.5, 0.2, 0.2]])),))
    with pytest.raises(ValueError, match="lie in"):
        SoftPreset(TINY_SPACE, num, binary, (Tensor(np.array([[1.2, -0.1, -0.1]])),))
    with pytest.raises(ValueError, match="numerical block"):
        SoftPreset(TINY_SPACE, Tensor(np.array([[0.2]])), binary, (good,))
    with pytest.raises(ValueError, match="batch"):
        SoftPreset(TINY_SPACE, num, Tensor(np.array([[0.5], [0.5]])), (good,))
    with pytest.raises(ValueError, match="per categorical"):
        SoftPreset(TINY_SPACE, num, binary, ())
    with pytest.raises(ValueError, match="in \\[0, 1\\]"):
        SoftPreset(TINY_SPACE, Tensor(np.array([[1.4, 0.2]])), binary, (good,))


def test_tokenizer_treats_hard_soft_presets_identically():
    rows = random_rows(SPACE, 4, seed=9)
    sp = soft_from_values(SPACE, rows, dtype=np.float32)
    tok = PresetTokenizer(SPACE, d_token=6, rng=np.random.default_rng(0))
    hard_tokens = tok(harden(sp)).data
    scaled, blocks = soft_inputs(sp)
    soft_tokens = tok.forward_soft(scaled, blocks).data
    assert np.array_equal(hard_tokens, soft_tokens)


# ---------------------------------------------------------------------------
# parameter loss


def test_param_loss_near_zero_for_confident_correct_prediction():
    target = np.array([[0.25, 0.75, 1.0, 2.0]])
    num = Tensor(np.array([[0.25, 0.75]]))
    binary = Tensor(np.array([[1.0 - 1e-7]]))
    cat = Tensor(np.array([[5e-8, 1.0 - 1e-7, 5e-8]]))
    loss = param_loss(SoftPreset(TINY_SPACE, num, binary, (cat,)), target)
    assert float(loss.data) < 1e-6


def test_param_loss_uniform_categorical_closed_form():
    rows = random_rows(SPACE, 3, seed=21)
    exact = soft_from_values(SPACE, rows)
    uniform = tuple(
        Tensor(np.full((3, SPACE.params[i].cardinality), 1.0 / SPACE.params[i].cardinality))
        for i in SPACE.categorical_indices
    )
    sp = SoftPreset(SPACE, exact.numerical, exact.binary, uniform)
    cards = [SPACE.params[i].cardinality for i in SPACE.categorical_indices]
    expected = float(np.mean([np.log(c) for c in cards]))
    assert abs(float(param_loss(sp, rows).data) - expected) < 1e-9


def test_param_loss_matches_numpy_oracle():
    rng = np.random.default_rng(4)
    rows = random_rows(TINY_SPACE, 3, seed=5)
    num = rng.uniform(0.05, 0.95, size=(3, 2))
    binary = rng.uniform(0.05, 0.95, size=(3, 1))
    logits = rng.standard_normal((3, 3))
    cat = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    sp = SoftPreset(TINY_SPACE, Tensor(num), Tensor(binary), (Tensor(cat),))

    eps = 1e-12
    t_bin = rows[:, 2:3]
    codes = rows[:, 3].astype(int) - 1
    oracle = (
        np.abs(num - rows[:, :2]).mean()
        + (-(t_bin * np.log(binary + eps) + (1 - t_bin) * np.log(1 - binary + eps))).mean()
        + (-np.log(cat[np.arange(3), codes] + eps)).mean()
    )
    assert abs(float(param_loss(sp, rows).data) - oracle) < 1e-12


def test_param_loss_input_errors():
    sp = tiny_soft(batch=1)
    with pytest.raises(ValueError, match="belongs to"):
        param_loss(sp, Preset("subtoy", np.zeros(23)))
    with pytest.raises(ValueError):
        param_loss(sp, np.array([[0.5, 0.5, 0.0]]))
    with pytest.raises(ValueError, match="batch"):
        param_loss(sp, random_rows(TINY_SPACE, 3, seed=1))


def test_param_loss_finite_difference_gradients():
    sp = tiny_soft(batch=2, requires_grad=True)
    rows = random_rows(TINY_SPACE, 2, seed=8)
    blocks = {"num": sp.numerical, "bin": sp.binary, "cat": sp.categorical[0]}
    report = grad_check(lambda: param_loss(sp, rows), blocks)
    assert max(report.values()) < 1e-4


# ---------------------------------------------------------------------------
# embedding loss through a frozen proxy


def test_frozen_proxy_blocks_gradients_but_feeds_soft_preset():
    cfg = EncoderConfig("mlp_oh", 5, n_layers=1, d_hidden=8)
    model = build_encoder(cfg, TINY_SPACE, seed=0)
    n_weights = len(model.parameters())
    assert n_weights > 0
    proxy = FrozenProxy(model, "hash0")
    assert len(proxy.weights) == n_weights
    assert model.parameters() == []

    sp = tiny_soft(batch=2, requires_grad=True, dtype=np.float32)
    targets = np.random.default_rng(1).standard_normal((2, 5)).astype(np.float32)
    loss = embedding_loss(sp, targets, proxy, target_hash="hash0")
    loss.backward()
    assert proxy.grads_clear()
    assert sp.numerical.grad is not None
    assert sp.binary.grad is not None
    assert sp.categorical[0].grad is not None
    assert proxy.soft_calls == 1


def test_embedding_loss_equals_hard_forward_residual(ssm_pair):
    train, _ = ssm_pair
    cfg = EncoderConfig("mlp_oh", 192, n_layers=1, d_hidden=8)
    model = build_encoder(cfg, SPACE, seed=2)
    rows = train.values[:3].astype(np.float64)
    targets = train.embeddings[:3]

    proxy = FrozenProxy(model, train.config_hash)
    sp = soft_from_values(SPACE, rows, dtype=np.float32)
    loss = float(embedding_loss(sp, targets, proxy, target_hash=train.config_hash).data)
    residual = float(np.abs(encode_values(model, rows) - targets.astype(np.float64)).mean())
    # the loss accumulates in float32, the oracle in float64
    assert loss == pytest.approx(residual, rel=1e-5)


def test_embedding_loss_target_forms_and_errors():
    cfg = EncoderConfig("mlp_oh", 4, n_layers=1, d_hidden=8)
    proxy = FrozenProxy(build_encoder(cfg, TINY_SPACE, seed=3), "want")
    sp = tiny_soft(batch=1)

    emb = Embedding(np.zeros(4, dtype=np.float32), "want")
    assert float(embedding_loss(sp, emb, proxy).data) >= 0.0
    with pytest.raises(FeatureMismatchError):
        embedding_loss(sp, Embedding(np.zeros(4, dtype=np.float32), "other"), proxy)
    with pytest.raises(ValueError, match="target_hash"):
        embedding_loss(sp, np.zeros((1, 4)), proxy)
    with pytest.raises(ValueError, match="do not match"):
        embedding_loss(sp, np.zeros((1, 3)), proxy, target_hash="want")

    other_space_sp = soft_from_values(SPACE, random_rows(SPACE, 1, seed=0))
    with pytest.raises(ValueError, match="encodes"):
        embedding_loss(other_space_sp, np.zeros((1, 4)), proxy, target_hash="want")


def test_embedding_loss_finite_difference_wrt_relaxed_preset():
    cfg = EncoderConfig("mlp_oh", 4, n_layers=1, d_hidden=6)
    model = build_encoder(cfg, TINY_SPACE, seed=7).astype(np.float64)
    proxy = FrozenProxy(model, "h")
    sp = tiny_soft(batch=2, requires_grad=True)
    targets = np.random.default_rng(2).standard_normal((2, 4))
    blocks = {"num": sp.numerical, "bin": sp.binary, "cat": sp.categorical[0]}
    report = grad_check(
        lambda: embedding_loss(sp, targets, proxy, target_hash="h"), blocks
    )
    assert max(report.values()) < 1e-4


# ---------------------------------------------------------------------------
# the estimator network


def test_estimator_head_widths_and_ranges():
    est = PresetEstimator(EstimatorConfig(), SPACE, 16000, seed=0)
    mel = np.random.default_rng(0).standard_normal((2, 128, 9)).astype(np.float32)
    sp = est.forward_logmel(mel)
    assert sp.numerical.shape == (2, 16)
    assert sp.binary.shape == (2, 3)
    assert [b.shape[1] for b in sp.categorical] == [4, 4, 4, 3]
    assert sp.numerical.data.min() > 0.0 and sp.numerical.data.max() < 1.0
    for block in sp.categorical:
        assert np.abs(block.data.sum(axis=1) - 1.0).max() < 1e-6
    hard = harden(sp)
    assert hard.shape == (2, SPACE.size)


def test_estimator_rejects_bad_inputs():
    est = PresetEstimator(EST_TINY, SPACE, 16000, seed=0)
    with pytest.raises(ValueError, match="log-mel"):
        est.forward_logmel(np.zeros((2, 9, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="log-mel"):
        est.forward_logmel(np.zeros((8, 4), dtype=np.float32))
    wrong_rate = AudioBuffer(np.zeros(4000, dtype=np.float32), 8000)
    with pytest.raises(ValueError, match="expects 16000"):
        est.forward_audio([wrong_rate])
    a = AudioBuffer(np.zeros(4000, dtype=np.float32), 16000)
    b = AudioBuffer(np.zeros(5000, dtype=np.float32), 16000)
    with pytest.raises(ValueError, match="share one length"):
        est.forward_audio([a, b])
    with pytest.raises(ValueError, match="empty"):
        est.forward_audio([])


def test_estimator_audio_path_matches_logmel_path():
    est = PresetEstimator(EST_TINY, SPACE, 16000, seed=1)
    est.eval()
    rows = random_rows(SPACE, 2, seed=12)
    bufs = [render(SPACE, Preset("subtoy", r), RC) for r in rows]
    via_audio = est.forward_audio(bufs)
    stacked = np.stack([b.samples for b in bufs])
    assert np.array_equal(est.log_mel(stacked)[0], est.log_mel(bufs[0].samples))
    via_mel = est.forward_logmel(est.log_mel(stacked))
    assert np.array_equal(via_audio.numerical.data, via_mel.numerical.data)
    assert np.array_equal(via_audio.categorical[0].data, via_mel.categorical[0].data)


def test_estimator_and_losses_finite_difference_gradients():
    cfg = EstimatorConfig(n_mels=8, window=16, hop=8, channels=(2, 3), hidden=4)
    est = PresetEstimator(cfg, TINY_SPACE, 16000, seed=3).astype(np.float64)
    est.train(True)
    mel = np.random.default_rng(5).standard_normal((2, 8, 5))
    rows = random_rows(TINY_SPACE, 2, seed=6)
    proxy_model = build_encoder(
        EncoderConfig("mlp_oh", 3, n_layers=1, d_hidden=5), TINY_SPACE, seed=8
    ).astype(np.float64)
    proxy = FrozenProxy(proxy_model, "h")
    targets = np.random.default_rng(7).standard_normal((2, 3))

    def build_loss():
        sp = est.forward_logmel(mel)
        return param_loss(sp, rows) + embedding_loss(sp, targets, proxy, target_hash="h")

    report = grad_check(build_loss, dict(est.named_parameters()))
    assert max(report.values()) < 1e-4


def test_estimator_config_validation_and_json():
    with pytest.raises(ValueError, match="mel band"):
        EstimatorConfig(n_mels=64, window=64, hop=32)
    with pytest.raises(ValueError, match="hop"):
        EstimatorConfig(hop=2048)
    with pytest.raises(ValueError, match="channels"):
        EstimatorConfig(channels=())
    cfg = EstimatorConfig(n_mels=16, window=128, hop=64, channels=(4, 8), hidden=32)
    assert EstimatorConfig.from_json_dict(cfg.to_json_dict()) == cfg


# ---------------------------------------------------------------------------
# loss schedules


def test_schedule_weights_reference_values():
    ploss = ScheduleConfig("ploss", total_epochs=60)
    assert schedule_weights(ploss, 0) == (1.0, 0.0)
    assert schedule_weights(ploss, 59) == (1.0, 0.0)

    mix = ScheduleConfig("mix", total_epochs=60, alpha=2.0)
    assert schedule_weights(mix, 0) == (1.0, 0.0)
    assert schedule_weights(mix, 19) == (1.0, 0.0)
    assert schedule_weights(mix, 30) == (1.0, 1.0)
    assert schedule_weights(mix, 40) == (1.0, 2.0)
    assert schedule_weights(mix, 59) == (1.0, 2.0)

    switch = ScheduleConfig("switch", total_epochs=60)
    assert schedule_weights(switch, 20) == (1.0, 0.0)
    assert schedule_weights(switch, 30) == (0.5, 0.5)
    assert schedule_weights(switch, 59) == (0.0, 1.0)


def test_schedule_weights_continuous_at_phase_boundaries():
    for kind in ("mix", "switch"):
        cfg = ScheduleConfig(kind, total_epochs=60, alpha=1.5)
        for boundary in cfg.boundaries:
            lo = np.array(schedule_weights(cfg, boundary - 1e-7))
            hi = np.array(schedule_weights(cfg, boundary + 1e-7))
            assert np.abs(lo - hi).max() < 1e-5


def test_schedule_validation_and_json_roundtrip():
    with pytest.raises(ValueError, match="kind"):
        ScheduleConfig("blend")
    with pytest.raises(ValueError, match="alpha"):
        ScheduleConfig("mix", alpha=-0.5)
    with pytest.raises(ValueError, match="boundaries"):
        ScheduleConfig("mix", total_epochs=60, phase_bounds=(40, 20))
    with pytest.raises(ValueError, match="boundaries"):
        ScheduleConfig("switch", total_epochs=1)
    cfg = ScheduleConfig("switch", total_epochs=90, alpha=0.5)
    with pytest.raises(ValueError, match="epoch"):
        schedule_weights(cfg, 90)
    with pytest.raises(ValueError, match="epoch"):
        schedule_weights(cfg, -1)
    back = ScheduleConfig.from_json_dict(cfg.to_json_dict())
    assert back.kind == cfg.kind
    assert back.total_epochs == cfg.total_epochs
    assert back.alpha == cfg.alpha
    assert back.boundaries == cfg.boundaries
    assert ScheduleConfig.desk("mix").total_epochs == 60
    assert ScheduleConfig.full_scale("mix").total_epochs == 600


# ---------------------------------------------------------------------------
# training


def test_ssm_train_ploss_runs_without_proxy(trained_ssm, ssm_pair):
    train, val = ssm_pair
    res = trained_ssm
    assert res.checkpoint_path.exists()
    assert res.journal_path.exists()
    assert res.epochs_run == 2
    assert res.val_epochs == (0, 1)
    assert res.val_proxy_calls == 0
    assert res.val_renders == 2 * len(val)
    assert res.best_epoch in res.val_epochs
    assert np.isfinite(res.final_train_loss)

    lines = journal_lines(res.journal_path)
    step_lines = [l for l in lines if set(l) == STEP_KEYS]
    val_lines = [l for l in lines if VAL_KEYS <= set(l)]
    assert len(step_lines) == 4
    assert len(val_lines) == 2
    assert all(l["w_embed"] == 0.0 and l["w_param"] == 1.0 for l in step_lines)
    assert lines[-1]["event"] == "selection"
    assert lines[-1]["selected_epoch"] == res.best_epoch
    assert lines[-1]["mfccd_high"] >= lines[-1]["mfccd_low"]

    header, tensors = load_checkpoint(res.checkpoint_path)
    assert header["kind"] == "preset-estimator"
    assert header["config_hash"] == train.config_hash
    assert header["epoch"] == res.best_epoch
    assert header["schedule"]["kind"] == "ploss"
    assert header["proxy_architecture"] is None
    assert set(header["val_metrics"]) == {"stft", "mel", "mstft", "mfccd"}
    assert tensors

    model, _ = load_estimator(res.checkpoint_path)
    buf = render(SPACE, Preset("subtoy", val.values[0].astype(np.float64)), RC)
    hard = harden(model.forward_audio([buf]))
    assert hard.shape == (1, SPACE.size)


def test_ssm_train_selection_minimizes_rescaled_mean(trained_ssm):
    res = trained_ssm
    mf = np.array([m["mfccd"] for m in res.val_metrics])
    lo, hi = mf.min(), mf.max()
    scaled = (mf - lo) / (hi - lo) if hi > lo else np.zeros_like(mf)
    scores = [
        (m["stft"] + m["mstft"] + m["mel"] + s) / 4.0
        for m, s in zip(res.val_metrics, scaled)
    ]
    assert res.best_epoch == res.val_epochs[int(np.argmin(scores))]
    assert res.best_score == pytest.approx(min(scores))


def test_ssm_train_mix_feeds_frozen_proxy(tmp_path, ssm_pair, proxy_ckpt):
    train, val = ssm_pair
    proxy = FrozenProxy.from_checkpoint(proxy_ckpt)
    cfg = SsmTrainConfig(
        schedule=ScheduleConfig("mix", total_epochs=3),
        estimator=EST_TINY, batch_size=8, base_lr=1e-3, min_lr=1e-4,
    )
    res = ssm_train(train, val, cfg, seed=4, out_dir=tmp_path, proxy=proxy)
    assert res.val_proxy_calls == 0
    assert proxy.soft_calls > 0
    assert proxy.grads_clear()

    step_lines = [l for l in journal_lines(res.journal_path) if set(l) == STEP_KEYS]
    by_epoch = {e: [l for l in step_lines if l["epoch"] == e] for e in range(3)}
    assert all(l["w_embed"] == 0.0 for l in by_epoch[0] + by_epoch[1])
    assert all(l["w_embed"] == 1.0 and l["w_param"] == 1.0 for l in by_epoch[2])

    header, _ = load_checkpoint(res.checkpoint_path)
    assert header["schedule"]["kind"] == "mix"
    assert header["proxy_architecture"] == "mlp_oh"


def test_ssm_train_switch_ends_on_embedding_only(tmp_path, ssm_pair, proxy_ckpt):
    train, val = ssm_pair
    cfg = SsmTrainConfig(
        schedule=ScheduleConfig("switch", total_epochs=2),
        estimator=EST_TINY, batch_size=8, base_lr=1e-3, min_lr=1e-4, val_every=2,
    )
    res = ssm_train(train, val, cfg, seed=6, out_dir=tmp_path, proxy=proxy_ckpt)
    step_lines = [l for l in journal_lines(res.journal_path) if set(l) == STEP_KEYS]
    last_epoch = [l for l in step_lines if l["epoch"] == 1]
    assert all(l["w_param"] == 0.0 and l["w_embed"] == 1.0 for l in last_epoch)
    assert res.val_epochs == (1,)


def test_ssm_train_reruns_bit_identical(tmp_path, ssm_pair):
    train, val = ssm_pair
    cfg = SsmTrainConfig(
        schedule=ScheduleConfig("ploss", total_epochs=1),
        estimator=EST_TINY, batch_size=8, base_lr=2e-3, min_lr=1e-3,
    )
    a = ssm_train(train, val, cfg, seed=13, out_dir=tmp_path / "a")
    b = ssm_train(train, val, cfg, seed=13, out_dir=tmp_path / "b")
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    assert a.journal_path.read_text() == b.journal_path.read_text()


def test_ssm_train_validates_inputs(tmp_path, ssm_pair):
    train, val = ssm_pair
    ploss = SsmTrainConfig(
        schedule=ScheduleConfig("ploss", total_epochs=1),
        estimator=EST_TINY, batch_size=8,
    )
    mix = dataclasses.replace(ploss, schedule=ScheduleConfig("mix", total_epochs=3))

    with pytest.raises(ValueError, match="needs a proxy"):
        ssm_train(train, val, mix, seed=0, out_dir=tmp_path)

    tampered = dataclasses.replace(val, header={**val.header, "config_hash": "f" * 64})
    with pytest.raises(ValueError, match="feature config"):
        ssm_train(train, tampered, ploss, seed=0, out_dir=tmp_path)

    overlap = dataclasses.replace(
        val, values=train.values[:4].copy(), embeddings=train.embeddings[:4].copy()
    )
    with pytest.raises(ValueError, match="overlap"):
        ssm_train(train, overlap, ploss, seed=0, out_dir=tmp_path)

    bad_hash = FrozenProxy(
        build_encoder(EncoderConfig("mlp_oh", 192, n_layers=1, d_hidden=8), SPACE, 0), "bogus"
    )
    with pytest.raises(FeatureMismatchError):
        ssm_train(train, val, mix, seed=0, out_dir=tmp_path, proxy=bad_hash)

    wrong_space = FrozenProxy(
        build_encoder(EncoderConfig("mlp_oh", 192, n_layers=1, d_hidden=8), TINY_SPACE, 0),
        train.config_hash,
    )
    with pytest.raises(ValueError, match="proxy encodes"):
        ssm_train(train, val, mix, seed=0, out_dir=tmp_path, proxy=wrong_space)

    narrow = FrozenProxy(
        build_encoder(EncoderConfig("mlp_oh", 7, n_layers=1, d_hidden=8), SPACE, 0),
        train.config_hash,
    )
    with pytest.raises(ValueError, match="7-dim"):
        ssm_train(train, val, mix, seed=0, out_dir=tmp_path, proxy=narrow)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ssm_train_aborts_on_non_finite_loss(tmp_path, ssm_pair):
    train, val = ssm_pair
    cfg = SsmTrainConfig(
        schedule=ScheduleConfig("ploss", total_epochs=2),
        estimator=EST_TINY, batch_size=8,
        # one step at this rate pushes float32 weights to the overflow
        # boundary, so the next forward pass goes non-finite
        base_lr=1e38, min_lr=1e37,
    )
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="epoch"):
        ssm_train(train, val, cfg, seed=1, out_dir=tmp_path)


# ---------------------------------------------------------------------------
# evaluation


class _OracleEstimator:
    """Serves the stored true presets back, in dataset order."""

    def __init__(self, space, sample_rate, rows):
        self.space = space
        self.sample_rate = sample_rate
        self._rows = np.asarray(rows, dtype=np.float64)
        self._pos = 0

    def forward_audio(self, buffers):
        take = self._rows[self._pos : self._pos + len(buffers)]
        self._pos += len(buffers)
        return soft_from_values(self.space, take)


def test_ssm_eval_oracle_estimator_scores_perfectly(ssm_pair):
    _, val = ssm_pair
    oracle = _OracleEstimator(SPACE, 16000, val.values)
    report = ssm_eval(oracle, val)
    assert report.columns == ("item", "num_l1", "bin_acc", "cat_acc", "stft", "mel", "mstft", "mfccd")
    assert len(report.rows) == len(val)
    assert report.summary["num_l1"] == 0.0
    assert report.summary["bin_acc"] == 1.0
    assert report.summary["cat_acc"] == 1.0
    for key in ("stft", "mel", "mstft", "mfccd"):
        assert report.summary[key] == 0.0


def test_ssm_eval_from_checkpoint_with_csv_and_json(tmp_path, trained_ssm, ssm_pair):
    _, val = ssm_pair
    report = ssm_eval(str(trained_ssm.checkpoint_path), val)
    assert len(report.rows) == len(val)
    for row in report.rows:
        assert all(np.isfinite(row[k]) for k in ("num_l1", "stft", "mel", "mstft", "mfccd"))
        assert 0.0 <= row["bin_acc"] <= 1.0
        assert 0.0 <= row["cat_acc"] <= 1.0

    csv_path = tmp_path / "in_domain.csv"
    report.write_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == ",".join(report.columns)
    assert len(lines) == 1 + len(report.rows)

    json_path = tmp_path / "in_domain.json"
    report.write_json(json_path)
    doc = json.loads(json_path.read_text())
    assert doc["columns"] == list(report.columns)
    assert doc["summary"]["num_l1"] == pytest.approx(report.summary["num_l1"])


def test_ssm_eval_directory_audio_metrics_only(tmp_path, trained_ssm):
    wav_dir = tmp_path / "wavs"
    wav_dir.mkdir()
    row = random_rows(SPACE, 1, seed=44)[0]
    export_wav(render(SPACE, Preset("subtoy", row), RC), wav_dir / "rendered.wav")
    t = np.arange(int(0.7 * 22050)) / 22050.0
    export_wav(AudioBuffer((0.5 * np.sin(880.0 * np.pi * t)).astype(np.float32), 22050),
               wav_dir / "mid_sine.wav")
    export_wav(AudioBuffer(np.zeros(8000, dtype=np.float32), 16000), wav_dir / "silent.wav")
    (wav_dir / "broken.wav").write_text("not audio")

    export_dir = tmp_path / "pairs"
    with pytest.warns(UserWarning, match="unreadable"):
        report = ssm_eval(
            str(trained_ssm.checkpoint_path), wav_dir, export_dir=export_dir
        )
    assert report.columns == ("file", "stft", "mel", "mstft", "mfccd")
    assert report.skipped == 1
    assert {r["file"] for r in report.rows} == {"rendered.wav", "mid_sine.wav", "silent.wav"}
    for row_ in report.rows:
        assert set(row_) == set(report.columns)
        for key in ("stft", "mel", "mstft", "mfccd"):
            assert np.isfinite(row_[key])
    assert len(list(export_dir.iterdir())) == 6


def test_ssm_eval_input_validation(ssm_pair):
    _, val = ssm_pair
    est = PresetEstimator(EST_TINY, SPACE, 16000, seed=0)
    with pytest.raises(ValueError, match="render config"):
        ssm_eval(est, "/tmp/nowhere-at-all")
    wrong_synth = PresetEstimator(EST_TINY, fmtoy_space(), 16000, seed=0)
    with pytest.raises(ValueError, match="estimator infers"):
        ssm_eval(wrong_synth, val)
    slow = PresetEstimator(EST_TINY, SPACE, 8000, seed=0)
    with pytest.raises(ValueError, match="sample rate"):
        ssm_eval(slow, val)
    with pytest.raises(FileNotFoundError):
        ssm_eval(est, "/tmp/nowhere-at-all", render_cfg=RC)
