from __future__ import annotations

import numpy as np
import pytest

from synthproxy.nn import Adam, Tensor, cosine_restart_lr
from synthproxy.nn.checkpoint import (
    CheckpointChecksumError,
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from synthproxy.nn.layers import Linear


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def test_adam_first_step_has_lr_magnitude():
    # with fresh moments the first update is lr * g / (|g| + eps) ~= lr * sign(g)
    p = Tensor(np.zeros(4, dtype=np.float64), requires_grad=True)
    opt = Adam([p])
    p.grad = np.array([1.0, -2.0, 0.5, -0.1])
    opt.step(lr=0.01)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(p.grad), rtol=1e-6)


def test_adam_converges_on_quadratic():
    target = np.array([1.0, -2.0, 3.0])
    p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    opt = Adam([p])
    for _ in range(500):
        opt.zero_grad()
        loss = ((p - Tensor(target)) ** 2.0).sum()
        loss.backward()
        opt.step(lr=0.05)
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_adam_zero_grad_and_step_count():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p])
    p.grad = np.ones(2, dtype=p.data.dtype)
    opt.step(lr=0.1)
    assert opt.step_count == 1
    opt.zero_grad()
    assert p.grad is None


def test_adam_bias_correction_matches_reference():
    # one parameter, three steps with constant gradient, checked against the
    # textbook update rule evaluated by hand
    g = 0.3
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p])
    m = v = 0.0
    x = 0.0
    for t in range(1, 4):
        p.grad = np.array([g])
        opt.step(lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x -= lr * mh / (np.sqrt(vh) + eps)
        np.testing.assert_allclose(p.data[0], x, rtol=1e-6)


def test_adam_skips_parameters_without_grads():
    p, q = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p, q])
    p.grad = np.ones(2, dtype=p.data.dtype)
    opt.step(lr=0.1)
    np.testing.assert_array_equal(q.data, np.ones(2))
    assert not np.allclose(p.data, np.ones(2))


def test_cosine_restart_boundary_values():
    base, floor = 1e-3, 2e-6
    total, restart = 30, 10
    lrs = [
        cosine_restart_lr(e, total_epochs=total, base_lr=base, min_lr=floor, restart_epoch=restart)
        for e in range(total)
    ]
    assert lrs[0] == pytest.approx(base)
    assert lrs[restart] == pytest.approx(base)  # warm restart snaps back to base
    assert min(lrs) == pytest.approx(floor)
    assert lrs[-1] == pytest.approx(floor)  # final epoch sits exactly at the floor
    assert int(np.argmin(lrs)) == total - 1
    # each phase decays monotonically
    assert all(a >= b for a, b in zip(lrs[:restart], lrs[1:restart]))
    assert all(a >= b for a, b in zip(lrs[restart:], lrs[restart + 1 :]))


def test_cosine_restart_midpoint():
    # halfway through the second phase the cosine passes through the midpoint
    base, floor = 1.0, 0.0
    total, restart = 23, 2
    mid = restart + (total - 1 - restart) // 2
    lr = cosine_restart_lr(mid, total_epochs=total, base_lr=base, min_lr=floor, restart_epoch=restart)
    assert lr == pytest.approx(0.5 * (base + floor))


def test_cosine_restart_degenerates_to_single_phase():
    lrs = [
        cosine_restart_lr(e, total_epochs=5, base_lr=1.0, min_lr=0.0, restart_epoch=0)
        for e in range(5)
    ]
    assert lrs[0] == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(0.0)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_restart_validates_epoch():
    with pytest.raises(ValueError):
        cosine_restart_lr(30, total_epochs=30)
    with pytest.raises(ValueError):
        cosine_restart_lr(-1, total_epochs=30)


def test_checkpoint_round_trip(tmp_path):
    lin = Linear(3, 2, _rng(0))
    path = tmp_path / "model.spck"
    save_checkpoint(path, {"epoch": 3, "val_l1": 0.25}, lin.state_dict())
    header, state = load_checkpoint(path)
    assert header["epoch"] == 3 and header["val_l1"] == 0.25
    assert header["format"] == "SPCK1"
    assert set(state) == {"weight", "bias"}
    for name, arr in lin.state_dict().items():
        np.testing.assert_array_equal(state[name], arr)
        assert state[name].dtype == np.float32


def test_checkpoint_casts_payload_to_float32(tmp_path):
    path = tmp_path / "m.spck"
    values = np.array([0.1, 0.2, 0.3])
    save_checkpoint(path, {}, {"w": values})
    _, state = load_checkpoint(path)
    assert state["w"].dtype == np.float32
    np.testing.assert_array_equal(state["w"], values.astype(np.float32))


def test_checkpoint_header_corruption_detected(tmp_path):
    path = tmp_path / "model.spck"
    save_checkpoint(path, {"epoch": 1}, Linear(3, 2, _rng(0)).state_dict())
    raw = bytearray(path.read_bytes())
    raw[12] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(path)


def test_checkpoint_payload_corruption_detected(tmp_path):
    path = tmp_path / "model.spck"
    save_checkpoint(path, {}, Linear(3, 2, _rng(0)).state_dict())
    raw = bytearray(path.read_bytes())
    raw[-2] ^= 0x01  # flip a tensor payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "model.spck"
    save_checkpoint(path, {}, Linear(3, 2, _rng(0)).state_dict())
    raw = path.read_bytes()
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises((CheckpointFormatError, CheckpointChecksumError)):
        load_checkpoint(path)
