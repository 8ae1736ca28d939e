import numpy as np
import pytest
from sklearn.base import clone

from diffedit.denoiser import (NULL_LABEL, ConditionalDenoiser, LabelError, NumericError, TrainConfig,
                               forward, init_params, predict_eps, train_step)
from diffedit.numerics import ops
from diffedit.numerics.rng import RngStream
from diffedit.numerics.tensor import Tensor
from diffedit.schedule import linear_schedule
from helpers import central_diff, rel_err


def test_predict_eps_pure_and_shape_preserving(tiny_params):
    z = RngStream(0).gaussian((5, 3))
    a = predict_eps(tiny_params, z, 7, 1)
    b = predict_eps(tiny_params, z, 7, 1)
    assert np.array_equal(a, b) and a.shape == (5, 3)
    assert predict_eps(tiny_params, z[0], 7, 1).shape == (3,)
    assert np.allclose(predict_eps(tiny_params, z[0], 7, 1), a[0], atol=1e-14)


def test_labels_validated(tiny_params):
    z = np.zeros(3)
    with pytest.raises(LabelError):
        predict_eps(tiny_params, z, 5, 3)
    with pytest.raises(LabelError):
        predict_eps(tiny_params, z, 5, -2)
    predict_eps(tiny_params, z, 5, None)  # null label is valid
    predict_eps(tiny_params, np.zeros((2, 3)), 5, np.array([NULL_LABEL, 2]))


def test_class_embedding_has_null_row():
    p = init_params((4,), num_classes=7, width=8, depth=1)
    assert p.weights["class_embed"].shape[0] == 8


def test_zero_head_baseline_loss_is_one_per_coordinate():
    p = init_params((64,), num_classes=2, width=16, depth=1)
    s = linear_schedule(100)
    z0 = RngStream(1).gaussian((4096, 64))
    loss = train_step(p, (z0, np.zeros(4096, dtype=int)), s, RngStream(2), TrainConfig())
    assert loss == pytest.approx(1.0, abs=0.01)


def _fixed_loss(params, weights, zt, t, y, eps):
    return ops.tmean(ops.square(forward(params, weights, zt, t, y) - eps))


def test_training_loss_gradient_matches_finite_differences(tiny_params):
    r = RngStream(5, 5)
    s = linear_schedule(100)
    B = 6
    z0, eps = r.gaussian((B, 3)), r.gaussian((B, 3))
    t = r.integers(1, 101, size=B)
    y = np.array([0, 1, 2, NULL_LABEL, 1, 0])
    ab = s.alpha_bar(t)[:, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    traced = tiny_params.traced()
    grads = ops.backward(_fixed_loss(tiny_params, traced, zt, t, y, eps), traced)
    worst = 0.0
    for k, w in tiny_params.weights.items():
        fd = central_diff(lambda: float(_fixed_loss(tiny_params, tiny_params.weights, zt, t, y, eps).data), w)
        worst = max(worst, rel_err(grads[k], fd) if np.abs(fd).max() > 1e-7 else np.abs(grads[k]).max())
    assert worst < 1e-4


def test_full_dropout_zeroes_class_gradients(tiny_params):
    s = linear_schedule(100)
    captured = {}

    class Spy:
        def step(self, params, grads):
            captured.update(grads)

    cfg = TrainConfig(p_uncond=1.0)
    train_step(tiny_params, (RngStream(3).gaussian((16, 3)), np.arange(16) % 3), s, RngStream(4), cfg, Spy())
    ce = captured["class_embed"]
    assert np.array_equal(ce[:-1], np.zeros_like(ce[:-1]))
    assert np.abs(ce[-1]).max() > 0


def test_label_dropout_frequency():
    r = RngStream(9, 1)
    frac = r.bernoulli(0.2, 10_000).mean()
    assert abs(frac - 0.2) < 0.012


def test_nonfinite_loss_aborts_with_diagnostics(tiny_params):
    tiny_params.weights["out.b"][:] = np.inf
    with pytest.raises(NumericError) as info:
        train_step(tiny_params, (np.zeros((2, 3)), np.zeros(2, dtype=int)), linear_schedule(10),
                   RngStream(0), TrainConfig())
    assert "t" in info.value.diagnostics


def _mixture(n, seed):
    r = RngStream(seed, 7)
    y = np.arange(n) % 2
    z = np.where(y[:, None] == 0, [-1.0, 1.0], [1.5, -0.5]) + 0.2 * r.gaussian((n, 2))
    return z, y


def test_training_reduces_loss_and_separates_labels():
    z, y = _mixture(512, 0)
    den = ConditionalDenoiser(num_classes=2, width=32, depth=2, T=50, batch_size=64, epochs=63,
                              learning_rate=3e-3, random_state=0).fit(z, y)
    L = np.asarray(den.loss_history_)
    assert len(L) >= 500
    k = len(L) // 10
    assert np.median(L[-k:]) < np.median(L[:k])
    probe = RngStream(1).gaussian((32, 2))
    gap = np.linalg.norm(den.predict_eps(probe, 10, np.zeros(32, int)) - den.predict_eps(probe, 10, np.ones(32, int)))
    assert gap > 0


def test_estimator_surface():
    den = ConditionalDenoiser(width=16, epochs=1)
    assert den.get_params()["width"] == 16
    c = clone(den)
    assert c.get_params() == den.get_params() and c is not den
    with pytest.raises(ValueError):
        den.fit(np.zeros((3, 2)), np.zeros(4, dtype=int))
    with pytest.raises(LabelError):
        den.fit(np.zeros((3, 2)), np.array([0, 1, 9]))


def test_params_copy_is_independent(tiny_params):
    c = tiny_params.copy()
    c.weights["in.w"][0, 0] += 1.0
    assert c.weights["in.w"][0, 0] != tiny_params.weights["in.w"][0, 0]


def test_tensor_input_returns_tensor(tiny_params):
    out = predict_eps(tiny_params, Tensor(np.zeros((2, 3))), 3, 0)
    assert isinstance(out, Tensor)
