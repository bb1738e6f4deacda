"""Analytic gradients against central differences."""

import numpy as np
import pytest

from pdfembed.encoder import ModelConfig, backward, init_params
from pdfembed.objectives import NAMES, ObjectiveSpec, loss_and_grad, targets_for

SMALL = ModelConfig(num_layers=1, embed_dim=16, num_heads=4)
STEP = 1e-4


def central_difference_check(cfg, spec, n_params=100, seed=0, reduction="mean"):
    """Worst ``|analytic - numeric| / max(1, |numeric|)`` over sampled scalars."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # move away from the symmetric initialisation so every path carries signal
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    real = rng.uniform(size=(6, 1, 16, 16))
    gen = rng.uniform(size=(6, 1, 16, 16))
    batch = (real, gen, np.arange(6))
    _, grads = backward(params, cfg, batch, spec, reduction)
    index = params.flat_index()
    worst = 0.0
    for p in rng.choice(len(index), n_params, replace=False):
        name, i = index[p]
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + STEP
        lp, _ = backward(params, cfg, batch, spec, reduction)
        flat[i] = old - STEP
        lm, _ = backward(params, cfg, batch, spec, reduction)
        flat[i] = old
        numeric = (lp - lm) / (2 * STEP)
        worst = max(worst, abs(grads[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric)))
    return worst


@pytest.mark.parametrize("name", NAMES)
def test_encoder_gradients(name):
    assert central_difference_check(SMALL, ObjectiveSpec.from_name(name)) < 1e-4


def test_sum_reduction_gradients():
    assert central_difference_check(SMALL, ObjectiveSpec.from_name("kl-gauss"), 40, reduction="sum") < 1e-4


def test_two_layer_gradients():
    cfg = ModelConfig(num_layers=2, embed_dim=8, num_heads=2, patch_size=8)
    assert central_difference_check(cfg, ObjectiveSpec.from_name("labelsmooth"), 60, seed=3) < 1e-4


def test_duplicate_pair_doubles_gradient_under_sum():
    rng = np.random.default_rng(1)
    params = init_params(SMALL, 1)
    r = rng.uniform(size=(1, 1, 16, 16))
    g = rng.uniform(size=(1, 1, 16, 16))
    spec = ObjectiveSpec.from_name("kl-exp")
    l1, g1 = backward(params, SMALL, (r, g, [3]), spec, "sum")
    l2, g2 = backward(params, SMALL, (np.concatenate([r, r]), np.concatenate([g, g]), [3, 3]), spec, "sum")
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-14)


def test_vector_gradients_vanish_at_kl_minimum():
    # With the softmax of the cosines already equal to the target, dL/dv = 0.
    spec = ObjectiveSpec("kl", "gaussian", 0.5)
    t = targets_for(spec, [2], 5)[0]
    logits = np.log(t) * spec.tau
    h = logits - logits.max() + 1.0 - 1e-3  # shift into [-1, 1]; softmax ignores shifts
    assert np.all(np.abs(h) <= 1)
    vr = np.zeros((1, 6, 2))
    vr[..., 0] = 1.0
    vg = np.stack([h, np.sqrt(1 - h * h)], axis=-1)[None]
    loss, dvr, dvg = loss_and_grad(vr, vg, [2], spec, 5)
    assert loss == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(dvr, 0.0, atol=1e-8)
    np.testing.assert_allclose(dvg, 0.0, atol=1e-8)
