"""整条可微管线的有限差分检查。"""

import numpy as np
import pytest
from fake_scene import make_field, small_config

from wrfgs.scene import ConditioningInput
from wrfgs.scene.store import MU, OPACITY, ROT, SCALE, SIGNAL

TX = np.array([4.5, 2.5, 1.8])
EPS = 1e-6


def _numeric(loss, store, name, index):
    value = store.params[name]
    saved = value[index]
    value[index] = saved + EPS
    plus = loss()
    value[index] = saved - EPS
    minus = loss()
    value[index] = saved
    return (plus - minus) / (2 * EPS)


def _check(field, loss, analytic, name, indices):
    numeric = np.array([_numeric(loss, field.store, name, i) for i in indices])
    got = np.array([analytic.get(name, np.zeros_like(field.store.params[name]))[i] for i in indices])
    scale = max(np.max(np.abs(numeric)), 1e-12)
    np.testing.assert_allclose(got, numeric, rtol=1e-3, atol=1e-4 * scale, err_msg=name)


def _randomize_last_layer(field, prefix, rng, std=0.3):
    names = sorted(n for n in field.store.network_names() if n.startswith(prefix))
    last = max(int(n.split(".")[-2]) for n in names)
    for kind in ("weight", "bias"):
        key = f"{prefix}.{last}.{kind}"
        field.store.params[key] = rng.normal(0.0, std, field.store.params[key].shape)
    return f"{prefix}.{last}.weight"


def _visible_indices(render, rng, count=4):
    visible = np.flatnonzero(render.proj.valid)
    return [int(i) for i in rng.choice(visible, size=min(count, len(visible)), replace=False)]


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_spectrum_pipeline_gradients(pipeline):
    rng = np.random.default_rng(0)
    field = make_field(small_config(pipeline=pipeline), n=16)
    if pipeline == "wrfgsplus":
        layer = _randomize_last_layer(field, "deform", rng, std=0.05)
    else:
        layer = _randomize_last_layer(field, "scenario.signal", rng)
    cond = ConditioningInput.from_tx(TX)
    gp = rng.normal(size=(9, 36))

    def loss():
        return float(np.sum(gp * field.render(cond).power))

    render = field.render(cond)
    grads = render.backward(grad_power=gp)
    picks = _visible_indices(render, rng)

    _check(field, loss, grads, MU, [(i, k) for i in picks for k in range(3)])
    _check(field, loss, grads, SCALE, [(i, k) for i in picks for k in range(3)])
    _check(field, loss, grads, ROT, [(i, k) for i in picks for k in range(4)])
    _check(field, loss, grads, layer, [(0, 0), (1, 1), (2, 0)])
    if pipeline == "wrfgsplus":
        _check(field, loss, grads, OPACITY, picks)
        _check(field, loss, grads, SIGNAL, [(i, 0, k) for i in picks for k in range(2)])
    else:
        _check(field, loss, grads, "scenario.attenuation.0.weight", [(0, 0), (3, 2)])


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_complex_field_gradients(pipeline):
    rng = np.random.default_rng(1)
    field = make_field(small_config(pipeline=pipeline), n=16)
    cond = ConditioningInput.from_tx(TX)
    target = rng.normal(size=(9, 36, 1)) + 1j * rng.normal(size=(9, 36, 1))

    def loss():
        value = field.render(cond).rendered.complex_field
        return float(np.sum(np.abs(value - target) ** 2))

    render = field.render(cond)
    grads = render.backward(grad_field=2.0 * (render.rendered.complex_field - target))
    picks = _visible_indices(render, rng)
    _check(field, loss, grads, MU, [(i, k) for i in picks for k in range(3)])
    _check(field, loss, grads, SCALE, [(i, 0) for i in picks])


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_collapsed_pipeline_gradients(pipeline):
    rng = np.random.default_rng(2)
    field = make_field(small_config(task="csi", pipeline=pipeline), n=16)
    if pipeline == "wrfgsplus":
        layer = _randomize_last_layer(field, "deform", rng, std=0.05)
    else:
        layer = _randomize_last_layer(field, "scenario.signal", rng)
    uplink = rng.normal(size=26) + 1j * rng.normal(size=26)
    cond = ConditioningInput.from_uplink(uplink)
    target = rng.normal(size=26) + 1j * rng.normal(size=26)

    def loss():
        return float(np.sum(np.abs(field.render_collapsed(cond).value - target) ** 2))

    render = field.render_collapsed(cond)
    grads = render.backward(2.0 * (render.value - target))
    _check(field, loss, grads, layer, [(0, 0), (2, 3), (4, 1)])
    _check(field, loss, grads, MU, [(i, k) for i in (0, 5, 9) for k in range(3)])
    if pipeline == "wrfgsplus":
        _check(field, loss, grads, OPACITY, [0, 5, 9])
