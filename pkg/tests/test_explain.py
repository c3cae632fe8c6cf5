import io
import warnings

import numpy as np
import pytest
from PIL import Image

from cellattn import explain
from cellattn import functional as F
from cellattn.models import build_model, mini_config
from cellattn.nn import Module, Parameter
from cellattn.tensor import Tensor

SHAPE = (3, 4, 5)


class LinearModel(Module):
    """logits = W @ flatten(x) + b"""

    def __init__(self, weight, bias):
        super().__init__()
        self.weight = Parameter(np.asarray(weight, dtype=np.float64))
        self.bias = Parameter(np.asarray(bias, dtype=np.float64))

    def forward(self, x):
        return F.dense(F.flatten(x), self.weight, self.bias)


class SplitLinearModel(LinearModel):
    """Same function as LinearModel, computed as relu(Wx) - relu(-Wx) + b."""

    def forward(self, x):
        z = F.dense(F.flatten(x), self.weight)
        return F.add(F.sub(F.relu(z), F.relu(F.mul(z, -1.0))), self.bias)


def _linear(seed=0, k=3, cls=LinearModel):
    rng = np.random.default_rng(seed)
    return cls(rng.standard_normal((k, int(np.prod(SHAPE)))), rng.standard_normal(k))


def _x(seed=1):
    return np.random.default_rng(seed).standard_normal(SHAPE)


@pytest.fixture(scope="module")
def small_model():
    return build_model(mini_config("rcan_densenet", input_size=32), dtype=np.float64).eval()


# -- integrated gradients -----------------------------------------------------

@pytest.mark.parametrize("steps", [1, 3, 50])
def test_ig_linear_model_is_exact(steps):
    model = _linear()
    x = _x()
    attr = explain.integrated_gradients(model, x, np.zeros(SHAPE), steps=steps, target=2)
    expected = model.weight.data[2].reshape(SHAPE) * x
    np.testing.assert_allclose(attr.attributions, expected, rtol=1e-12, atol=1e-14)
    assert attr.completeness_gap < 1e-10
    assert attr.target == 2 and attr.steps == steps


def test_ig_baseline_equal_to_input_gives_zero(small_model):
    x = np.random.default_rng(2).standard_normal(small_model.input_shape)
    attr = explain.integrated_gradients(small_model, x, x.copy(), steps=4)
    assert not np.any(attr.attributions)
    assert attr.completeness_gap == 0 and attr.relative_gap == 0


def test_ig_sensitivity_single_pixel(small_model):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(small_model.input_shape)
    baseline = x.copy()
    baseline[1, 10, 12] -= 2.0
    attr = explain.integrated_gradients(small_model, x, baseline, steps=8, target=0)
    assert attr.f_input != attr.f_baseline
    assert attr.attributions[1, 10, 12] != 0
    mask = np.ones(x.shape, dtype=bool)
    mask[1, 10, 12] = False
    assert not np.any(attr.attributions[mask])


def test_ig_implementation_invariance():
    a, b = _linear(4), _linear(4, cls=SplitLinearModel)
    x = _x(5)
    z = F.dense(F.flatten(Tensor(x[None], dtype=np.float64)), a.weight).data
    np.testing.assert_allclose(a(Tensor(x[None], dtype=np.float64)).data, b(Tensor(x[None], dtype=np.float64)).data)
    ia = explain.integrated_gradients(a, x, np.zeros(SHAPE), steps=16, target=1).attributions
    ib = explain.integrated_gradients(b, x, np.zeros(SHAPE), steps=16, target=1).attributions
    assert np.all(z != 0)
    assert np.abs(ia - ib).max() < 1e-6


def test_ig_gap_shrinks_with_steps(small_model):
    x = np.random.default_rng(6).standard_normal(small_model.input_shape)
    gaps = [explain.integrated_gradients(small_model, x, np.zeros_like(x), steps=m).completeness_gap
            for m in (4, 64)]
    assert gaps[1] < gaps[0]


def test_ig_default_target_is_prediction(small_model):
    x = np.random.default_rng(7).standard_normal(small_model.input_shape)
    attr = explain.integrated_gradients(small_model, x, np.zeros_like(x), steps=2)
    assert attr.target == explain.predict_class(small_model, x)


def test_ig_argument_checks(small_model):
    x = np.zeros(small_model.input_shape)
    with pytest.raises(ValueError):
        explain.integrated_gradients(small_model, x, x, steps=0)
    with pytest.raises(ValueError):
        explain.integrated_gradients(small_model, x, x[:, :4], steps=2)
    with pytest.raises(ValueError, match="out of range"):
        explain.integrated_gradients(small_model, x, x, steps=2, target=9)


def test_ig_batching_does_not_change_result(small_model):
    x = np.random.default_rng(8).standard_normal(small_model.input_shape)
    a = explain.integrated_gradients(small_model, x, np.zeros_like(x), steps=10, target=1, batch_size=3)
    b = explain.integrated_gradients(small_model, x, np.zeros_like(x), steps=10, target=1, batch_size=10)
    np.testing.assert_allclose(a.attributions, b.attributions, rtol=1e-10, atol=1e-14)


def test_report_text_fields():
    attr = explain.integrated_gradients(_linear(), _x(), np.zeros(SHAPE), steps=5, target=0,
                                        baseline_desc="zero")
    fields = dict(line.split("=", 1) for line in attr.report_text(predicted=1).splitlines())
    assert fields["target_class"] == "0" and fields["predicted_class"] == "1"
    assert fields["steps"] == "5" and fields["baseline"] == "zero"
    assert float(fields["completeness_gap"]) == attr.completeness_gap


# -- saliency -------------------------------------------------------------------

def test_saliency_of_linear_model_is_weight_row():
    model = _linear()
    for seed in (1, 2):
        g = explain.saliency(model, _x(seed), target=1)
        np.testing.assert_allclose(g, model.weight.data[1].reshape(SHAPE), rtol=1e-12)


def test_saliency_of_constant_head_is_zero():
    model = build_model(mini_config("densenet", input_size=32), dtype=np.float64).eval()
    model.classifier.weight.data[:] = 0
    g = explain.saliency(model, np.random.default_rng(0).standard_normal(model.input_shape), target=0)
    assert not np.any(g)


def test_saliency_is_small_step_ig_direction(small_model):
    rng = np.random.default_rng(9)
    x = rng.standard_normal(small_model.input_shape)
    u = rng.standard_normal(x.shape)
    delta = 1e-5
    ig = explain.integrated_gradients(small_model, x, x - delta * u, steps=1, target=3).attributions
    sal = explain.saliency(small_model, x, target=3)
    np.testing.assert_allclose(ig / (delta * u), sal, rtol=1e-3, atol=1e-6 * np.abs(sal).max())


# -- rendering ------------------------------------------------------------------

def _image(seed=0, size=(16, 12)):
    return np.random.default_rng(seed).uniform(size=(3,) + size)


def test_zero_attribution_renders_grayscale_with_warning():
    img = _image()
    with pytest.warns(UserWarning, match="all zero"):
        out = explain.render_array(img, np.zeros_like(img))
    gray = explain.to_uint8(explain.grayscale(img))
    for c in range(3):
        np.testing.assert_array_equal(out[..., c], gray)


def test_single_hot_pixel_saturates_once():
    img = _image()
    attr = np.zeros_like(img)
    attr[2, 5, 7] = -3.0
    h = explain.heatmap(attr)
    assert np.count_nonzero(h) == 1 and h[5, 7] == 1.0
    raw = explain.render_array(img, attr, mode="raw")
    assert np.count_nonzero(raw[..., 1] == 255) == 1 and raw[5, 7, 1] == 255
    assert not np.any(raw[..., [0, 2]])


def test_rendering_scale_invariant():
    img = _image(1)
    attr = np.random.default_rng(2).standard_normal(img.shape)
    for mode in ("overlay", "raw"):
        assert explain.render_overlay(img, attr, mode) == explain.render_overlay(img, 10 * attr, mode)


def test_heatmap_percentile_clips():
    attr = np.zeros((1, 10, 10))
    attr[0] = np.arange(100).reshape(10, 10)
    h = explain.heatmap(attr)
    scale = np.percentile(np.arange(100.0), 99)
    assert h.max() == 1.0 and h[9, 9] == 1.0
    assert h[0, 1] == pytest.approx(1 / scale)


def test_overlay_blend_formula():
    img = _image(3, (4, 4))
    attr = np.random.default_rng(4).standard_normal(img.shape)
    h = explain.heatmap(attr)
    gray = explain.grayscale(img)
    alpha = explain.OVERLAY_ALPHA * h
    out = explain.render_array(img, attr)
    np.testing.assert_array_equal(out[..., 0], explain.to_uint8((1 - alpha) * gray))
    np.testing.assert_array_equal(out[..., 1], explain.to_uint8((1 - alpha) * gray + alpha))


def test_rendered_png_decodes():
    img = _image()
    data = explain.render_overlay(img, np.ones_like(img))
    with Image.open(io.BytesIO(data)) as decoded:
        assert decoded.format == "PNG" and decoded.size == (12, 16) and decoded.mode == "RGB"
    with Image.open(io.BytesIO(explain.render_original(img))) as decoded:
        np.testing.assert_array_equal(np.asarray(decoded), explain.to_uint8(img.transpose(1, 2, 0)))


def test_render_checks_alignment_and_mode():
    img = _image()
    with pytest.raises(ValueError):
        explain.render_array(img, np.ones((3, 5, 5)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError):
            explain.render_array(img, np.ones_like(img), mode="signed")
