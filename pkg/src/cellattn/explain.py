"""Integrated gradients, plain gradient saliency and heatmap rendering.

Attributions are taken with respect to the pre-softmax logit of the target
class. The path integral from the baseline to the input is approximated with
the midpoint rule; the completeness gap |sum(attr) - (F(x) - F(baseline))| is
recorded with every result.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from cellattn.tensor import NonFiniteError, Tensor, gradient

OVERLAY_ALPHA = 0.6
NORM_PERCENTILE = 99


def _logit_fn(model):
    if hasattr(model, "logits"):
        return model.logits
    return model


def _eval_mode(model):
    if hasattr(model, "eval"):
        model.eval()


def _dtype_of(model, x):
    if hasattr(model, "parameters"):
        params = model.parameters()
        if params:
            return params[0].dtype
    return np.asarray(x).dtype


def _logits_and_grads(model, points, target):
    """Target logits and d(logit)/d(input) for a batch of inputs (eval mode, so
    samples do not interact)."""
    fn = _logit_fn(model)
    x = Tensor(points, requires_grad=True)
    logits = fn(x)
    k = logits.shape[1]
    if not 0 <= target < k:
        raise ValueError(f"target class {target} out of range [0, {k})")
    seed = np.zeros(logits.shape, dtype=logits.dtype)
    seed[:, target] = 1
    (g,) = gradient(logits, [x], seed=seed)
    return logits.data[:, target].astype(np.float64), g


def predict_class(model, x):
    _eval_mode(model)
    x = np.asarray(x, dtype=_dtype_of(model, x))[None]
    return int(np.argmax(_logit_fn(model)(Tensor(x)).data[0]))


@dataclass
class AttributionMap:
    attributions: np.ndarray  # same shape as the input, signed
    target: int
    baseline: str
    steps: int
    f_input: float
    f_baseline: float
    completeness_gap: float

    @property
    def delta(self):
        return self.f_input - self.f_baseline

    @property
    def relative_gap(self):
        d = abs(self.delta)
        return self.completeness_gap / d if d > 0 else float("inf") if self.completeness_gap else 0.0

    def report_text(self, predicted=None):
        lines = [f"target_class={self.target}"]
        if predicted is not None:
            lines.append(f"predicted_class={predicted}")
        lines += [f"steps={self.steps}",
                  f"baseline={self.baseline}",
                  f"logit_input={self.f_input:.17g}",
                  f"logit_baseline={self.f_baseline:.17g}",
                  f"attribution_sum={float(self.attributions.sum()):.17g}",
                  f"completeness_gap={self.completeness_gap:.17g}",
                  f"relative_gap={self.relative_gap:.17g}"]
        return "\n".join(lines) + "\n"


def integrated_gradients(model, x, baseline, steps=50, target=None, batch_size=32, baseline_desc="custom"):
    """Integrated gradients of the target logit for one input of shape (C, H, W).

    IG_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF(x' + (k - 1/2)/m * (x - x'))/dx_i.
    Gradients are summed in ascending k. ``target`` defaults to the predicted class.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _eval_mode(model)
    dtype = _dtype_of(model, x)
    x = np.asarray(x, dtype=dtype)
    baseline = np.asarray(baseline, dtype=dtype)
    if baseline.shape != x.shape:
        raise ValueError(f"baseline shape {baseline.shape} does not match input {x.shape}")
    if target is None:
        target = predict_class(model, x)
    diff = x - baseline
    alphas = (np.arange(1, steps + 1, dtype=np.float64) - 0.5) / steps
    total = np.zeros(x.shape, dtype=np.float64)
    for start in range(0, steps, batch_size):
        a = alphas[start:start + batch_size].astype(dtype).reshape(-1, *([1] * x.ndim))
        points = baseline[None] + a * diff[None]
        _, grads = _logits_and_grads(model, points, target)
        if not np.isfinite(grads).all():
            raise NonFiniteError("integrated_gradients", f"path points {start}..{start + len(a) - 1}")
        for g in grads:
            total += g
    attributions = diff.astype(np.float64) * total / steps
    ends, _ = _logits_and_grads(model, np.stack([x, baseline]), target)
    f_x, f_b = float(ends[0]), float(ends[1])
    gap = abs(float(attributions.sum()) - (f_x - f_b))
    return AttributionMap(attributions, int(target), baseline_desc, int(steps), f_x, f_b, gap)


def saliency(model, x, target=None):
    """Gradient of the target logit with respect to the input at ``x``."""
    _eval_mode(model)
    x = np.asarray(x, dtype=_dtype_of(model, x))
    if target is None:
        target = predict_class(model, x)
    _, g = _logits_and_grads(model, x[None], target)
    return g[0].astype(np.float64)


def gradient_map(model, x, target=None, baseline_desc="none"):
    """Saliency wrapped as an :class:`AttributionMap` for rendering."""
    g = saliency(model, x, target)
    return AttributionMap(g, -1 if target is None else int(target), baseline_desc, 0, float("nan"),
                          float("nan"), float("nan"))


# -- rendering ----------------------------------------------------------------

def heatmap(attributions):
    """Per-pixel magnitude (sum of |attr| over channels) scaled to [0, 1].

    The scale is the 99th percentile of the magnitudes, or their maximum when
    that percentile is zero (very sparse maps). Values above it are clipped.
    """
    mag = np.abs(np.asarray(attributions, dtype=np.float64)).sum(axis=0)
    scale = np.percentile(mag, NORM_PERCENTILE)
    if scale <= 0:
        scale = mag.max()
    if scale <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / scale, 0.0, 1.0)


def to_uint8(a):
    return np.clip(np.rint(np.asarray(a) * 255), 0, 255).astype(np.uint8)


def grayscale(image):
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def render_array(image, attribution, mode="overlay"):
    """RGB uint8 array (H, W, 3) for ``attribution`` drawn as a green heatmap.

    ``overlay`` blends the heatmap over the grayscale image with per-pixel
    alpha 0.6 * intensity; ``raw`` shows the heatmap on black.
    """
    attr = attribution.attributions if isinstance(attribution, AttributionMap) else attribution
    image = np.asarray(image)
    if attr.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"attribution {attr.shape} is not aligned with image {image.shape}")
    if not np.any(attr):
        warnings.warn("attribution map is all zero; rendering the plain image")
    h = heatmap(attr)
    green = np.zeros(h.shape + (3,))
    green[..., 1] = h
    if mode == "raw":
        return to_uint8(green)
    if mode != "overlay":
        raise ValueError(f"mode must be 'overlay' or 'raw', got {mode!r}")
    gray = np.repeat(grayscale(image)[..., None], 3, axis=2)
    alpha = (OVERLAY_ALPHA * h)[..., None]
    return to_uint8((1 - alpha) * gray + alpha * np.array([0.0, 1.0, 0.0]))


def encode_png(arr):
    buf = io.BytesIO()
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


def render_overlay(image, attribution, mode="overlay"):
    """PNG bytes of :func:`render_array`."""
    return encode_png(render_array(image, attribution, mode))


def render_original(image):
    """PNG bytes of an RGB image in [0, 1], shape (3, H, W)."""
    return encode_png(to_uint8(np.asarray(image).transpose(1, 2, 0)))
