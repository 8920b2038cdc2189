"""Independent reference implementations used as test oracles."""
from fractions import Fraction

import numpy as np


def recount(true_labels, p_spoof, threshold):
    """Brute-force rates with exact rational arithmetic; None where undefined."""
    t = np.asarray(true_labels)
    rejected = np.asarray(p_spoof) >= threshold
    live, spoof = t == "live", t == "spoof"
    tp = int(np.sum(live & ~rejected))
    fn = int(np.sum(live & rejected))
    tn = int(np.sum(spoof & rejected))
    fp = int(np.sum(spoof & ~rejected))
    frac = lambda a, b: Fraction(a, b) if b else None
    apcer = frac(fp, fp + tn)
    npcer = frac(fn, fn + tp)
    return {
        "counts": (tp, fn, tn, fp),
        "apcer": apcer,
        "npcer": npcer,
        "far": apcer,
        "frr": npcer,
        "acer": (apcer + npcer) / 2 if apcer is not None and npcer is not None else None,
        "accuracy": frac(tp + tn, len(t)),
        "f1": frac(2 * tp, 2 * tp + fp + fn),
    }


def five_numbers(values):
    v = np.asarray(values, dtype=np.float64)
    return [float(np.min(v)), *[float(np.percentile(v, q, method="linear")) for q in (25, 50, 75)], float(np.max(v))]


def gram_reference(f):
    """Gram by explicit loops over channel pairs."""
    c, h, w = f.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = sum(f[i, y, x] * f[j, y, x] for y in range(h) for x in range(w))
    return g / (c * h * w)


def tv_reference(x):
    """Sum of squared neighbour differences per image, divided by H*W."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros(n)
    for b in range(n):
        s = 0.0
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    if i + 1 < h:
                        s += (x[b, ch, i + 1, j] - x[b, ch, i, j]) ** 2
                    if j + 1 < w:
                        s += (x[b, ch, i, j + 1] - x[b, ch, i, j]) ** 2
        out[b] = s / (h * w)
    return out


def central_differences(fn, x, h=1e-6):
    """Numerical gradient of a per-sample loss ``fn`` ((N,...) -> (N,)) at a single input ``x`` (1,...).

    All 2*D perturbed copies are evaluated in batches, so ``fn`` must treat
    samples independently.
    """
    import torch

    d = x.numel()
    eye = torch.eye(d, dtype=x.dtype).reshape(d, *x.shape[1:]) * h
    grads = []
    for chunk in torch.split(eye, 128):
        plus = fn(x + chunk)
        minus = fn(x - chunk)
        grads.append((plus - minus) / (2 * h))
    return torch.cat(grads).reshape(x.shape)


def max_relative_error(analytic, numeric, floor=1e-8):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor * max|a|)."""
    import torch

    a, n = analytic.flatten(), numeric.flatten()
    scale = torch.maximum(a.abs(), n.abs()).clamp_min(floor * a.abs().max().item() + 1e-300)
    return float(((a - n).abs() / scale).max())


def loss_gradient_error(kind, extractor, seed, size=8, coords=None):
    """Max relative error between autograd and central differences for one loss at one random input.

    ``extractor`` must be in float64. ``kind`` is "content", "style" or "tv".
    With ``coords`` set, only that many randomly chosen input coordinates are
    differenced, plus the directional derivative along one random direction
    (which involves every coordinate); otherwise the full gradient is compared.
    """
    import torch

    from userfas.style import STYLE_LAYERS, content_loss, style_grams, style_loss, tv_loss

    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64)
    other = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64)
    if kind == "content":
        target = extractor.features(other, ["relu3_3"])["relu3_3"]
        fn = lambda z: content_loss(z, None, extractor, reduction="none", target_features=target)
    elif kind == "style":
        grams = style_grams(other, extractor, STYLE_LAYERS)
        fn = lambda z: style_loss(z, grams, extractor, reduction="none")
    elif kind == "tv":
        fn = lambda z: tv_loss(z, reduction="none")
    else:
        raise ValueError(kind)
    xg = x.clone().requires_grad_(True)
    fn(xg).sum().backward()
    analytic = xg.grad
    with torch.no_grad():
        if coords is None:
            return max_relative_error(analytic, central_differences(fn, x))
        h = 1e-6
        idx = torch.randperm(x.numel(), generator=g)[:coords]
        steps = torch.zeros(coords + 1, x.numel(), dtype=x.dtype)
        steps[torch.arange(coords), idx] = 1.0
        direction = torch.randn(x.numel(), generator=g, dtype=x.dtype)
        steps[coords] = direction / direction.norm()
        steps = steps.reshape(coords + 1, *x.shape[1:])
        numeric = (fn(x + h * steps) - fn(x - h * steps)) / (2 * h)
        expected = (analytic * steps).flatten(1).sum(1)
    return max_relative_error(expected, numeric)
