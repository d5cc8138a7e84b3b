"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest

from vesselseg.nn import GradTape, Tensor, backward


# ---------------------------------------------------------------------------
# Independent oracles (kept deliberately naive; they never share code with the
# implementation paths they check)


def direct_conv(x, w, b, stride, pad):
    """Nested-loop cross-correlation oracle."""
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[co])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(w[co, ci, u, v]) * \
                                    xp[n, ci, i * stride + u, j * stride + v]
                    out[n, co, i, j] = acc
    return out


def direct_max_pool(x, window, stride):
    bs, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((bs, c, ho, wo), dtype=x.dtype)
    for n in range(bs):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[n, ch, i, j] = x[n, ch,
                                         i * stride:i * stride + window,
                                         j * stride:j * stride + window].max()
    return out


def direct_bilinear_upsample(x, factor):
    """Closed-form half-pixel-centers interpolation evaluated per output site."""
    bs, c, h, w = x.shape
    out = np.zeros((bs, c, h * factor, w * factor), dtype=np.float64)
    for i in range(h * factor):
        sr = min(max((i + 0.5) / factor - 0.5, 0.0), h - 1.0)
        r0 = int(np.floor(sr))
        r1 = min(r0 + 1, h - 1)
        tr = sr - r0
        for j in range(w * factor):
            sc = min(max((j + 0.5) / factor - 0.5, 0.0), w - 1.0)
            c0 = int(np.floor(sc))
            c1 = min(c0 + 1, w - 1)
            tc = sc - c0
            out[:, :, i, j] = ((1 - tr) * (1 - tc) * x[:, :, r0, c0]
                               + (1 - tr) * tc * x[:, :, r0, c1]
                               + tr * (1 - tc) * x[:, :, r1, c0]
                               + tr * tc * x[:, :, r1, c1])
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def gradient_check(make_loss, arrays, h=1e-3, tol=1e-4):
    """Compare tape gradients (float32 path) against central differences of the
    float64-recomputed loss.

    ``make_loss(tensors: dict[str, Tensor]) -> scalar Tensor`` must rebuild the
    computation from scratch on every call. Relative error is measured per
    tensor against the larger of the two gradient magnitudes.
    """
    t32 = {k: Tensor(v.astype(np.float32), requires_grad=True)
           for k, v in arrays.items()}
    with GradTape() as tape:
        loss = make_loss(t32)
        grads = backward(tape, loss)

    def loss64(perturbed):
        tensors = {k: Tensor(perturbed[k]) for k in arrays}
        return float(make_loss(tensors))

    worst = 0.0
    for key, base in arrays.items():
        analytic = np.asarray(grads[t32[key]], dtype=np.float64)
        work = {k: v.astype(np.float64).copy() for k, v in arrays.items()}
        numeric = np.zeros_like(work[key])
        flat = work[key].reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss64(work)
            flat[i] = orig - h
            down = loss64(work)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
        scale = max(np.abs(analytic).max(initial=0.0),
                    np.abs(numeric).max(initial=0.0), 1e-6)
        err = np.abs(analytic - numeric).max(initial=0.0) / scale
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst


def away_from_zero(arr, margin=0.05):
    """Shift entries out of the (-margin, margin) band, away from relu kinks."""
    out = np.asarray(arr).copy()
    small = np.abs(out) < margin
    out[small] = np.sign(out[small] + 1e-12) * (np.abs(out[small]) + margin)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
