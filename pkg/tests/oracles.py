"""Independent oracles used to freeze expected values in the test suite.

Nothing here touches the reverse-mode machinery under test: gradients come
from central finite differences over repeated forward evaluations, KL
values from Monte Carlo sampling of the defining integrals, and raster
checks from per-pixel membership loops.
"""

from __future__ import annotations

import math

import numpy as np

from feddva.autodiff import Tensor


def finite_diff_grads(loss_fn, params, h=1e-4):
    """Central-difference gradient of loss_fn() w.r.t. each param tensor.

    loss_fn takes no arguments and must recompute the forward pass from the
    params' current data. Returns one array per param.
    """
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().item()
            flat[i] = keep - h
            down = loss_fn().item()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries of all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(loss_fn, params, h=1e-4, tol=1e-4):
    """Run loss_fn forward+backward and compare grads against central differences."""
    from feddva.autodiff import backward, zero_grads

    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    zero_grads(params)
    numeric = finite_diff_grads(loss_fn, params, h=h)
    err = max_rel_error(analytic, numeric)
    return err, err < tol


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ------------------------------------------------------------- Gaussian MC


def diag_gauss_logpdf(x, mu, sigma):
    """log N(x; mu, diag(sigma^2)) for x [n, d], mu/sigma [d]."""
    z = (x - mu) / sigma
    return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigma)) \
        - 0.5 * x.shape[1] * math.log(2.0 * math.pi)


def mc_kl_between_gaussians(mu_i, sigma_i, mu_j, sigma_j, n_samples, rng):
    """Monte-Carlo KL(N_i || N_j) with its standard error."""
    x = mu_i + sigma_i * rng.standard_normal((n_samples, mu_i.shape[0]))
    vals = diag_gauss_logpdf(x, mu_i, sigma_i) - diag_gauss_logpdf(x, mu_j, sigma_j)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def mixture_logpdf(x, mus, sigmas):
    """log of the uniform mixture of diagonal Gaussians at each row of x."""
    n_comp = mus.shape[0]
    comp = np.stack([diag_gauss_logpdf(x, mus[k], sigmas[k]) for k in range(n_comp)])
    m = comp.max(axis=0)
    return m + np.log(np.mean(np.exp(comp - m), axis=0))


def mc_kl_to_mixture(mu_i, sigma_i, mus, sigmas, n_samples, rng):
    """Monte-Carlo KL(N_i || uniform mixture of components) with standard error."""
    x = mu_i + sigma_i * rng.standard_normal((n_samples, mu_i.shape[0]))
    vals = diag_gauss_logpdf(x, mu_i, sigma_i) - mixture_logpdf(x, mus, sigmas)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def mc_kl_mixture_to_standard(mus, sigmas, n_samples, rng):
    """Monte-Carlo KL(uniform mixture || N(0, I)) with standard error."""
    n_comp, d = mus.shape
    picks = rng.integers(0, n_comp, size=n_samples)
    x = mus[picks] + sigmas[picks] * rng.standard_normal((n_samples, d))
    vals = mixture_logpdf(x, mus, sigmas) \
        - diag_gauss_logpdf(x, np.zeros(d), np.ones(d))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


# ------------------------------------------------------------- rasterizers


def sinusoid_pixels(height, width, amplitude, frequency, phase, thickness,
                    vertical=False):
    """Per-pixel membership loop for the sinusoidal mark band."""
    marked = np.zeros((height, width), dtype=bool)
    if vertical:
        center = (width - 1) / 2.0
        for i in range(height):
            curve = center + amplitude * math.sin(
                2.0 * math.pi * frequency * i / height + phase)
            for j in range(width):
                if abs(j - curve) <= thickness / 2.0:
                    marked[i, j] = True
    else:
        center = (height - 1) / 2.0
        for j in range(width):
            curve = center + amplitude * math.sin(
                2.0 * math.pi * frequency * j / width + phase)
            for i in range(height):
                if abs(i - curve) <= thickness / 2.0:
                    marked[i, j] = True
    return marked


def ellipse_pixels(height, width, ry, rx, thickness):
    """Per-pixel membership loop for the elliptical boundary band."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    band = thickness / (2.0 * min(rx, ry))
    marked = np.zeros((height, width), dtype=bool)
    for i in range(height):
        for j in range(width):
            r = math.sqrt(((i - cy) / ry) ** 2 + ((j - cx) / rx) ** 2)
            if abs(r - 1.0) <= band:
                marked[i, j] = True
    return marked


def dataset_mean_bce(images):
    """Mean per-image BCE of predicting the dataset mean image everywhere."""
    flat = images.reshape(images.shape[0], -1)
    p = np.clip(flat.mean(axis=0), 1e-12, 1.0 - 1e-12)
    bce = -(flat * np.log(p) + (1.0 - flat) * np.log(1.0 - p)).sum(axis=1)
    return float(bce.mean())
