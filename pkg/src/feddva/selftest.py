"""Fast invariant suite behind the `selftest` CLI command.

Each check re-derives its expected values independently (finite
differences, Monte Carlo, hand arithmetic) and prints one pass/fail line.
Budget is well under a minute. KL checks resolve the functions through
the gaussians module at call time, so a corrupted formula is caught even
if patched in after import.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import gaussians
from .autodiff import Tensor, backward, zero_grads
from .config import ExperimentConfig
from .federation import aggregate
from .losses import loss_feddva
from .model import ArchitectureConfig, DvaModel


def _finite_diff(loss_fn, params, h=1e-4):
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().item()
            flat[i] = keep - h
            down = loss_fn().item()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _grad_ok(loss_fn, params, tol=1e-4):
    zero_grads(params)
    backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    zero_grads(params)
    numeric = _finite_diff(loss_fn, params)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst < tol, f"max rel err {worst:.2e}"


def check_op_gradients():
    rng = np.random.default_rng(0)
    for kind in ad.OP_TABLE:
        for _ in range(3):
            if kind == "matmul":
                args = [Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True),
                        Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)]
            elif kind == "concat-last-axis":
                args = [Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True),
                        Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)]
            elif kind == "broadcast-add-row":
                args = [Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True),
                        Tensor(rng.uniform(-1, 1, (1, 2)), requires_grad=True)]
            elif kind in ("add", "sub", "mul-elementwise"):
                args = [Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True),
                        Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)]
            elif kind == "log":
                args = [Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)]
            elif kind in ("relu", "square"):
                # away from the relu kink / the ill-conditioned quartic origin
                x = rng.uniform(-1, 1, (2, 3))
                x += np.sign(x) * 0.2
                args = [Tensor(x, requires_grad=True)]
            else:
                args = [Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)]
            ok, detail = _grad_ok(
                lambda: ad.sum_all(ad.square(ad.forward_op(kind, *args))), args)
            if not ok:
                return False, f"{kind}: {detail}"
    return True, f"{len(ad.OP_TABLE)} op kinds x 3 seeds"


def check_loss_gradient():
    arch = ArchitectureConfig(input_dim=4, hidden_dims=(4,), d_z=2, d_c=2)
    model = DvaModel(arch, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for layer in (model.z_mu, model.z_lv, model.c_mu, model.c_lv):
        layer.w.data = rng.uniform(-0.4, 0.4, layer.w.data.shape)
    x = Tensor(rng.uniform(0, 1, (3, 4)))

    def fn():
        return loss_feddva(x, model, xi=0.6, alpha=1.0, beta=0.75,
                           rng=np.random.default_rng(11)).total

    return _grad_ok(fn, model.all_parameters())


def check_kl_closed_forms():
    rng = np.random.default_rng(3)
    n_draws, n_mc = 8, 10**5
    for _ in range(n_draws):
        d = int(rng.integers(1, 4))
        mu_i = rng.uniform(-2, 2, d)
        mu_j = rng.uniform(-2, 2, d)
        lv_i = rng.uniform(-1, 1, d)
        lv_j = rng.uniform(-1, 1, d)
        q_i = gaussians.DiagGaussian(Tensor(mu_i[None]), Tensor(lv_i[None]))
        q_j = gaussians.DiagGaussian(Tensor(mu_j[None]), Tensor(lv_j[None]))
        closed = gaussians.kl_pairwise(q_i, q_j).item()
        s_i, s_j = np.exp(lv_i / 2), np.exp(lv_j / 2)
        x = mu_i + s_i * rng.standard_normal((n_mc, d))

        def logpdf(mu, s):
            z = (x - mu) / s
            return (-0.5 * np.sum(z * z, axis=1) - np.sum(np.log(s))
                    - 0.5 * d * math.log(2 * math.pi))

        vals = logpdf(mu_i, s_i) - logpdf(mu_j, s_j)
        se = vals.std(ddof=1) / math.sqrt(n_mc)
        if abs(closed - vals.mean()) > 3 * se:
            return False, f"pairwise KL off by {abs(closed - vals.mean()):.3g} (3se={3*se:.3g})"
        std_closed = gaussians.kl_to_standard(q_i).item()
        vals_std = logpdf(mu_i, s_i) - logpdf(np.zeros(d), np.ones(d))
        se_std = vals_std.std(ddof=1) / math.sqrt(n_mc)
        if abs(std_closed - vals_std.mean()) > 3 * se_std:
            return False, "kl_to_standard disagrees with Monte Carlo"
    return True, f"{n_draws} random draws vs {n_mc}-sample MC"


def check_hinge_cases():
    rng = np.random.default_rng(4)
    from .losses import hinge_max
    for _ in range(100):
        xi = float(rng.uniform(0, 5))
        mix = float(rng.uniform(0, 5))
        qc = float(rng.uniform(0, 10))
        got = hinge_max(Tensor(np.asarray(xi + mix)),
                        Tensor(np.asarray(qc))).item()
        if got != max(xi + mix, qc):
            return False, f"branch mismatch at xi={xi}, mix={mix}, qc={qc}"
    return True, "100 random triples"


def check_aggregation_algebra():
    rng = np.random.default_rng(5)
    updates = {k: rng.normal(size=6) for k in range(4)}
    weights = {k: float(rng.uniform(0.1, 1.0)) for k in range(4)}
    out = aggregate(updates, weights)
    stack = np.stack(list(updates.values()))
    if not (np.all(out >= stack.min(axis=0) - 1e-12)
            and np.all(out <= stack.max(axis=0) + 1e-12)):
        return False, "convexity violated"
    v = rng.normal(size=6)
    same = aggregate({0: v, 1: v.copy()}, {0: 0.3, 1: 0.9})
    if not np.allclose(same, v, atol=1e-12):
        return False, "identical updates not a fixed point"
    two = aggregate({0: np.array([0.0]), 1: np.array([4.0])},
                    {0: 0.25, 1: 0.75})
    if not np.allclose(two, [3.0]):
        return False, "weighted mean arithmetic wrong"
    return True, "convexity, fixed point, weighted mean"


def check_reparameterization():
    q = gaussians.DiagGaussian(Tensor(np.array([[1.0, -1.0]])),
                               Tensor(np.array([[0.4, 0.4]])))

    class ZeroRng:
        def standard_normal(self, shape):
            return np.zeros(shape)

    out = gaussians.reparameterize(q, ZeroRng())
    if not np.array_equal(out.data, q.mu.data):
        return False, "zero noise did not return mu"
    return True, "zero-noise identity"


def check_config_round_trip():
    cfg = ExperimentConfig(task="classify", method="fedavg", K=6, m=3,
                           rounds=11, lr_eta=0.0025, hidden_dims=(32, 16),
                           partition="label-skew")
    again = ExperimentConfig.from_text(cfg.to_text())
    if again != cfg:
        return False, "text round trip not lossless"
    return True, "lossless text round trip"


CHECKS = [
    ("op-gradients-vs-finite-differences", check_op_gradients),
    ("objective-gradient-vs-finite-differences", check_loss_gradient),
    ("kl-closed-forms-vs-monte-carlo", check_kl_closed_forms),
    ("hinge-branch-selection", check_hinge_cases),
    ("aggregation-algebra", check_aggregation_algebra),
    ("reparameterization-identity", check_reparameterization),
    ("config-round-trip", check_config_round_trip),
]


def run_selftest(out=print) -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        status = "ok" if ok else "FAIL"
        out(f"[{status}] {name}: {detail}")
        failures += 0 if ok else 1
    out(f"selftest: {len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
