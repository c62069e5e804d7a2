"""Training objectives: the client-specific negative ELBO and baselines.

The personalized objective combines three terms, all minimized:

  total = recon + alpha * r_z + beta * r_c

  recon  binary cross-entropy of the decoded Bernoulli means against the
         input, summed over pixels and averaged over the batch
  r_z    batch-mean KL(q(z|x) || N(0, I))
  r_c    hinge max(xi + bound, KL(q(c|x,z) || N(0, I))), where bound is
         the Jensen upper estimate of the KL to the batch mixture

The hinge is an exact max; at a tie the subgradient follows the first
branch. The slack KL(c to prior) - bound - xi is recorded per batch as
the runtime constraint monitor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gaussians
from .autodiff import Tensor

# decoder outputs are squeezed into [eps, 1-eps] before the log so float64
# sigmoid saturation cannot hit the log domain error
BCE_EPS = 1e-12


@dataclass
class LossBreakdown:
    """Scalar graph node for backward plus recorded component values."""

    total: Tensor
    recon: float = 0.0
    r_z: float = 0.0
    r_c: float = 0.0
    kl_c_to_qc: float = 0.0
    kl_c_to_mixture: float = 0.0
    constraint_slack: float = 0.0
    cross_entropy: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def monitor(self) -> float:
        """Batch estimate of KL(client mixture || global prior): slack + xi."""
        return self.kl_c_to_qc - self.kl_c_to_mixture

    def to_row(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "recon": self.recon,
            "r_z": self.r_z,
            "r_c": self.r_c,
            "kl_c_to_qc": self.kl_c_to_qc,
            "kl_c_to_mixture": self.kl_c_to_mixture,
            "constraint_slack": self.constraint_slack,
            "cross_entropy": self.cross_entropy,
        }


def bce_recon(p: Tensor, x: Tensor) -> Tensor:
    """Pixel-sum, batch-mean binary cross-entropy of means p against x."""
    if p.shape != x.shape:
        raise ad.ShapeError(f"bce: prediction {p.shape} vs target {x.shape}")
    safe = p * (1.0 - 2.0 * BCE_EPS) + BCE_EPS
    ll = ad.mul(x, ad.log(safe)) + ad.mul(1.0 - x, ad.log(1.0 - safe))
    return ad.scale(ad.sum_all(ll), -1.0 / x.shape[0])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean softmax cross-entropy; labels are integer class ids."""
    n, n_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ad.ShapeError(f"cross_entropy: labels shape {labels.shape} "
                            f"vs batch {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"cross_entropy: label out of range [0, {n_classes}): "
                         f"found {int(labels.min())}..{int(labels.max())}")
    # constant max shift; its dependence cancels between the two terms
    shift = Tensor(np.broadcast_to(logits.data.max(axis=1, keepdims=True),
                                   logits.shape).copy())
    shifted = ad.sub(logits, shift)
    log_z = ad.log(ad.matmul(ad.exp(shifted), Tensor(np.ones((n_classes, 1)))))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_all(ad.mul(shifted, Tensor(onehot)))
    return ad.scale(ad.sum_all(log_z) - picked, 1.0 / n)


def hinge_max(first: Tensor, second: Tensor) -> Tensor:
    """Exact max of two scalars; the tie routes gradient to `first`."""
    return first if first.item() >= second.item() else second


def loss_vanilla_vae(x: Tensor, model, rng: np.random.Generator) -> LossBreakdown:
    """Negative ELBO of the plain VAE: BCE + KL(q(z|x) || N(0, I))."""
    qz = model.encode_z(x)
    z = gaussians.reparameterize(qz, rng)
    recon = bce_recon(model.decode(z), x)
    r_z = gaussians.kl_to_standard(qz)
    total = recon + r_z
    return LossBreakdown(total=total, recon=recon.item(), r_z=r_z.item())


def loss_feddva(x: Tensor, model, xi: float, alpha: float, beta: float,
                rng: np.random.Generator, n_samples: int = 1) -> LossBreakdown:
    """Client-specific negative ELBO with the hinge personalization penalty.

    Needs batch >= 2: the mixture estimator is degenerate on one sample.
    z and c are reparameterized (n_samples independent draws, averaged);
    the cascade feeds the sampled z into the c encoder.
    """
    n = x.shape[0]
    if n < 2:
        raise ValueError("loss_feddva: batch size must be >= 2 so the batch "
                         "mixture has peers; got 1")
    qz = model.encode_z(x)
    r_z = gaussians.kl_to_standard(qz)

    totals, recons, r_cs, klqcs, klmixes = [], [], [], [], []
    for _ in range(n_samples):
        z = gaussians.reparameterize(qz, rng)
        qc = model.encode_c(x, z)
        c = gaussians.reparameterize(qc, rng)
        recon = bce_recon(model.decode(z, c), x)
        kl_qc = gaussians.kl_to_standard(qc)
        kl_mix = gaussians.mixture_bound_batch_mean(qc)
        r_c = hinge_max(kl_mix + xi, kl_qc)
        totals.append(recon + ad.scale(r_z, alpha) + ad.scale(r_c, beta))
        recons.append(recon.item())
        r_cs.append(r_c.item())
        klqcs.append(kl_qc.item())
        klmixes.append(kl_mix.item())

    if n_samples == 1:
        total = totals[0]
    else:
        acc = totals[0]
        for t in totals[1:]:
            acc = acc + t
        total = ad.scale(acc, 1.0 / n_samples)

    kl_qc_v = float(np.mean(klqcs))
    kl_mix_v = float(np.mean(klmixes))
    return LossBreakdown(
        total=total,
        recon=float(np.mean(recons)),
        r_z=r_z.item(),
        r_c=float(np.mean(r_cs)),
        kl_c_to_qc=kl_qc_v,
        kl_c_to_mixture=kl_mix_v,
        constraint_slack=kl_qc_v - kl_mix_v - xi,
    )


def loss_classifier(x: Tensor, labels: np.ndarray, model, xi: float,
                    alpha: float, beta: float, gamma: float,
                    rng: np.random.Generator, frozen: bool = False,
                    latents: str = "both") -> LossBreakdown:
    """ELBO plus gamma-weighted cross-entropy on the posterior means.

    frozen=True detaches the means so the CE gradient stops at the head.
    """
    breakdown = loss_feddva(x, model, xi, alpha, beta, rng)
    z_mu, c_mu = model.posterior_means(x)
    if frozen:
        z_mu, c_mu = z_mu.detach(), c_mu.detach()
    if latents == "z":
        c_mu = Tensor(np.zeros_like(c_mu.data))
    elif latents == "c":
        z_mu = Tensor(np.zeros_like(z_mu.data))
    ce = cross_entropy(model.classify(z_mu, c_mu), labels)
    breakdown.total = breakdown.total + ad.scale(ce, gamma)
    breakdown.cross_entropy = ce.item()
    return breakdown


def loss_fedavg_classifier(x: Tensor, labels: np.ndarray, model) -> LossBreakdown:
    """Plain cross-entropy for the vanilla federated baseline."""
    ce = cross_entropy(model.predict_logits(x), labels)
    return LossBreakdown(total=ce, cross_entropy=ce.item())
