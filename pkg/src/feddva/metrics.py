"""Evaluation: disentanglement reports, traversal grids, accuracy, exports.

Everything here reads posterior means only, so accuracy and separation
ratios are deterministic. The one sampled quantity, the Monte-Carlo KL of
each client's c-posterior mixture against N(0, I), draws from a fixed
derived seed and is therefore reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import ClientShard
from .seeding import make_rng


@dataclass
class DisentanglementReport:
    separation_ratio_z: float
    separation_ratio_c: float
    constraint_estimate_per_client: list[float]
    fraction_constraint_met: float
    xi: float

    def to_json_dict(self) -> dict:
        return {
            "separation_ratio_z": self.separation_ratio_z,
            "separation_ratio_c": self.separation_ratio_c,
            "ratio_c_over_z": (self.separation_ratio_c / self.separation_ratio_z
                               if self.separation_ratio_z > 0 else math.inf),
            "constraint_estimate_per_client": self.constraint_estimate_per_client,
            "fraction_constraint_met": self.fraction_constraint_met,
            "xi": self.xi,
        }


@dataclass
class TraversalGrid:
    images: np.ndarray  # [steps_z, steps_c, H, W]
    anchor: int


def posterior_means(model, images_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (z means, c means) for a stack of flattened images."""
    x = Tensor(images_flat)
    qz = model.encode_z(x)
    qc = model.encode_c(x, qz.mu)
    return qz.mu.data.copy(), qc.mu.data.copy()


def _principal_axis(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, points.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    return vecs[:, -1]


def latent_traversal(model, shard: ClientShard, anchor: int, steps: int,
                     span: float, use_pca: bool = True,
                     axis_z: int = 0, axis_c: int = 0) -> TraversalGrid:
    """Grid of decodes: rows sweep z, columns sweep c around the anchor.

    Sweeps run along the top principal axis of the shard's posterior means
    (or a raw coordinate axis with use_pca=False); the center cell is the
    anchor's own reconstruction from its means.
    """
    if not 0 <= anchor < shard.n:
        raise ValueError(f"anchor {anchor} outside shard of {shard.n} samples")
    z_mu, c_mu = posterior_means(model, shard.flat_images())
    if not (np.isfinite(z_mu).all() and np.isfinite(c_mu).all()):
        raise ValueError("latent_traversal: non-finite posterior means; "
                         "model looks untrained or diverged")
    if use_pca and shard.n > 1:
        dir_z = _principal_axis(z_mu)
        dir_c = _principal_axis(c_mu)
    else:
        dir_z = np.eye(z_mu.shape[1])[axis_z]
        dir_c = np.eye(c_mu.shape[1])[axis_c]
    offsets = np.linspace(-span, span, steps) if steps > 1 else np.zeros(1)
    h = shard.images.shape[1]
    w = shard.images.shape[2]
    grid = np.zeros((steps, steps, h, w))
    z_rows = np.stack([z_mu[anchor] + o * dir_z for o in offsets])
    c_cols = np.stack([c_mu[anchor] + o * dir_c for o in offsets])
    for i in range(steps):
        z_batch = np.repeat(z_rows[i][None, :], steps, axis=0)
        out = model.decode(Tensor(z_batch), Tensor(c_cols))
        grid[i] = out.data.reshape(steps, h, w)
    return TraversalGrid(images=grid, anchor=anchor)


def _separation_ratio(per_client: list[np.ndarray]) -> float:
    """Mean pairwise inter-centroid distance over mean within-client spread."""
    centroids = [p.mean(axis=0) for p in per_client]
    inter = []
    for i in range(len(centroids)):
        for j in range(i + 1, len(centroids)):
            inter.append(np.linalg.norm(centroids[i] - centroids[j]))
    intra = [float(np.linalg.norm(p - c, axis=1).mean())
             for p, c in zip(per_client, centroids)]
    mean_intra = float(np.mean(intra))
    mean_inter = float(np.mean(inter))
    if mean_intra == 0.0:
        return 0.0 if mean_inter == 0.0 else math.inf
    return mean_inter / mean_intra


def mixture_kl_to_standard_mc(mus: np.ndarray, sigmas: np.ndarray,
                              n_samples: int, rng) -> float:
    """MC estimate of KL(uniform mixture of diag Gaussians || N(0, I))."""
    n, d = mus.shape
    picks = rng.integers(0, n, size=n_samples)
    x = mus[picks] + sigmas[picks] * rng.standard_normal((n_samples, d))
    # log mixture density via logsumexp over components
    comp = np.stack([
        -0.5 * np.sum(((x - mus[k]) / sigmas[k]) ** 2, axis=1)
        - np.sum(np.log(sigmas[k])) - 0.5 * d * math.log(2 * math.pi)
        for k in range(n)
    ])
    mx = comp.max(axis=0)
    log_mix = mx + np.log(np.mean(np.exp(comp - mx), axis=0))
    log_std = -0.5 * np.sum(x * x, axis=1) - 0.5 * d * math.log(2 * math.pi)
    return float(np.mean(log_mix - log_std))


def clustering_report(model, shards: list[ClientShard], xi: float,
                      mc_samples: int = 10_000, seed: int = 0,
                      max_mixture_components: int = 128) -> DisentanglementReport:
    """Per-client clustering of c vs client-invariance of z, plus the
    Monte-Carlo estimate of each client's mixture-to-prior KL."""
    if len(shards) < 2:
        raise ValueError("clustering_report: need at least 2 clients")
    z_all, c_all, estimates = [], [], []
    for shard in shards:
        if shard.n < 2:
            raise ValueError(f"clustering_report: shard {shard.id} has "
                             f"fewer than 2 samples")
        x = Tensor(shard.flat_images())
        qz = model.encode_z(x)
        qc = model.encode_c(x, qz.mu)
        z_all.append(qz.mu.data.copy())
        c_all.append(qc.mu.data.copy())
        mus = qc.mu.data
        sigmas = np.exp(qc.log_var.data / 2.0)
        rng = make_rng(seed, "mixture-kl", shard.id)
        if mus.shape[0] > max_mixture_components:
            keep = rng.choice(mus.shape[0], size=max_mixture_components,
                              replace=False)
            mus, sigmas = mus[keep], sigmas[keep]
        estimates.append(mixture_kl_to_standard_mc(mus, sigmas, mc_samples, rng))
    met = float(np.mean([e >= xi for e in estimates]))
    return DisentanglementReport(
        separation_ratio_z=_separation_ratio(z_all),
        separation_ratio_c=_separation_ratio(c_all),
        constraint_estimate_per_client=estimates,
        fraction_constraint_met=met,
        xi=xi,
    )


def accuracy_per_client(models, shards: list[ClientShard], split: str = "held-out",
                        latents: str = "both"):
    """Deterministic per-client accuracy plus mean and across-client stddev.

    models: a single model shared by all clients, or a mapping id -> model.
    """
    accs = []
    for shard in shards:
        model = models[shard.id] if isinstance(models, dict) else models
        if split == "train":
            images, labels = shard.flat_images(), shard.labels
        elif split == "held-out":
            images, labels = shard.flat_holdout(), shard.holdout_labels
        else:
            raise ValueError(f"unknown split {split!r}")
        if images.shape[0] == 0:
            raise ValueError(f"accuracy: empty {split} split on shard {shard.id}")
        pred = np.argmax(model.predict_logits(Tensor(images),
                                              latents=latents).data, axis=1)
        accs.append(float(np.mean(pred == labels)))
    return accs, float(np.mean(accs)), float(np.std(accs))


# ----------------------------------------------------------------- export


def export_grid_image(grid: TraversalGrid, path) -> None:
    """Tile the grid into one 8-bit PGM (P5) with 1-px separators."""
    steps_z, steps_c, h, w = grid.images.shape
    out_h = steps_z * h + (steps_z - 1)
    out_w = steps_c * w + (steps_c - 1)
    canvas = np.full((out_h, out_w), 128, dtype=np.uint8)
    for i in range(steps_z):
        for j in range(steps_c):
            tile = np.clip(grid.images[i, j], 0.0, 1.0)
            quant = np.round(tile * 255.0).astype(np.uint8)
            canvas[i * (h + 1):i * (h + 1) + h,
                   j * (w + 1):j * (w + 1) + w] = quant
    with open(path, "wb") as f:
        f.write(f"P5\n{out_w} {out_h}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())


def parse_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    width, height = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: expected 8-bit maxval")
    return np.frombuffer(parts[3], dtype=np.uint8,
                         count=width * height).reshape(height, width)


def export_embeddings_csv(model, shards: list[ClientShard], path) -> None:
    """client_id, sample_id, z_0..z_{d-1}, c_0..c_{d-1} for every train sample."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        first = True
        for shard in shards:
            z_mu, c_mu = posterior_means(model, shard.flat_images())
            if first:
                header = (["client_id", "sample_id"]
                          + [f"z_{i}" for i in range(z_mu.shape[1])]
                          + [f"c_{i}" for i in range(c_mu.shape[1])])
                writer.writerow(header)
                first = False
            for s in range(z_mu.shape[0]):
                writer.writerow([shard.id, s, *z_mu[s].tolist(),
                                 *c_mu[s].tolist()])


def export_accuracy_csv(accs: list[float], mean: float, std: float, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["client_id", "accuracy"])
        for k, a in enumerate(accs):
            writer.writerow([k, a])
        writer.writerow(["mean", mean])
        writer.writerow(["stddev", std])


def write_report_json(report: DisentanglementReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
