"""Federated round loop: client sampling, two-phase local updates, FedAvg.

Each round samples m of the K clients. A sampled client copies the
incoming shared encoder parameters, then runs two strictly ordered
phases over its local batches:

  Phase 1  shared parameters frozen, local decoder (and head) stepped
  Phase 2  local parameters frozen, the shared copy stepped

The client's decoder persists in its shard across rounds and never
travels; only the phase-2 shared vector returns to the server, which
averages the sampled vectors with weights renormalized over the sampled
set. Clients within a round all start from the same incoming vector, so
serial execution equals any parallel schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, sgd_step
from .data import (ClientShard, Dataset, load_idx_dataset, make_toy_digits,
                   partition_label_skew, partition_uniform_marked)
from .losses import (LossBreakdown, loss_classifier, loss_fedavg_classifier,
                     loss_feddva, loss_vanilla_vae)
from .model import ArchitectureConfig, build_model
from .seeding import derive_seed, make_rng


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    clients: dict[int, dict]
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "round": self.round,
            "sampled": self.sampled,
            "clients": {str(k): v for k, v in self.clients.items()},
            "wall_time": self.wall_time,
        }


@dataclass
class ServerState:
    theta: np.ndarray
    round: int
    shards: list[ClientShard]
    arch: ArchitectureConfig
    method: str
    history: list[RoundRecord] = field(default_factory=list)
    plan: object | None = None


def sample_clients(rng: np.random.Generator, n_clients: int, m: int) -> list[int]:
    """Uniform without-replacement sample of m client ids."""
    if not 1 <= m <= n_clients:
        raise ValueError(f"sample_clients: need 1 <= m <= {n_clients}, got {m}")
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def aggregate(updates: dict[int, np.ndarray],
              weights: dict[int, float]) -> np.ndarray:
    """Weighted average with weights renormalized over the sampled set."""
    if not updates:
        raise ValueError("aggregate: empty update set")
    lengths = {u.size for u in updates.values()}
    if len(lengths) != 1:
        raise ValueError(f"aggregate: update lengths differ: {sorted(lengths)}")
    total = sum(weights[k] for k in updates)
    out = np.zeros(next(iter(updates.values())).size)
    for k, u in updates.items():
        out += (weights[k] / total) * u
    return out


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one sample is dropped."""
    perm = rng.permutation(n)
    for at in range(0, n, batch_size):
        chunk = perm[at:at + batch_size]
        if chunk.size >= 2:
            yield chunk


def two_phase_update(loss_fn, batch_stream, local_params, shared_params,
                     lr_local: float, lr_shared: float, epochs_per_phase: int,
                     zero_grad) -> list:
    """Run the decoder-then-encoder coordinate update; returns loss records.

    loss_fn(batch) must return an object with a scalar ``total`` tensor (or
    a bare tensor). batch_stream(phase, epoch) yields batches. Order is
    load-bearing: swapping phases changes the result.
    """
    records = []
    for phase, params, lr in (("local", local_params, lr_local),
                              ("shared", shared_params, lr_shared)):
        for epoch in range(epochs_per_phase):
            for batch in batch_stream(phase, epoch):
                out = loss_fn(batch)
                total = out.total if hasattr(out, "total") else out
                backward(total)
                sgd_step(params, lr)
                zero_grad()
                if phase == "shared":
                    records.append(out)
    return records


def client_update(shard: ClientShard, theta: np.ndarray, cfg,
                  round_idx: int) -> tuple[np.ndarray, list[LossBreakdown]]:
    """One ClientUpdate: load shared params, phase 1 then phase 2."""
    if shard.n == 0:
        raise ValueError(f"client_update: shard {shard.id} is empty")
    model = shard.model
    model.load_shared(theta)
    x_all = shard.flat_images()
    labels = shard.labels

    def batch_stream(phase, epoch):
        rng = make_rng(cfg.seed, "batches", shard.id, round_idx, phase, epoch)
        for idx in iter_batches(shard.n, cfg.batch_size, rng):
            yield idx

    noise_rng = make_rng(cfg.seed, "noise", shard.id, round_idx)

    def loss_fn(idx):
        x = Tensor(x_all[idx])
        if cfg.method == "vanilla-vae":
            return loss_vanilla_vae(x, model, noise_rng)
        if cfg.task == "classify":
            return loss_classifier(x, labels[idx], model, shard.xi, cfg.alpha,
                                   cfg.beta, cfg.gamma, noise_rng,
                                   frozen=cfg.classifier_frozen,
                                   latents=cfg.classifier_latents)
        return loss_feddva(x, model, shard.xi, cfg.alpha, cfg.beta, noise_rng,
                           n_samples=cfg.n_elbo_samples)

    records = two_phase_update(loss_fn, batch_stream, model.local_parameters(),
                               model.shared_parameters(), cfg.lr_eta,
                               cfg.lr_lambda, cfg.epochs_per_phase,
                               model.zero_grad)
    return model.flatten_shared(), records


def fedavg_client_update(shard: ClientShard, theta: np.ndarray, cfg,
                         round_idx: int, epochs: int | None = None
                         ) -> tuple[np.ndarray, list[LossBreakdown]]:
    """Vanilla FedAvg local pass: all parameters trained and returned."""
    model = shard.model
    model.load_shared(theta)
    x_all = shard.flat_images()
    records = []
    n_epochs = cfg.epochs_per_phase if epochs is None else epochs
    for epoch in range(n_epochs):
        rng = make_rng(cfg.seed, "batches", shard.id, round_idx, "fedavg", epoch)
        for idx in iter_batches(shard.n, cfg.batch_size, rng):
            out = loss_fedavg_classifier(Tensor(x_all[idx]), shard.labels[idx],
                                         model)
            backward(out.total)
            sgd_step(model.all_parameters(), cfg.lr_lambda)
            model.zero_grad()
            records.append(out)
    return model.flatten_shared(), records


def _summarize(records: list[LossBreakdown], xi: float) -> dict:
    if not records:
        return {"n_batches": 0}
    rows = [r.to_row() for r in records]
    keys = rows[0].keys()
    summary = {k: float(np.mean([row[k] for row in rows])) for k in keys}
    monitors = [r.monitor for r in records]
    summary["n_batches"] = len(records)
    summary["monitor_min"] = float(np.min(monitors))
    summary["monitor_mean"] = float(np.mean(monitors))
    summary["monitor_frac_ge_xi"] = float(np.mean([m >= xi for m in monitors]))
    return summary


def _eval_accuracy(model, shard: ClientShard, latents: str) -> float | None:
    if shard.holdout_images.shape[0] == 0:
        return None
    logits = model.predict_logits(Tensor(shard.flat_holdout()), latents=latents)
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == shard.holdout_labels))


# ----------------------------------------------------------------- runs


def build_dataset(cfg) -> Dataset:
    if cfg.dataset == "toy":
        return make_toy_digits(cfg.toy_per_class, cfg.toy_classes,
                               cfg.toy_height, cfg.toy_width, cfg.seed)
    labels_path = cfg.idx_labels
    if labels_path == "auto":
        labels_path = cfg.dataset.replace("images", "labels").replace("idx3", "idx1")
    return load_idx_dataset(cfg.dataset, labels_path)


def build_shards(cfg, ds: Dataset):
    if cfg.partition == "marked":
        shards, plan = partition_uniform_marked(ds, cfg.K, cfg.seed,
                                                holdout_frac=cfg.holdout_frac)
    elif cfg.partition == "label-skew":
        shards, plan = partition_label_skew(ds, cfg.K, cfg.concentration,
                                            cfg.seed,
                                            holdout_frac=cfg.holdout_frac)
    else:
        raise ValueError(f"unknown partition {cfg.partition!r}")
    for s in shards:
        s.xi = cfg.xi_value()
    return shards, plan


def build_arch(cfg, ds: Dataset) -> ArchitectureConfig:
    input_dim = int(ds.images.shape[1] * ds.images.shape[2])
    n_classes = ds.n_classes if cfg.task == "classify" else None
    return ArchitectureConfig(input_dim=input_dim, hidden_dims=cfg.hidden_dims,
                              d_z=cfg.d_z, d_c=cfg.d_c,
                              activation=cfg.activation, n_classes=n_classes,
                              head_hidden=cfg.head_hidden)


MODEL_KIND = {"feddva": "dva", "vanilla-vae": "vanilla",
              "fedavg": "pixel", "fedavg-ft": "pixel"}


def init_run(cfg) -> ServerState:
    ds = build_dataset(cfg)
    arch = build_arch(cfg, ds)
    shards, plan = build_shards(cfg, ds)
    kind = MODEL_KIND[cfg.method]
    for s in shards:
        s.model = build_model(kind, arch, make_rng(cfg.seed, "client-init", s.id))
    server_model = build_model(kind, arch, make_rng(cfg.seed, "server-init"))
    return ServerState(theta=server_model.flatten_shared(), round=0,
                       shards=shards, arch=arch, method=cfg.method, plan=plan)


def run_rounds(cfg, state: ServerState, on_round=None) -> ServerState:
    """Advance the federation from state.round to cfg.rounds."""
    is_baseline = cfg.method in ("fedavg", "fedavg-ft")
    weights = {s.id: s.weight for s in state.shards}
    eval_latents = cfg.classifier_latents
    while state.round < cfg.rounds:
        r = state.round + 1
        start = time.monotonic()
        sampled = sample_clients(make_rng(cfg.seed, "sample", r),
                                 cfg.K, cfg.m)
        updates: dict[int, np.ndarray] = {}
        client_stats: dict[int, dict] = {}
        for k in sampled:
            shard = state.shards[k]
            if is_baseline:
                theta_k, records = fedavg_client_update(shard, state.theta,
                                                        cfg, r)
            else:
                theta_k, records = client_update(shard, state.theta, cfg, r)
            updates[k] = theta_k
            client_stats[k] = _summarize(records, shard.xi)
        state.theta = aggregate(updates, weights)
        if cfg.task == "classify" and (r % cfg.eval_every == 0 or r == cfg.rounds):
            for k in sampled:
                model = state.shards[k].model
                model.load_shared(state.theta)
                acc = _eval_accuracy(model, state.shards[k], eval_latents)
                client_stats[k]["accuracy"] = acc
        record = RoundRecord(round=r, sampled=sampled, clients=client_stats,
                             wall_time=time.monotonic() - start)
        state.history.append(record)
        state.round = r
        if on_round is not None:
            on_round(state, record)
    return state


def run_feddva(cfg, on_round=None) -> ServerState:
    return run_rounds(cfg, init_run(cfg), on_round)


def run_fedavg_baseline(cfg, on_round=None) -> ServerState:
    state = run_rounds(cfg, init_run(cfg), on_round)
    # final model is the aggregate; push it into every client for eval
    for s in state.shards:
        s.model.load_shared(state.theta)
    return state


def run_fedavg_finetune(cfg, ft_epochs: int | None = None,
                        on_round=None) -> ServerState:
    """FedAvg, then ft_epochs purely local epochs per client before eval."""
    state = run_rounds(cfg, init_run(cfg), on_round)
    epochs = cfg.ft_epochs if ft_epochs is None else ft_epochs
    for s in state.shards:
        fedavg_client_update(s, state.theta, cfg, cfg.rounds + 1,
                             epochs=epochs)
    return state


def run_experiment(cfg, on_round=None) -> ServerState:
    if cfg.method in ("feddva", "vanilla-vae"):
        return run_feddva(cfg, on_round)
    if cfg.method == "fedavg":
        return run_fedavg_baseline(cfg, on_round)
    if cfg.method == "fedavg-ft":
        return run_fedavg_finetune(cfg, on_round=on_round)
    raise ValueError(f"unknown method {cfg.method!r}")
