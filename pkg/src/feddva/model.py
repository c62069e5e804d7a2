"""Dual-encoder architecture with per-client decoders and classifier heads.

Two shared encoders form a cascade: f(x) infers the universal posterior
q(z|x), then h(x, z) infers the personalized posterior q(c|x, z) from the
concatenation of x and z. Each client owns a decoder g(z, c) that maps
both latents back to pixel Bernoulli means, and (in classifier mode) a
local head over the two posterior means.

Networks are dense MLPs. Trunk weights initialize uniform in
±1/sqrt(fan_in); the four posterior-head layers initialize to zero so
every posterior starts exactly at N(0, I), which keeps the constraint
monitor nonnegative from the first logged batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .gaussians import DiagGaussian

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class ArchitectureConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    d_z: int = 4
    d_c: int = 4
    activation: str = "relu"
    n_classes: int | None = None
    head_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.d_z < 1 or self.d_c < 1:
            raise ValueError(f"latent dims must be >= 1, got d_z={self.d_z} d_c={self.d_c}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def canonical_text(self) -> str:
        parts = [
            f"input_dim={self.input_dim}",
            "hidden_dims=" + ",".join(str(h) for h in self.hidden_dims),
            f"d_z={self.d_z}",
            f"d_c={self.d_c}",
            f"activation={self.activation}",
            f"n_classes={'none' if self.n_classes is None else self.n_classes}",
            "head_hidden=" + (",".join(str(h) for h in self.head_hidden) or "none"),
        ]
        return ";".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureConfig":
        kv = dict(item.split("=", 1) for item in text.strip().split(";"))

        def ints(s):
            return () if s in ("", "none") else tuple(int(v) for v in s.split(","))

        return cls(
            input_dim=int(kv["input_dim"]),
            hidden_dims=ints(kv["hidden_dims"]),
            d_z=int(kv["d_z"]),
            d_c=int(kv["d_c"]),
            activation=kv["activation"],
            n_classes=None if kv["n_classes"] == "none" else int(kv["n_classes"]),
            head_hidden=ints(kv["head_hidden"]),
        )


class Dense:
    """One affine layer: x @ W + b."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int,
                 zero: bool = False):
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros((1, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = rng.uniform(-bound, bound, (1, fan_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_rowvec(ad.matmul(x, self.w), self.b)

    @property
    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Mlp:
    """Dense stack with the activation applied after every layer."""

    def __init__(self, rng, dims: tuple[int, ...], activation: str):
        self.layers = [Dense(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = self.act(layer(x))
        return x

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]


def _flatten(params: list[Tensor]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([p.data.reshape(-1) for p in params])


def _load(params: list[Tensor], flat: np.ndarray, what: str) -> None:
    total = sum(p.data.size for p in params)
    if flat.size != total:
        raise ValueError(f"load {what}: expected {total} values, got {flat.size}")
    at = 0
    for p in params:
        n = p.data.size
        p.data = flat[at:at + n].reshape(p.data.shape).astype(np.float64).copy()
        at += n


class DvaModel:
    """Shared dual encoders plus this client's decoder and optional head."""

    def __init__(self, arch: ArchitectureConfig, rng: np.random.Generator):
        self.arch = arch
        act = arch.activation
        h = arch.hidden_dims

        self.f_trunk = Mlp(rng, (arch.input_dim, *h), act)
        f_out = h[-1] if h else arch.input_dim
        self.z_mu = Dense(rng, f_out, arch.d_z, zero=True)
        self.z_lv = Dense(rng, f_out, arch.d_z, zero=True)

        self.h_trunk = Mlp(rng, (arch.input_dim + arch.d_z, *h), act)
        h_out = h[-1] if h else arch.input_dim + arch.d_z
        self.c_mu = Dense(rng, h_out, arch.d_c, zero=True)
        self.c_lv = Dense(rng, h_out, arch.d_c, zero=True)

        dec_hidden = tuple(reversed(h))
        self.dec_trunk = Mlp(rng, (arch.d_z + arch.d_c, *dec_hidden), act)
        dec_out = dec_hidden[-1] if dec_hidden else arch.d_z + arch.d_c
        self.dec_out = Dense(rng, dec_out, arch.input_dim)

        self.head: Mlp | None = None
        self.head_out: Dense | None = None
        if arch.n_classes is not None:
            self.head = Mlp(rng, (arch.d_z + arch.d_c, *arch.head_hidden), act)
            head_in = arch.head_hidden[-1] if arch.head_hidden else arch.d_z + arch.d_c
            self.head_out = Dense(rng, head_in, arch.n_classes)

    # -------------------------------------------------------- forward

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ShapeError(f"encode: expected [batch, {self.arch.input_dim}], "
                             f"got {x.shape}")

    def encode_z(self, x: Tensor) -> DiagGaussian:
        self._check_input(x)
        hid = self.f_trunk(x)
        return DiagGaussian(self.z_mu(hid), self.z_lv(hid))

    def encode_c(self, x: Tensor, z: Tensor) -> DiagGaussian:
        self._check_input(x)
        if z.shape != (x.shape[0], self.arch.d_z):
            raise ShapeError(f"encode_c: z shape {z.shape} does not align with "
                             f"x rows {x.shape[0]} and d_z {self.arch.d_z}")
        hid = self.h_trunk(ad.concat_last(x, z))
        return DiagGaussian(self.c_mu(hid), self.c_lv(hid))

    def decode(self, z: Tensor, c: Tensor) -> Tensor:
        if z.shape[0] != c.shape[0]:
            raise ShapeError(f"decode: z rows {z.shape} vs c rows {c.shape}")
        hid = self.dec_trunk(ad.concat_last(z, c))
        return ad.sigmoid(self.dec_out(hid))

    def classify(self, z_mu: Tensor, c_mu: Tensor) -> Tensor:
        if self.head is None or self.head_out is None:
            raise ValueError("classify: model built without a classifier head")
        return self.head_out(self.head(ad.concat_last(z_mu, c_mu)))

    def posterior_means(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Deterministic (mu_z, mu_c) pair; c is conditioned on mu_z."""
        qz = self.encode_z(x)
        qc = self.encode_c(x, qz.mu)
        return qz.mu, qc.mu

    def predict_logits(self, x: Tensor, latents: str = "both") -> Tensor:
        z_mu, c_mu = self.posterior_means(x)
        if latents == "z":
            c_mu = Tensor(np.zeros_like(c_mu.data))
        elif latents == "c":
            z_mu = Tensor(np.zeros_like(z_mu.data))
        elif latents != "both":
            raise ValueError(f"unknown latents mode {latents!r}")
        return self.classify(z_mu, c_mu)

    # ----------------------------------------------------- parameters

    @property
    def theta_z(self) -> list[Tensor]:
        return self.f_trunk.params + self.z_mu.params + self.z_lv.params

    @property
    def theta_c(self) -> list[Tensor]:
        return self.h_trunk.params + self.c_mu.params + self.c_lv.params

    def shared_parameters(self) -> list[Tensor]:
        return self.theta_z + self.theta_c

    def local_parameters(self) -> list[Tensor]:
        phi = self.dec_trunk.params + self.dec_out.params
        if self.head is not None:
            phi = phi + self.head.params + self.head_out.params
        return phi

    def all_parameters(self) -> list[Tensor]:
        return self.shared_parameters() + self.local_parameters()

    def zero_grad(self) -> None:
        ad.zero_grads(self.all_parameters())

    def flatten_shared(self) -> np.ndarray:
        return _flatten(self.shared_parameters())

    def load_shared(self, flat: np.ndarray) -> None:
        _load(self.shared_parameters(), flat, "shared")

    def flatten_local(self) -> np.ndarray:
        return _flatten(self.local_parameters())

    def load_local(self, flat: np.ndarray) -> None:
        _load(self.local_parameters(), flat, "local")


class VanillaVaeModel:
    """Single-encoder VAE: shared encoder, client-local z-only decoder."""

    def __init__(self, arch: ArchitectureConfig, rng: np.random.Generator):
        self.arch = arch
        act = arch.activation
        h = arch.hidden_dims
        self.f_trunk = Mlp(rng, (arch.input_dim, *h), act)
        f_out = h[-1] if h else arch.input_dim
        self.z_mu = Dense(rng, f_out, arch.d_z, zero=True)
        self.z_lv = Dense(rng, f_out, arch.d_z, zero=True)
        dec_hidden = tuple(reversed(h))
        self.dec_trunk = Mlp(rng, (arch.d_z, *dec_hidden), act)
        dec_out = dec_hidden[-1] if dec_hidden else arch.d_z
        self.dec_out = Dense(rng, dec_out, arch.input_dim)

    def encode_z(self, x: Tensor) -> DiagGaussian:
        hid = self.f_trunk(x)
        return DiagGaussian(self.z_mu(hid), self.z_lv(hid))

    def decode(self, z: Tensor) -> Tensor:
        return ad.sigmoid(self.dec_out(self.dec_trunk(z)))

    def shared_parameters(self) -> list[Tensor]:
        return self.f_trunk.params + self.z_mu.params + self.z_lv.params

    def local_parameters(self) -> list[Tensor]:
        return self.dec_trunk.params + self.dec_out.params

    def all_parameters(self) -> list[Tensor]:
        return self.shared_parameters() + self.local_parameters()

    def zero_grad(self) -> None:
        ad.zero_grads(self.all_parameters())

    def flatten_shared(self) -> np.ndarray:
        return _flatten(self.shared_parameters())

    def load_shared(self, flat: np.ndarray) -> None:
        _load(self.shared_parameters(), flat, "shared")

    def flatten_local(self) -> np.ndarray:
        return _flatten(self.local_parameters())

    def load_local(self, flat: np.ndarray) -> None:
        _load(self.local_parameters(), flat, "local")


class PixelClassifier:
    """Plain MLP classifier on raw pixels; every parameter is shared."""

    def __init__(self, arch: ArchitectureConfig, rng: np.random.Generator):
        if arch.n_classes is None:
            raise ValueError("PixelClassifier needs n_classes")
        self.arch = arch
        self.trunk = Mlp(rng, (arch.input_dim, *arch.hidden_dims), arch.activation)
        trunk_out = arch.hidden_dims[-1] if arch.hidden_dims else arch.input_dim
        self.out = Dense(rng, trunk_out, arch.n_classes)

    def predict_logits(self, x: Tensor, latents: str = "both") -> Tensor:
        return self.out(self.trunk(x))

    def shared_parameters(self) -> list[Tensor]:
        return self.trunk.params + self.out.params

    def local_parameters(self) -> list[Tensor]:
        return []

    def all_parameters(self) -> list[Tensor]:
        return self.shared_parameters()

    def zero_grad(self) -> None:
        ad.zero_grads(self.all_parameters())

    def flatten_shared(self) -> np.ndarray:
        return _flatten(self.shared_parameters())

    def load_shared(self, flat: np.ndarray) -> None:
        _load(self.shared_parameters(), flat, "shared")

    def flatten_local(self) -> np.ndarray:
        return np.zeros(0)

    def load_local(self, flat: np.ndarray) -> None:
        _load([], flat, "local")


def build_model(kind: str, arch: ArchitectureConfig, rng: np.random.Generator):
    if kind == "dva":
        return DvaModel(arch, rng)
    if kind == "vanilla":
        return VanillaVaeModel(arch, rng)
    if kind == "pixel":
        return PixelClassifier(arch, rng)
    raise ValueError(f"unknown model kind {kind!r}")
