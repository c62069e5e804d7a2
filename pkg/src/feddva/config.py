"""Flat key-value experiment configuration.

One ``key = value`` per line, '#' comments, unknown keys rejected by
name. Unset keys fall back to the full-scale defaults: batch 256,
learning rates 0.001, 200 rounds of 5 epochs per phase, alpha 1,
beta 0.75, xi of 8 per c dimension, and latent dims 4 for reconstruction
or 8 for classification. A resolved config round-trips through its text
form losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .gaussians import LatentConfig

TASKS = ("reconstruct", "classify")
METHODS = ("feddva", "fedavg", "fedavg-ft", "vanilla-vae")
PARTITIONS = ("marked", "label-skew")
LATENT_MODES = ("both", "z", "c")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "reconstruct"
    method: str = "feddva"
    K: int = 4
    m: int = 4
    rounds: int = 200
    epochs_per_phase: int = 5
    batch_size: int = 256
    lr_eta: float = 0.001
    lr_lambda: float = 0.001
    d_z: int = 0            # 0 = by task: 4 reconstruct, 8 classify
    d_c: int = 0
    alpha: float = 1.0
    beta: float = 0.75
    xi_per_dim: float = 8.0
    xi_scale: float = 1.0
    gamma: float = 1.0
    n_elbo_samples: int = 1
    seed: int = 0
    dataset: str = "toy"
    idx_labels: str = "auto"
    partition: str = "marked"
    concentration: float = 0.5
    holdout_frac: float = 0.2
    toy_classes: int = 4
    toy_per_class: int = 160
    toy_height: int = 16
    toy_width: int = 16
    hidden_dims: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    classifier_latents: str = "both"
    classifier_frozen: bool = False
    ft_epochs: int = 5
    eval_every: int = 5
    checkpoint_every: int = 10
    traversal_steps: int = 7
    traversal_span: float = 2.0
    output_dir: str = "runs/out"

    def __post_init__(self):
        if self.d_z == 0:
            self.d_z = 8 if self.task == "classify" else 4
        if self.d_c == 0:
            self.d_c = 8 if self.task == "classify" else 4
        self.validate()

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"config key '{key}': {msg}")

        need(self.task in TASKS, "task", f"must be one of {TASKS}")
        need(self.method in METHODS, "method", f"must be one of {METHODS}")
        need(self.partition in PARTITIONS, "partition",
             f"must be one of {PARTITIONS}")
        need(self.classifier_latents in LATENT_MODES, "classifier_latents",
             f"must be one of {LATENT_MODES}")
        need(self.K >= 1, "K", "must be >= 1")
        need(1 <= self.m <= self.K, "m", f"must be in [1, K={self.K}]")
        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.epochs_per_phase >= 1, "epochs_per_phase", "must be >= 1")
        need(self.batch_size >= 2, "batch_size", "must be >= 2")
        for key in ("lr_eta", "lr_lambda"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        for key in ("alpha", "beta", "gamma", "xi_per_dim", "xi_scale",
                    "concentration", "traversal_span"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.concentration > 0, "concentration", "must be > 0")
        need(0 <= self.holdout_frac < 1, "holdout_frac", "must be in [0, 1)")
        need(self.n_elbo_samples >= 1, "n_elbo_samples", "must be >= 1")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
        need(self.traversal_steps >= 1, "traversal_steps", "must be >= 1")
        if self.method in ("fedavg", "fedavg-ft"):
            need(self.task == "classify", "method",
                 f"{self.method} requires task = classify")
        if self.method == "vanilla-vae":
            need(self.task == "reconstruct", "method",
                 "vanilla-vae requires task = reconstruct")
        # LatentConfig re-checks dims and the assembled threshold
        LatentConfig(d_z=self.d_z, d_c=self.d_c, xi=self.xi_value())

    def xi_value(self) -> float:
        return self.xi_per_dim * self.d_c * self.xi_scale

    # ------------------------------------------------------------- text

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', "
                                  f"got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key '{key}'")
            try:
                values[key] = _parse(known[key].type, val)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"config key '{key}': cannot parse "
                                  f"{val!r} ({exc})") from None
        return cls(**values)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) or "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(annotation: str, val: str):
    ann = str(annotation)
    if "tuple" in ann:
        return () if val == "none" else tuple(int(v) for v in val.split(","))
    if "bool" in ann:
        if val not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {val!r}")
        return val == "true"
    if "int" in ann:
        return int(val)
    if "float" in ann:
        return float(val)
    return val


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentConfig.from_text(f.read())
