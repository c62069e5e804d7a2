"""Command-line surface: train, eval, selftest.

train  runs the configured method, streaming one JSON line per round to
       history.jsonl (flushed immediately), checkpointing on schedule,
       and writing a reproducibility manifest. --resume continues a
       killed run from its last checkpoint; the splittable seed schedule
       makes the continuation identical to an uninterrupted run.
eval   rebuilds models from a checkpoint directory and emits the
       disentanglement report, accuracy CSV, embeddings CSV, and
       traversal grids.
selftest  the fast invariant suite; nonzero exit on any failure.

Flags mirror ExperimentConfig keys and override the --config file. The
FEDDVA_OUTPUT_DIR environment variable overrides output_dir.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .federation import MODEL_KIND, ServerState, init_run, run_rounds
from .metrics import (accuracy_per_client, clustering_report,
                      export_accuracy_csv, export_embeddings_csv,
                      export_grid_image, latent_traversal, write_report_json)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(ExperimentConfig):
        parser.add_argument(f"--{f.name}", default=None, type=str,
                            help=f"override config key {f.name}")


def _build_config(args) -> ExperimentConfig:
    text = ""
    if args.config is not None:
        text = Path(args.config).read_text(encoding="utf-8")
    overrides = []
    for f in fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides.append(f"{f.name} = {val}")
    if overrides:
        text = text + "\n" + "\n".join(overrides)
    cfg = ExperimentConfig.from_text(text)
    env_out = os.environ.get("FEDDVA_OUTPUT_DIR")
    if env_out:
        cfg.output_dir = env_out
    return cfg


# ------------------------------------------------------------ persistence


def _ckpt_dir(out_dir: Path, round_idx: int) -> Path:
    return out_dir / "checkpoints" / f"round_{round_idx:05d}"


def save_state(cfg: ExperimentConfig, state: ServerState, out_dir: Path) -> None:
    d = _ckpt_dir(out_dir, state.round)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "shared.ckpt", "shared", state.arch, state.theta)
    for s in state.shards:
        save_checkpoint(d / f"client_{s.id:03d}.ckpt", "local", state.arch,
                        s.model.flatten_local())


def load_state(cfg: ExperimentConfig, ckpt_dir: Path) -> ServerState:
    state = init_run(cfg)
    kind, arch, theta = load_checkpoint(ckpt_dir / "shared.ckpt")
    if arch != state.arch:
        raise ConfigError(f"checkpoint architecture {arch} does not match "
                          f"config-derived {state.arch}")
    state.theta = theta
    for s in state.shards:
        _, _, local = load_checkpoint(ckpt_dir / f"client_{s.id:03d}.ckpt")
        s.model.load_local(local)
        s.model.load_shared(theta)
    state.round = int(ckpt_dir.name.split("_")[1])
    return state


def latest_checkpoint(out_dir: Path) -> Path | None:
    root = out_dir / "checkpoints"
    if not root.is_dir():
        return None
    rounds = sorted(root.glob("round_*"))
    return rounds[-1] if rounds else None


def write_manifest(cfg: ExperimentConfig, out_dir: Path) -> None:
    manifest = {"version": f"feddva-{__version__}", "seed": cfg.seed,
                "config": cfg.to_text()}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- train


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> int:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    write_manifest(cfg, out_dir)

    history_path = out_dir / "history.jsonl"
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise ConfigError(f"--resume: no checkpoints under {out_dir}")
        state = load_state(cfg, ckpt)
        # drop history lines past the checkpoint, keep the rest
        kept = []
        if history_path.exists():
            for line in history_path.read_text().splitlines():
                if line and json.loads(line)["round"] <= state.round:
                    kept.append(line)
        history_path.write_text("".join(k + "\n" for k in kept))
    else:
        state = init_run(cfg)
        history_path.write_text("")
    if state.plan is not None:
        (out_dir / "partition.json").write_text(state.plan.to_json() + "\n")

    history_file = open(history_path, "a")

    def on_round(st: ServerState, record) -> None:
        history_file.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
        history_file.flush()
        if st.round % cfg.checkpoint_every == 0 or st.round == cfg.rounds:
            save_state(cfg, st, out_dir)

    try:
        if cfg.method == "fedavg-ft":
            from .federation import fedavg_client_update
            state = run_rounds(cfg, state, on_round)
            for s in state.shards:
                fedavg_client_update(s, state.theta, cfg, cfg.rounds + 1,
                                     epochs=cfg.ft_epochs)
            save_state(cfg, state, out_dir)
        else:
            state = run_rounds(cfg, state, on_round)
            if cfg.method == "fedavg":
                for s in state.shards:
                    s.model.load_shared(state.theta)
            if cfg.rounds == 0 or cfg.rounds % cfg.checkpoint_every != 0:
                save_state(cfg, state, out_dir)
    finally:
        history_file.close()
    print(f"train: {cfg.method} finished round {state.round}, "
          f"outputs in {out_dir}")
    return 0


# ----------------------------------------------------------------- eval


def cmd_eval(cfg: ExperimentConfig, checkpoint_dir: str | None = None) -> int:
    out_dir = Path(cfg.output_dir)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else latest_checkpoint(out_dir)
    if ckpt is None or not ckpt.is_dir():
        raise ConfigError(f"eval: no checkpoint directory found "
                          f"(looked in {out_dir / 'checkpoints'})")
    state = load_state(cfg, ckpt)
    eval_dir = out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    if MODEL_KIND[cfg.method] == "dva":
        model = state.shards[0].model  # shared encoders are identical
        report = clustering_report(model, state.shards, xi=cfg.xi_value(),
                                   seed=cfg.seed)
        write_report_json(report, eval_dir / "report.json")
        export_embeddings_csv(model, state.shards, eval_dir / "embeddings.csv")
        for s in state.shards:
            grid = latent_traversal(s.model, s, anchor=0,
                                    steps=cfg.traversal_steps,
                                    span=cfg.traversal_span)
            export_grid_image(grid, eval_dir / f"traversal_client{s.id:03d}.pgm")

    if cfg.task == "classify":
        models = {s.id: s.model for s in state.shards}
        accs, mean, std = accuracy_per_client(models, state.shards,
                                              split="held-out",
                                              latents=cfg.classifier_latents)
        export_accuracy_csv(accs, mean, std, eval_dir / "accuracy.csv")
        print(f"eval: held-out accuracy mean={mean:.4f} std={std:.4f}")
    print(f"eval: artifacts in {eval_dir}")
    return 0


# ----------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="feddva",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a federated experiment")
    p_train.add_argument("--config", default=None, help="flat key=value file")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the last checkpoint")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained run")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--checkpoint-dir", default=None,
                        help="round directory; default: latest under output_dir")
    _add_config_flags(p_eval)

    sub.add_parser("selftest", help="fast invariant suite")

    args = parser.parse_args(argv)
    try:
        if args.command == "selftest":
            from .selftest import run_selftest
            return run_selftest()
        cfg = _build_config(args)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        return cmd_eval(cfg, checkpoint_dir=args.checkpoint_dir)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
