"""Operator CLI: gen-data, fit-codebook, train, rollout, eval, report.

Exit codes: 0 ok, 2 config error, 3 refusal (would overwrite), 4 missing
artifact, 5 runtime failure. Setting UNIWM_DETERMINISTIC=1 pins the BLAS
thread count to 1 before numpy loads, which fixes the floating-point
reduction order across machines with different core counts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REFUSAL = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5


class Refusal(RuntimeError):
    pass


class MissingArtifact(RuntimeError):
    pass


def _apply_determinism_env() -> None:
    if os.environ.get("UNIWM_DETERMINISTIC") == "1" and "numpy" not in sys.modules:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import load_config, config_hash
    from .dataset import build_dataset

    cfg = load_config(_require(Path(args.config), "config file"))
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise Refusal(f"{out} already holds a dataset; pass --force to regenerate")
    manifest = build_dataset(cfg["world"], out)
    print(f"dataset written to {out}")
    print(f"  trajectories: {manifest['counts']} avg_step_size={manifest['avg_step_size']:.4f}")
    print(f"  dataset_hash: {manifest['dataset_hash']}")
    print(f"  config_hash:  {config_hash(cfg)}")
    return EXIT_OK


def cmd_fit_codebook(args) -> int:
    import numpy as np

    from .codebook import fit_codebook, image_to_patches, save_codebook
    from .config import load_config
    from .dataset import DatasetReader

    cfg = load_config(_require(Path(args.config), "config file"))["tokenizer"]
    reader = DatasetReader(_require(Path(args.dataset), "dataset directory"))
    out = Path(args.out or (Path(args.dataset) / "codebook.bin"))
    if out.exists() and not args.force:
        raise Refusal(f"{out} exists; pass --force to refit")

    rng = np.random.default_rng(cfg["fit_seed"])
    frames = []
    for idx in reader.indices("train"):
        t = reader.load(idx)
        frames.extend(t.all_frames)
        frames.append(t.goal_frame)
    picks = rng.choice(len(frames), size=min(cfg["fit_frames"], len(frames)), replace=False)
    patches = np.concatenate([image_to_patches(frames[i], cfg["patch"], cfg["patch"]) for i in sorted(picks)])
    if len(patches) > cfg["fit_patches"]:
        keep = rng.choice(len(patches), size=cfg["fit_patches"], replace=False)
        patches = patches[np.sort(keep)]
    book = fit_codebook(patches, cfg["codebook_size"], cfg["fit_iters"], cfg["fit_seed"], cfg["patch"], cfg["patch"])
    save_codebook(out, book)
    print(f"codebook ({book.size} x {book.dim}) written to {out}")
    return EXIT_OK


def _model_config(cfg: dict, vocab_size: int):
    from .model import ModelConfig, select_layers

    m = cfg["model"]
    return ModelConfig(
        vocab_size=vocab_size,
        n_layers=m["n_layers"],
        n_heads=m["n_heads"],
        d_model=m["d_model"],
        context_len=m["context_len"],
        l_save=select_layers(m["n_layers"], m["l_save_count"]),
        rope_base=m["rope_base"],
    )


def cmd_train(args) -> int:
    import shutil

    from .codebook import load_codebook
    from .config import load_config, config_hash
    from .dataset import DatasetReader
    from .model import init_params, load_checkpoint, save_checkpoint
    from .optim import AdamState
    from .training import TrainConfig, tokenize_dataset, train
    from .vocab import VocabLayout

    cfg = load_config(_require(Path(args.config), "config file"))
    reader = DatasetReader(_require(Path(args.dataset), "dataset directory"))
    codebook_path = _require(Path(args.codebook or (Path(args.dataset) / "codebook.bin")), "codebook")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    codebook = load_codebook(codebook_path)
    layout = VocabLayout(pose_bins=cfg["tokenizer"]["pose_bins"], codebook_size=codebook.size)
    model_config = _model_config(cfg, layout.vocab_size)
    tcfg = TrainConfig(**cfg["train"])

    meta = {
        "dataset_hash": reader.dataset_hash,
        "config_hash": config_hash(cfg),
        "epoch": 0,
        "step": 0,
    }
    start_epoch = 0
    state = None
    if args.resume:
        params, model_config, layout, prev_meta, extra = load_checkpoint(_require(out / "model.ckpt", "checkpoint"))
        state = AdamState(
            m={k[len("optim.m.") :]: v for k, v in extra.items() if k.startswith("optim.m.")},
            v={k[len("optim.v.") :]: v for k, v in extra.items() if k.startswith("optim.v.")},
            step=int(extra["optim.step"][0]),
        )
        start_epoch = int(prev_meta["epoch"])
        meta.update(prev_meta)
        print(f"resuming from epoch {start_epoch}, step {state.step}")
    else:
        params = init_params(model_config, seed=tcfg.seed)
        save_checkpoint(out / "model_init.ckpt", params, model_config, layout, meta)

    shutil.copyfile(codebook_path, out / "codebook.bin")
    print(f"tokenizing train split ({len(reader.indices('train'))} trajectories)...")
    data = tokenize_dataset(reader, codebook, "train")
    dist_table = codebook.distance_table()
    result = train(
        params, data, tcfg, model_config, layout, dist_table, out,
        state=state, start_epoch=start_epoch, checkpoint_meta=meta,
    )
    print(f"trained {result['steps']} optimizer steps")
    print(f"epoch mean world loss: {[round(v, 4) for v in result['epoch_world_loss']]}")
    print(f"epoch mean plan loss:  {[round(v, 4) for v in result['epoch_plan_loss']]}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _load_artifacts(checkpoint: Path):
    from .codebook import load_codebook
    from .model import load_checkpoint

    params, model_config, layout, meta, _ = load_checkpoint(_require(checkpoint, "checkpoint"))
    codebook = load_codebook(_require(checkpoint.parent / "codebook.bin", "codebook next to checkpoint"))
    return params, model_config, layout, meta, codebook


def cmd_eval(args) -> int:
    from .config import load_config, config_hash
    from .dataset import DatasetReader
    from .evalrun import EvalSettings, evaluate, write_report
    from .model import select_layers
    from .rollout import RolloutConfig

    cfg = load_config(_require(Path(args.config), "config file"))
    params, model_config, layout, meta, codebook = _load_artifacts(Path(args.checkpoint))
    reader = DatasetReader(_require(Path(args.dataset), "dataset directory"))

    r = cfg["rollout"]
    if args.strategy:
        strategy = "predict_both" if args.strategy == "both" else "interleave"
    else:
        strategy = cfg["train"]["step_strategy"]
    rollout_cfg = RolloutConfig(
        max_steps=r["max_steps"],
        memory=args.memory or r["memory"],
        top_k=r["top_k"],
        gamma=r["gamma"],
        strategy=strategy,
        cross_capacity=r["cross_capacity"],
        temperature=r["temperature"],
    )
    if args.layers:
        model_config.l_save = select_layers(model_config.n_layers, args.layers if args.layers == "all" else int(args.layers))
    e = cfg["eval"]
    settings = EvalSettings(
        at_n=tuple(e["at_n"]), max_anchors=e["max_anchors"],
        at_n_trajectories=e["at_n_trajectories"], workers=e["workers"],
    )
    report = evaluate(
        params, reader, rollout_cfg, model_config, layout, codebook, settings,
        header_extra={
            "checkpoint": str(args.checkpoint),
            "config_hash": config_hash(cfg),
            "checkpoint_dataset_hash": meta.get("dataset_hash", ""),
        },
        max_trajectories=args.max_traj,
    )
    out = Path(args.out)
    write_report(report, out)
    agg = report["aggregate"]
    print(f"memory={rollout_cfg.memory} SR={agg['SR']:.3f} ATE={agg['ATE']:.3f} RPE={agg['RPE']:.3f}")
    print(f"report: {out / 'metrics.json'}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    from .dataset import DatasetReader
    from .evalrun import _extent
    from .gridworld import generate_map
    from .rollout import RolloutConfig, closed_loop_replay, dump_rollout, run_trajectory

    params, model_config, layout, meta, codebook = _load_artifacts(Path(args.checkpoint))
    reader = DatasetReader(_require(Path(args.dataset), "dataset directory"))
    indices = {t["index"] for t in reader.manifest["trajectories"]}
    if args.traj not in indices:
        raise MissingArtifact(f"trajectory {args.traj} not in dataset")
    traj = reader.load(args.traj)
    cfg = RolloutConfig(memory=args.memory, record_memtrace=args.dump_memtrace)
    result = run_trajectory(
        params, traj.start_frame, traj.goal_frame, traj.start_pose, cfg, model_config,
        layout, codebook, _extent(reader),
    )
    true_renders = None
    if args.dump_frames:
        wc = reader.manifest["config"]
        world = generate_map(traj.map_seed, wc["width"], wc["height"], wc["wall_density"])
        div = float(reader.manifest["normalization_divisor_m"])
        true_renders = closed_loop_replay(world, result, div, reader.resolution)
    dump_rollout(args.out, result, true_renders)
    print(f"rollout: {result.moves} moves, truncated={result.truncated}, dump at {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .config import ConfigError
    from .report import build_comparison

    paths = [Path(p) for p in args.metrics]
    if not paths:
        raise ConfigError("no metrics inputs given")
    table, warnings = build_comparison(paths)
    for w in warnings:
        print(f"WARNING: {w}")
    print(table.text())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(args.out)
        print(f"csv: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniwm", description="unified navigation world model, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    f = sub.add_parser("fit-codebook", help="fit the patch codebook on the train split")
    f.add_argument("--config", required=True)
    f.add_argument("--dataset", required=True)
    f.add_argument("--out", default=None)
    f.add_argument("--force", action="store_true")
    f.set_defaults(fn=cmd_fit_codebook)

    t = sub.add_parser("train", help="train the model")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--codebook", default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--memory", choices=["off", "intra", "full"], default=None)
    e.add_argument("--strategy", choices=["interleave", "both"], default=None)
    e.add_argument("--layers", choices=["1", "3", "5", "7", "all"], default=None)
    e.add_argument("--max-traj", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("rollout", help="run and dump one rollout")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--traj", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--memory", choices=["off", "intra", "full"], default="full")
    r.add_argument("--dump-frames", action="store_true")
    r.add_argument("--dump-memtrace", action="store_true")
    r.set_defaults(fn=cmd_rollout)

    c = sub.add_parser("report", help="comparison table from metric reports")
    c.add_argument("metrics", nargs="*")
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    _apply_determinism_env()
    args = build_parser().parse_args(argv)
    from .config import ConfigError

    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Refusal as e:
        print(f"refusing: {e}", file=sys.stderr)
        return EXIT_REFUSAL
    except MissingArtifact as e:
        print(f"missing: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
