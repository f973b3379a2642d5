"""Command-line surface: synth, train, counterfactual, eval, sweep, ablate.

Every command is reproducible from its config file plus explicit flag
overrides; outputs embed a config echo. CFDIFF_THREADS caps both torch's
intra-op threads and harness worker counts.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .conditions import Condition
from .container import atomic_write_text, read_tensors, text_to_u8, u8_to_text, write_pgm, write_tensors
from .experiments import (
    ABLATION_VARIANTS,
    ablation_suite,
    evaluate_baseline,
    evaluate_counterfactual,
    evaluate_heatmaps,
    reports_to_csv,
    summary_table,
    sweep,
)
from .net import NetConfig
from .pipeline import counterfactual, to_model_range
from .runconfig import Config, ConfigError, SectionView, load_config, serialize_config, validate_config
from .sampler import SamplerConfig
from .schedule import build_schedule
from .synthetic import CorpusSpec, generate_corpus, slices_to_arrays
from .training import TrainConfig, TrainingDiverged, train, write_loss_log


def thread_cap(requested: int | None = None) -> int:
    cap = os.environ.get("CFDIFF_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        return max(1, limit)
    return max(1, min(requested, limit))


def _setup_torch_threads():
    import torch

    torch.set_num_threads(thread_cap())


_CORPUS_KEYS = {
    "train_count",
    "val_count",
    "test_count",
    "size",
    "lesion_prob",
    "lesion_radius",
    "lesion_shift_ch0",
    "lesion_shift_ch1",
    "texture_amp",
    "confounder_prob",
    "seed",
}
_NET_KEYS = {
    "condition_mode",
    "base",
    "channel_mults",
    "heads",
    "d_tau",
    "groups",
    "time_dim",
    "attn_levels",
    "in_channels",
}
_SCHEDULE_KEYS = {"T", "kind", "beta_start", "beta_end"}
_TRAIN_KEYS = {"lr", "batch_size", "steps", "drop_prob", "ema_decay", "seed", "subset"}
_SAMPLER_KEYS = {"w", "l_fraction", "s", "ddim_steps", "normalization"}


def _corpus_spec(cfg: Config, seed_override: int | None) -> CorpusSpec:
    view = SectionView(cfg, "corpus")
    radius = view.get_floats("lesion_radius", [2.5, 4.5])
    sh0 = view.get_floats("lesion_shift_ch0", [0.08, 0.32])
    sh1 = view.get_floats("lesion_shift_ch1", [0.04, 0.10])
    seed = view.get_int("seed", 0) if seed_override is None else seed_override
    return CorpusSpec(
        train_count=view.get_int("train_count", 384),
        val_count=view.get_int("val_count", 64),
        test_count=view.get_int("test_count", 128),
        size=view.get_int("size", 32),
        lesion_prob=view.get_float("lesion_prob", 0.5),
        lesion_radius=(radius[0], radius[1]),
        lesion_shift=((sh0[0], sh0[1]), (sh1[0], sh1[1])),
        texture_amp=view.get_float("texture_amp", 0.09),
        confounder_prob=view.get_float("confounder_prob", 0.2),
        seed=seed,
    )


def _net_config(cfg: Config) -> NetConfig:
    view = SectionView(cfg, "net")
    mults = view.get_str("channel_mults", "1,2")
    attn = view.get_str("attn_levels", "1")
    return NetConfig(
        in_channels=view.get_int("in_channels", 2),
        base=view.get_int("base", 32),
        channel_mults=tuple(int(v) for v in mults.split(",") if v != ""),
        heads=view.get_int("heads", 4),
        d_tau=view.get_int("d_tau", 8),
        groups=view.get_int("groups", 8),
        time_dim=view.get_int("time_dim", 128),
        attn_levels=tuple(int(v) for v in attn.split(",") if v != ""),
        condition_mode=view.get_str("condition_mode", "attention"),
    )


def _schedule(cfg: Config):
    view = SectionView(cfg, "schedule")
    return build_schedule(
        view.get_int("T", 1000),
        kind=view.get_str("kind", "linear"),
        beta_start=view.get_float("beta_start", 1e-4),
        beta_end=view.get_float("beta_end", 0.02),
    )


def _sampler_config(cfg: Config, section: str, args) -> SamplerConfig:
    view = SectionView(cfg, section)
    ddim_steps = view.get_int("ddim_steps", 100)
    if getattr(args, "ddim_steps", None) is not None:
        ddim_steps = args.ddim_steps
    base = SamplerConfig(
        w=view.get_float("w", 2.0),
        ddim_steps=ddim_steps,
        s=view.get_float("s", 99.0),
        normalization=view.get_str("normalization", "dynamic"),
        L=ddim_steps,
    ).with_depth_fraction(view.get_float("l_fraction", 0.3))
    if getattr(args, "w", None) is not None:
        base = replace(base, w=args.w)
    if getattr(args, "s", None) is not None:
        base = replace(base, s=args.s)
    if getattr(args, "L", None) is not None:
        base = replace(base, L=args.L)
    return base


def _load_split(corpus_dir: str | Path, split: str):
    tensors = read_tensors(Path(corpus_dir) / f"{split}.cfd")
    return tensors["images"], tensors["masks"], tensors["labels"].astype(np.int64)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    validate_config(cfg, {"corpus": _CORPUS_KEYS, "paths": {"out_dir"}})
    spec = _corpus_spec(cfg, args.seed)
    out_dir = Path(args.out or SectionView(cfg, "paths").get_str("out_dir", "corpus"))
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = generate_corpus(spec)
    manifest = []
    for split, slices in corpus.items():
        images, masks, labels = slices_to_arrays(slices)
        write_tensors(
            out_dir / f"{split}.cfd",
            {
                "images": images,
                "masks": masks,
                "labels": labels.astype(np.uint8),
                "meta/config": text_to_u8(serialize_config(cfg)),
            },
        )
        for index, s in enumerate(slices):
            manifest.append(f"{s.patient_id}\t{s.label.name.lower()}\t{split}\t{index}")
    atomic_write_text(out_dir / "manifest.tsv", "\n".join(manifest) + "\n")
    print(f"wrote {len(corpus)} split containers + manifest to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    validate_config(
        cfg,
        {
            "paths": {"corpus_dir", "checkpoint_out", "log_out"},
            "net": _NET_KEYS,
            "schedule": _SCHEDULE_KEYS,
            "train": _TRAIN_KEYS,
        },
        required={"paths": {"corpus_dir"}},
    )
    paths = SectionView(cfg, "paths")
    tview = SectionView(cfg, "train")
    subset = tview.get_str("subset", "all")
    tcfg = TrainConfig(
        lr=tview.get_float("lr", 1e-4),
        batch_size=tview.get_int("batch_size", 16),
        steps=tview.get_int("steps", 2000),
        drop_prob=tview.get_float("drop_prob", 0.35),
        ema_decay=tview.get_float("ema_decay", 0.999),
        seed=tview.get_int("seed", 0) if args.seed is None else args.seed,
    )
    net_cfg = _net_config(cfg)
    sched = _schedule(cfg)

    images, _, labels = _load_split(paths.get_str("corpus_dir"), "train")
    if subset == "healthy":
        keep = labels == int(Condition.HEALTHY)
        images, labels = images[keep], labels[keep]
    elif subset != "all":
        raise ConfigError(f"unknown train subset {subset!r}")

    result = train(to_model_range(images).astype(np.float32), labels, sched, net_cfg, tcfg)
    ckpt_path = Path(args.out or paths.get_str("checkpoint_out", "checkpoint.cfd"))
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, result.denoiser, sched, extra_config=cfg)
    log_path = Path(paths.get_str("log_out", str(ckpt_path.with_suffix(".loss.csv"))))
    write_loss_log(log_path, result)
    print(
        f"trained {tcfg.steps} steps (final loss {result.history[-1][1]:.4f}, "
        f"realized drop fraction {result.realized_drop_fraction:.4f}); "
        f"checkpoint: {ckpt_path}"
    )
    return 0


def cmd_counterfactual(args) -> int:
    _setup_torch_threads()
    denoiser, sched, _ = load_checkpoint(args.checkpoint)
    tensors = read_tensors(args.input)
    if "images" not in tensors:
        raise ConfigError(f"{args.input}: no 'images' tensor")
    images = tensors["images"]
    cfg = SamplerConfig(
        w=args.w if args.w is not None else 2.0,
        ddim_steps=args.ddim_steps if args.ddim_steps is not None else 100,
        s=args.s if args.s is not None else 99.0,
        normalization=args.normalization,
        L=args.L if args.L is not None else 30,
    )
    predict = denoiser.predictor(use_ema=True)
    result = counterfactual(to_model_range(images).astype(np.float32), cfg, predict, sched)
    echo: Config = {
        "counterfactual": {
            "checkpoint": str(args.checkpoint),
            "input": str(args.input),
            "w": repr(cfg.w),
            "L": str(cfg.L),
            "ddim_steps": str(cfg.ddim_steps),
            "s": repr(cfg.s),
            "normalization": cfg.normalization,
        }
    }
    write_tensors(
        args.out,
        {
            "heatmaps": result.heatmap.astype(np.float32),
            "counterfactuals": result.counterfactual.astype(np.float32),
            "latents": result.latent.astype(np.float32),
            "meta/config": text_to_u8(serialize_config(echo)),
        },
    )
    if args.pgm:
        pgm_dir = Path(args.pgm)
        pgm_dir.mkdir(parents=True, exist_ok=True)
        for i, heat in enumerate(result.heatmap[:, 0]):
            write_pgm(pgm_dir / f"heatmap_{i:04d}.pgm", heat)
    print(f"wrote counterfactuals for {images.shape[0]} images to {args.out}")
    return 0


def _check_thresholds(cfg: Config, reports) -> int:
    view = SectionView(cfg, "thresholds")
    code = 0
    by_method = {r.method: r for r in reports}
    for key, value in view.items.items():
        metric, _, method = key.partition("@")
        if metric not in ("auprc", "ceil_dice", "best_threshold"):
            raise ConfigError(f"unknown threshold metric {metric!r}")
        if method and method not in by_method:
            raise ConfigError(f"threshold names unknown method {method!r}")
        target = float(value)
        for r in [by_method[method]] if method else reports:
            got = getattr(r, metric)
            if not np.isfinite(got) or got < target:
                print(f"threshold violated: {metric}={got:.4f} < {target} ({r.method})")
                code = 1
    return code


def cmd_eval(args) -> int:
    _setup_torch_threads()
    cfg = load_config(args.config)
    validate_config(
        cfg,
        {
            "eval": {"method", "checkpoint", "corpus_dir", "split", "seed", "batch", "heatmaps"}
            | _SAMPLER_KEYS,
            "thresholds": None,  # free-form metric[@method] = minimum
        },
        required={"eval": {"corpus_dir", "method"}},
    )
    view = SectionView(cfg, "eval")
    images, masks, _ = _load_split(view.get_str("corpus_dir"), view.get_str("split", "test"))
    method = view.get_str("method")
    seed = view.get_int("seed", 0)
    if method == "baseline":
        report = evaluate_baseline(images, masks)
    elif method == "heatmaps":
        tensors = read_tensors(view.get_str("heatmaps"))
        if "heatmaps" not in tensors:
            raise ConfigError("heatmap container lacks a 'heatmaps' tensor")
        report = evaluate_heatmaps(
            tensors["heatmaps"], masks, "heatmaps", {"data_hash": ""}
        )
    elif method == "counterfactual":
        denoiser, sched, _ = load_checkpoint(view.get_str("checkpoint"))
        scfg = _sampler_config(cfg, "eval", args)
        report = evaluate_counterfactual(
            images, masks, scfg, denoiser.predictor(), sched, seed=seed,
            batch=view.get_int("batch", 64),
        )
    else:
        raise ConfigError(f"unknown eval method {method!r}")
    out = Path(args.out or "eval.csv")
    reports_to_csv([report], out)
    print(summary_table([report]))
    print(f"report: {out}")
    return _check_thresholds(cfg, [report])


def cmd_sweep(args) -> int:
    _setup_torch_threads()
    cfg = load_config(args.config)
    validate_config(
        cfg,
        {
            "sweep": {"checkpoint", "corpus_dir", "split", "w_grid", "l_fractions", "seed", "workers"}
            | _SAMPLER_KEYS,
        },
        required={"sweep": {"checkpoint", "corpus_dir"}},
    )
    view = SectionView(cfg, "sweep")
    images, masks, _ = _load_split(view.get_str("corpus_dir"), view.get_str("split", "val"))
    denoiser, sched, _ = load_checkpoint(view.get_str("checkpoint"))
    base = _sampler_config(cfg, "sweep", args)
    workers = thread_cap(args.workers or view.get_int("workers", 1))
    reports = sweep(
        images,
        masks,
        view.get_floats("w_grid", [0.0, 1.0, 1.5, 2.0, 3.0, 5.0]),
        view.get_floats("l_fractions", [0.1, 0.25, 0.5, 0.75, 1.0]),
        base,
        denoiser.predictor(),
        sched,
        workers=workers,
        seed=view.get_int("seed", 0),
    )
    out = Path(args.out or "sweep.csv")
    reports_to_csv(reports, out)
    print(summary_table(reports))
    print(f"report: {out}")
    return 0


def cmd_ablate(args) -> int:
    _setup_torch_threads()
    cfg = load_config(args.config)
    validate_config(
        cfg,
        {
            "ablate": {
                "checkpoint_adagroup",
                "checkpoint_attention",
                "corpus_dir",
                "split",
                "seed",
            }
            | _SAMPLER_KEYS,
            "thresholds": None,
        },
        required={"ablate": {"checkpoint_adagroup", "checkpoint_attention", "corpus_dir"}},
    )
    view = SectionView(cfg, "ablate")
    images, masks, _ = _load_split(view.get_str("corpus_dir"), view.get_str("split", "test"))
    ada, sched, _ = load_checkpoint(view.get_str("checkpoint_adagroup"))
    attn, sched_attn, _ = load_checkpoint(view.get_str("checkpoint_attention"))
    if not np.array_equal(sched.betas, sched_attn.betas):
        raise ConfigError("ablation checkpoints trained on different schedules")
    base = _sampler_config(cfg, "ablate", args)
    w = base.w
    predictors = {
        "cdpm": ada.predictor(),
        "implicit_guidance": ada.predictor(),
        "attention_conditioning": attn.predictor(),
        "dynamic_normalization": attn.predictor(),
    }
    configs = {
        "cdpm": replace(base, w=1.0, normalization="static-clip"),
        "implicit_guidance": replace(base, w=w, normalization="static-clip"),
        "attention_conditioning": replace(base, w=w, normalization="static-clip"),
        "dynamic_normalization": replace(base, w=w, normalization="dynamic"),
    }
    reports = ablation_suite(images, masks, predictors, configs, sched, seed=view.get_int("seed", 0))
    out = Path(args.out or "ablation.csv")
    reports_to_csv(reports, out)
    print(summary_table(reports))
    print(f"report: {out}")
    return _check_thresholds(cfg, reports)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfdiff",
        description="Counterfactual diffusion toolkit: train, localize, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path")
        p.add_argument("--checkpoint", help="checkpoint container")
        p.add_argument("--w", type=float, help="guidance scale")
        p.add_argument("--L", type=int, help="encode depth in DDIM steps")
        p.add_argument("--s", type=float, help="dynamic normalization percentile")
        p.add_argument("--ddim-steps", type=int, dest="ddim_steps", help="DDIM grid size")
        p.add_argument("--workers", type=int, help="parallel worker cap")
        return p

    add("synth", cmd_synth, "generate the synthetic corpus").set_defaults(need_config=True)
    add("train", cmd_train, "train a denoiser checkpoint").set_defaults(need_config=True)
    p_cf = add("counterfactual", cmd_counterfactual, "heatmaps for an image container")
    p_cf.add_argument("--input", required=True, help="input image container")
    p_cf.add_argument("--pgm", help="directory for PGM heatmap previews")
    p_cf.add_argument(
        "--normalization",
        default="dynamic",
        choices=["dynamic", "static-clip", "none"],
    )
    add("eval", cmd_eval, "evaluate a method on a split").set_defaults(need_config=True)
    add("sweep", cmd_sweep, "hyperparameter sweep on the validation split").set_defaults(need_config=True)
    add("ablate", cmd_ablate, "four-variant component ablation").set_defaults(need_config=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "need_config", False) and not args.config:
        print(f"{args.command}: --config is required", file=sys.stderr)
        return 2
    if args.command == "counterfactual" and not args.checkpoint:
        print("counterfactual: --checkpoint is required", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"{args.command}: aborted, {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
