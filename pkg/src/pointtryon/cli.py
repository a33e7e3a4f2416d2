"""Command-line surface.

Subcommands: gen-data, train-flow, pretrain, finetune, sample, eval,
ablate, visualize. Every subcommand accepts --config (a JSON file of
TrainConfig fields, with "generator" holding GeneratorParams overrides),
--seed and --out-dir.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import diffusion, tensorio
from .networks import ConditionBundle
from .synthdata import (
    GeneratorParams,
    generate_split,
    ensure_disjoint,
    load_dataset,
    save_dataset,
)
from .training import (
    TensorData,
    TrainConfig,
    TryOnSampler,
    FrozenEncoders,
    LearnedFlowProvider,
    evaluate_model,
    finetune_spm,
    flow_epe,
    format_ablation_table,
    load_dual_branch,
    load_model_state,
    pretrain_base_geo,
    run_ablation,
    save_model,
    train_flow,
    train_variant,
)
from .flownet import FlowEstimator


def _load_config(path: str | None) -> tuple[TrainConfig, GeneratorParams]:
    if path is None:
        return TrainConfig(), GeneratorParams()
    raw = json.loads(Path(path).read_text())
    gen_raw = raw.pop("generator", {})
    gen = GeneratorParams(**{**asdict(GeneratorParams()), **{
        k: tuple(v) if k.endswith("_hw") else v for k, v in gen_raw.items()
    }})
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    cfg = TrainConfig(**{**{k: v for k, v in raw.items()}})
    return cfg, gen


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (TrainConfig fields + 'generator')")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default="runs", help="output directory")


def _datasets(args, gen: GeneratorParams, n_train: int, n_test: int):
    if getattr(args, "data_dir", None):
        root = Path(args.data_dir)
        train = load_dataset(root / "train")
        test = load_dataset(root / "test")
    else:
        train = generate_split(n_train, 0, gen)
        test = generate_split(n_test, 10_000, gen)
        ensure_disjoint(train, test)
    return train, test


def cmd_gen_data(args) -> int:
    cfg, gen = _load_config(args.config)
    out = Path(args.out_dir)
    train = generate_split(args.n_train, 0, gen)
    test = generate_split(args.n_test, 10_000, gen)
    ensure_disjoint(train, test)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {args.n_train} train / {args.n_test} test samples to {out}")
    return 0


def cmd_train_flow(args) -> int:
    cfg, gen = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, total_steps=args.steps)
    train, test = _datasets(args, gen, args.n_train, 64)
    net, hist = train_flow(cfg, train, log_every=100)
    epe = flow_epe(net, TensorData(test))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "flow.ckpt", net, cfg)
    (out / "flow_metrics.json").write_text(json.dumps(
        {"final_loss": hist[-1], "test_epe_px": epe}, indent=2))
    print(f"flow checkpoint -> {out / 'flow.ckpt'} (test EPE {epe:.3f} px)")
    return 0


def cmd_pretrain(args) -> int:
    cfg, gen = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, variant=args.variant)
    train, test = _datasets(args, gen, args.n_train, 64)
    data = TensorData(train)
    model, _, hist = train_variant(cfg, data, log_every=100)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / f"{cfg.variant}.ckpt", model, cfg)
    metrics = evaluate_model(model, cfg, TensorData(test), eval_seed=cfg.seed)
    (out / f"{cfg.variant}_metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"{cfg.variant} checkpoint -> {out} | {metrics}")
    return 0


def cmd_finetune(args) -> int:
    cfg, gen = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, variant=args.variant,
                  flow_mode="oracle" if args.oracle_flow else "learned")
    train, test = _datasets(args, gen, args.n_train, 64)
    data = TensorData(train)
    base_model, _ = load_dual_branch(args.base_ckpt, data)
    flow_net = None
    if not args.oracle_flow:
        if not args.flow_ckpt:
            print("need --flow-ckpt or --oracle-flow", file=sys.stderr)
            return 2
        flow_net = FlowEstimator()
        load_model_state(args.flow_ckpt, flow_net)
    model, encoders, _ = finetune_spm(cfg, data, base_model, flow_net=flow_net,
                                      log_every=100)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / f"{cfg.variant}.ckpt", model, cfg)
    metrics = evaluate_model(model, cfg, TensorData(test), encoders=encoders,
                             flow_net=flow_net, eval_seed=cfg.seed)
    (out / f"{cfg.variant}_metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"{cfg.variant} checkpoint -> {out} | {metrics}")
    return 0


def _sample_images(args, cfg, gen, n: int):
    """Generate outputs for the first n test samples using a checkpoint."""
    train, test = _datasets(args, gen, 1, max(n, 1))
    data = TensorData(test)
    model, cfg = load_dual_branch(args.ckpt, data, cfg=None)
    encoders = None
    if model.config.use_injection:
        base_model, _ = load_dual_branch(args.base_ckpt, data)
        encoders = FrozenEncoders(base_model)
    sub = data.samples[:n]
    bundle = ConditionBundle(
        agnostic=data.agnostic[:n],
        garment=data.garment[:n],
        depth=data.depth[:n] if cfg.use_geometry else None,
        normal=data.normal[:n] if cfg.use_geometry else None,
    )
    flows = [s.gt_flow for s in sub] if model.config.use_injection else None
    sampler = TryOnSampler(model, cfg, encoders=encoders, flows=flows)
    out = diffusion.sample(sampler, bundle, cfg.schedule(),
                           guidance=cfg.guidance_scale, seed=args.seed or 0,
                           num_steps=cfg.sample_steps)
    return out.clamp(-1, 1).numpy(), sub, cfg


def cmd_sample(args) -> int:
    cfg, gen = _load_config(args.config)
    out_np, samples, cfg = _sample_images(args, cfg, gen, args.n)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        tensorio.save_image_png(out / f"output_{i:03d}.png", out_np[i])
        tensorio.save_image_png(out / f"target_{i:03d}.png", s.person)
        tensorio.save_image_png(out / f"garment_{i:03d}.png", s.garment)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg, gen = _load_config(args.config)
    train, test = _datasets(args, gen, 1, args.n_test)
    data = TensorData(test)
    model, cfg = load_dual_branch(args.ckpt, data)
    encoders = None
    if model.config.use_injection:
        base_model, _ = load_dual_branch(args.base_ckpt, data)
        encoders = FrozenEncoders(base_model)
    metrics = evaluate_model(model, cfg, data, encoders=encoders,
                             eval_seed=args.seed or 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg, gen = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    train, test = _datasets(args, gen, args.n_train, args.n_test)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    k_sweep = tuple(int(k) for k in args.k_sweep.split(","))
    report = run_ablation(train, test, seeds=seeds, k_sweep=k_sweep, cfg=cfg,
                          out_dir=args.out_dir, cache_dir=args.cache_dir,
                          log_every=args.log_every)
    print(format_ablation_table(report))
    return 0


def cmd_visualize(args) -> int:
    from PIL import Image, ImageDraw

    from .metrics import correspondence_rate

    cfg, gen = _load_config(args.config)
    out_np, samples, cfg = _sample_images(args, cfg, gen, args.n)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoom = 6
    for i, s in enumerate(samples):
        rep = correspondence_rate(s.garment, out_np[i], seed=args.seed or 0)
        g = Image.fromarray(tensorio.image_to_u8(np.moveaxis(s.garment, 0, -1)))
        o = Image.fromarray(tensorio.image_to_u8(np.moveaxis(out_np[i], 0, -1)))
        g = g.resize((g.width * zoom, g.height * zoom), Image.NEAREST)
        o = o.resize((o.width * zoom, o.height * zoom), Image.NEAREST)
        panel = Image.new("RGB", (g.width + o.width + 8, max(g.height, o.height)), "white")
        panel.paste(g, (0, 0))
        panel.paste(o, (g.width + 8, 0))
        draw = ImageDraw.Draw(panel)
        for (pg, po), ok in zip(rep.pairs, rep.inliers):
            if not ok:
                continue
            a = (pg[1] * zoom, pg[0] * zoom)
            b = (g.width + 8 + po[1] * zoom, po[0] * zoom)
            draw.line([a, b], fill=(0, 200, 0), width=1)
            draw.ellipse([a[0] - 2, a[1] - 2, a[0] + 2, a[1] + 2], fill=(0, 220, 0))
            draw.ellipse([b[0] - 2, b[1] - 2, b[0] + 2, b[1] + 2], fill=(0, 220, 0))
        panel.save(out / f"correspondence_{i:03d}.png")

        overlay = Image.fromarray(tensorio.image_to_u8(np.moveaxis(s.person, 0, -1)))
        overlay = overlay.resize((overlay.width * zoom, overlay.height * zoom), Image.NEAREST)
        draw = ImageDraw.Draw(overlay)
        for (x, y) in s.gt_points_h.coords:
            draw.ellipse([y * zoom - 2, x * zoom - 2, y * zoom + 2, x * zoom + 2],
                         fill=(255, 40, 40))
        overlay.save(out / f"points_{i:03d}.png")
        print(f"sample {i}: inliers {rep.inlier_count}/{len(rep.pairs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pointtryon",
        description="Point-matched diffusion try-on: synthetic benchmark, training and evaluation",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("gen-data", help="generate and persist a dataset")
    _add_common(sp)
    sp.add_argument("--n-train", type=int, default=512)
    sp.add_argument("--n-test", type=int, default=64)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-flow", help="train the flow estimator")
    _add_common(sp)
    sp.add_argument("--data-dir")
    sp.add_argument("--n-train", type=int, default=512)
    sp.add_argument("--steps", type=int, default=600)
    sp.set_defaults(fn=cmd_train_flow)

    sp = sub.add_parser("pretrain", help="train base or base_geo from scratch")
    _add_common(sp)
    sp.add_argument("--variant", choices=("base", "base_geo"), default="base_geo")
    sp.add_argument("--data-dir")
    sp.add_argument("--n-train", type=int, default=512)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune with point injection")
    _add_common(sp)
    sp.add_argument("--variant", choices=("base_geo_spm", "base_geo_spm_ploss"),
                    default="base_geo_spm_ploss")
    sp.add_argument("--base-ckpt", required=True)
    sp.add_argument("--flow-ckpt")
    sp.add_argument("--oracle-flow", action="store_true")
    sp.add_argument("--data-dir")
    sp.add_argument("--n-train", type=int, default=512)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("sample", help="generate outputs from a checkpoint")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--base-ckpt", help="base_geo checkpoint (injection models)")
    sp.add_argument("--data-dir")
    sp.add_argument("--n", type=int, default=4)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="run metrics over the test split")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--base-ckpt")
    sp.add_argument("--data-dir")
    sp.add_argument("--n-test", type=int, default=64)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run the full ablation protocol")
    _add_common(sp)
    sp.add_argument("--data-dir")
    sp.add_argument("--n-train", type=int, default=512)
    sp.add_argument("--n-test", type=int, default=64)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--k-sweep", default="10,25,50,75")
    sp.add_argument("--cache-dir")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("visualize", help="correspondence and point-overlay panels")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--base-ckpt")
    sp.add_argument("--data-dir")
    sp.add_argument("--n", type=int, default=2)
    sp.set_defaults(fn=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
