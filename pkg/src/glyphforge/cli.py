"""Command-line entry point: ``glyphforge <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import GlyphForgeError

log = logging.getLogger("glyphforge")


def _parse_box(text: str):
    from .layout import BBox

    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected l,t,r,b; got {text!r}")
    return BBox(*parts)


def _parse_item(text: str):
    """``TEXT`` or ``TEXT@l,t,r,b``."""
    from .pipelines.inference import TextItem

    if "@" in text:
        label, box = text.rsplit("@", 1)
        return TextItem(label, _parse_box(box))
    return TextItem(text)


def _read_image(path: str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _stage_config(cfg: dict, key: str, stage: str):
    from .pipelines.training import StageConfig

    return StageConfig(stage=stage, seed=cfg["seed"], **cfg[key])


def _load_samples(data_dir: str):
    from .glyph_synth import load_shard

    return load_shard(data_dir)


def _load_model(path: str):
    from .pipelines.training import _resolve_checkpoint

    return _resolve_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, cfg):
    from .glyph_synth import generate_samples, write_shard

    d = cfg["data"]
    samples, styles = generate_samples(
        d["count"], d["resolution"], cfg["seed"], d["num_styles"], d["max_glyphs"], d["m"], d["val_fraction"]
    )
    path = write_shard(samples, _out_dir(cfg), styles)
    print(f"wrote {len(samples)} samples to {path}")


def cmd_train_stage1(args, cfg):
    import torch

    from .generator import GlyphGenerator, toy_config
    from .pipelines.training import TripletBank, prepare_vae, train_stage1

    torch.manual_seed(cfg["seed"])
    out = _out_dir(cfg)
    bank = TripletBank.from_samples(_load_samples(args.data))
    model = GlyphGenerator(toy_config(**cfg["model"]))
    v = cfg["vae"]
    warm, dec = prepare_vae(model, bank, v["warmup_steps"], v["decoder_steps"], v["lr"], cfg["seed"])
    curve = train_stage1(model, bank, _stage_config(cfg, "stage1", "1"))
    curve.write_csv(out / "stage1_loss.csv")
    model.save(out / "stage1.pt", {"stage": "1", "vae_final_loss": dec[-1] if dec else None})
    print(f"stage 1 final loss {curve.final:.5f}; checkpoint {out / 'stage1.pt'}")


def cmd_train_stage2(args, cfg):
    from .nn_common import parameter_checksum
    from .pipelines.clients import make_mllm
    from .pipelines.training import alignment_items, check_frozen, non_resampler_names, train_stage2, _resolve_checkpoint

    model = _resolve_checkpoint(args.checkpoint)
    out = _out_dir(cfg)
    triplets = [s.triplet for s in _load_samples(args.data) if s.split == "train"]
    mllm = make_mllm(cfg["clients"]["mllm"], model.cfg.mllm_dim)
    frozen = non_resampler_names(model)
    before = parameter_checksum(model, frozen)
    model, curve = train_stage2(model, alignment_items(triplets, model), _stage_config(cfg, "stage2", "2"), mllm)
    check_frozen(before, model, frozen)
    curve.write_csv(out / "stage2_loss.csv")
    model.save(out / "stage2.pt", {"stage": "2"})
    print(f"stage 2 align loss {curve.losses[0]:.5f} -> {curve.final:.5f}; checkpoint {out / 'stage2.pt'}")


def cmd_train_stage3(args, cfg):
    from .pipelines.clients import make_mllm
    from .pipelines.training import (
        PairBuildLog, SCORERS, build_preference_pairs, condition_for_triplet, make_preference_items,
        train_stage3_dpo, train_stage3_sft, _resolve_checkpoint,
    )

    model = _resolve_checkpoint(args.checkpoint)
    out = _out_dir(cfg)
    triplets = [s.triplet for s in _load_samples(args.data) if s.split == "train"]
    mllm = make_mllm(cfg["clients"]["mllm"], model.cfg.mllm_dim)
    items = make_preference_items(triplets, [condition_for_triplet(t) for t in triplets], model, mllm)
    sft_cfg = _stage_config(cfg, "stage3_sft", "3-sft")
    sft = train_stage3_sft(model, items, sft_cfg)
    sft.write_csv(out / "stage3_sft_loss.csv")
    dpo_cfg = _stage_config(cfg, "stage3_dpo", "3-dpo")
    report = PairBuildLog()
    pairs = build_preference_pairs(model, items, dpo_cfg.k_candidates, dpo_cfg.candidate_steps, cfg["seed"],
                                   SCORERS[dpo_cfg.scorer], report)
    dpo = train_stage3_dpo(model, items, pairs, dpo_cfg)
    dpo.write_csv(out / "stage3_dpo_loss.csv")
    _write_json(out / "stage3_pairs.json", {"pairs": len(pairs), "skipped": report.skipped})
    model.save(out / "stage3.pt", {"stage": "3"})
    print(f"stage 3: {len(pairs)} pairs, DPO loss {dpo.losses[0]:.4f} -> {dpo.final:.4f}")


def cmd_sample(args, cfg):
    import torch

    from PIL import Image

    from .pipelines.sampling import Conditions, SamplerConfig, sample_rgba
    from .pipelines.training import _stack

    out = _out_dir(cfg)
    model = _load_model(args.checkpoint)
    samples = _load_samples(args.data)
    if not 0 <= args.index < len(samples):
        raise GlyphForgeError(f"index {args.index} outside the shard (size {len(samples)})")
    trip = samples[args.index].triplet
    s = cfg["sampler"]
    with torch.no_grad():
        content = model.embed_content(_stack(trip.content_refs, model.dtype)[None])
        style = model.embed_style(_stack(trip.style_refs, model.dtype)[None])
        rgba = sample_rgba(model, Conditions(content, style), SamplerConfig(s["steps"], s["cfg_scale"], cfg["seed"]))[0]
    gt = np.concatenate([g.pixels for g in trip.ground_truth], axis=1)
    gen = np.concatenate([g.permute(1, 2, 0).double().numpy() for g in rgba], axis=1)
    grid = np.concatenate([gt, gen], axis=0)
    path = out / f"sample_{args.index:05d}.png"
    Image.fromarray(np.clip(np.round(grid * 255), 0, 255).astype(np.uint8), mode="RGBA").save(path)
    print(f"wrote {path} (top: ground truth, bottom: samples); mse {float(((grid[:gt.shape[0]] - grid[gt.shape[0]:]) ** 2).mean()):.5f}")


def _renderer(args, cfg):
    from .pipelines.inference import GlyphRenderer
    from .pipelines.sampling import SamplerConfig

    s = cfg["sampler"]
    return GlyphRenderer(_load_model(args.checkpoint), SamplerConfig(s["steps"], s["cfg_scale"], cfg["seed"]))


def _planner(cfg):
    from .layout import BaselinePlanner, MLLMPlanner
    from .pipelines.clients import make_layout_llm

    spec = cfg["clients"]["planner"]
    if spec == "baseline":
        return BaselinePlanner()
    return MLLMPlanner(make_layout_llm(spec))


def _finish_pipeline(result, cfg, name: str):
    from PIL import Image

    from .pipelines.inference import save_png

    out = _out_dir(cfg)
    save_png(result.image, out / f"{name}.png")
    Image.fromarray(np.clip(np.round(result.foreground * 255), 0, 255).astype(np.uint8), mode="RGBA").save(
        out / f"{name}_foreground.png"
    )
    _write_json(out / f"{name}_report.json", result.report())
    print(f"wrote {out / (name + '.png')}")


def cmd_edit(args, cfg):
    from .pipelines.clients import make_inpainter
    from .pipelines.inference import edit_pipeline

    result = edit_pipeline(_read_image(args.image), _parse_box(args.region), args.text, _renderer(args, cfg),
                           _planner(cfg), make_inpainter(cfg["clients"]["inpainter"]), seed=cfg["seed"])
    _finish_pipeline(result, cfg, "edit")


def cmd_generate(args, cfg):
    from .pipelines.clients import make_mllm
    from .pipelines.inference import generate_pipeline

    r = _renderer(args, cfg)
    result = generate_pipeline(_read_image(args.background), args.caption, [_parse_item(t) for t in args.item], r,
                               _planner(cfg), make_mllm(cfg["clients"]["mllm"], r.model.cfg.mllm_dim), seed=cfg["seed"])
    _finish_pipeline(result, cfg, "generate")


def cmd_t2d(args, cfg):
    from .pipelines.clients import make_mllm, make_t2i
    from .pipelines.inference import t2d_pipeline

    r = _renderer(args, cfg)
    w, h = (int(v) for v in args.size.lower().split("x"))
    result = t2d_pipeline(args.prompt, [_parse_item(t) for t in args.item], r, _planner(cfg),
                          make_mllm(cfg["clients"]["mllm"], r.model.cfg.mllm_dim), make_t2i(cfg["clients"]["t2i"]),
                          (w, h), seed=cfg["seed"])
    _finish_pipeline(result, cfg, "t2d")


def cmd_layout_eval(args, cfg):
    from .layout import RewardWeights, json_to_layout, total_reward

    pred = json_to_layout(Path(args.pred).read_text())
    gt = json_to_layout(Path(args.gt).read_text())
    ol, bl = (float(v) for v in args.weights.split(","))
    total, parts = total_reward(pred, gt, RewardWeights(ol, bl))
    payload = {"total": total, **parts, "weights": {"lambda_ol": ol, "lambda_bl": bl}}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if getattr(args, "out", None) is not None:
        _write_json(_out_dir(cfg) / "layout_reward.json", payload)


def cmd_eval(args, cfg):
    from .evaluation import identity_system, load_cases, run_benchmark, write_report
    from .pipelines.clients import make_ocr

    systems = {"identity": identity_system}
    if args.system not in systems:
        raise GlyphForgeError(f"unknown system {args.system!r}; available: {sorted(systems)}")
    ocr = make_ocr(args.ocr.lower() if not args.ocr.startswith("http") else args.ocr, cfg["seed"])
    result = run_benchmark(load_cases(args.cases), systems[args.system], ocr)
    jpath, _ = write_report(result, _out_dir(cfg))
    print(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {jpath}")


def style_features(samples, model=None) -> np.ndarray:
    """Unit-norm style descriptors: pooled style-encoder tokens, or downsampled glyph pixels without a model."""
    from .data_filter import normalize_rows

    if model is not None:
        import torch

        from .pipelines.training import _stack

        with torch.no_grad():
            feats = [model.embed_style(_stack(s.triplet.ground_truth, model.dtype)[None])[0].mean(0).double().numpy()
                     for s in samples]
        return normalize_rows(np.stack(feats))
    from .glyph_synth import blend_alpha

    feats = []
    for s in samples:
        img = np.mean([blend_alpha(g) for g in s.triplet.ground_truth], axis=0)
        h = img.shape[0] // 8
        feats.append(img[: h * 8, : h * 8].reshape(8, h, 8, h, 3).mean((1, 3)).ravel() - 0.5)
    return normalize_rows(np.stack(feats))


def cmd_filter_data(args, cfg):
    from .data_filter import filter_by_nsd, kmeans_fit
    from .glyph_synth import load_shard_styles, write_shard

    samples = _load_samples(args.data)
    model = _load_model(args.checkpoint) if args.checkpoint else None
    feats = style_features(samples, model)
    f = cfg["filter"]
    clusters = kmeans_fit(feats, k=min(f["k"], len(samples)), seed=cfg["seed"])
    kept, report = filter_by_nsd(samples, feats, clusters, f["threshold"], f["mode"],
                                 [s.sample_id for s in samples], f["halve"])
    out = _out_dir(cfg)
    report.write(out)
    write_shard(kept, out / "filtered", load_shard_styles(args.data))
    print(f"kept {len(kept)} of {len(samples)} samples; report in {out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set stage1.steps=500")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="glyphforge", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="render a synthetic triplet shard")
    s.add_argument("--count", type=int)
    s.add_argument("--resolution", type=int)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-stage1", parents=[common], help="VAE preparation and Stage-1 training")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_stage1)

    s = sub.add_parser("train-stage2", parents=[common], help="resampler alignment")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_stage2)

    s = sub.add_parser("train-stage3", parents=[common], help="adapter SFT followed by flow-DPO")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train_stage3)

    s = sub.add_parser("sample", parents=[common], help="sample one shard triplet")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("edit", parents=[common], help="replace the text inside a region")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--region", required=True, help="l,t,r,b")
    s.add_argument("--text", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("generate", parents=[common], help="render text items onto a background")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--background", required=True)
    s.add_argument("--caption", default="")
    s.add_argument("--item", action="append", required=True, help="TEXT or TEXT@l,t,r,b (repeatable)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("t2d", parents=[common], help="text-to-design: background from a prompt, then generate")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--item", action="append", required=True)
    s.add_argument("--size", default="128x128", help="WxH")
    s.set_defaults(func=cmd_t2d)

    s = sub.add_parser("layout-eval", parents=[common], help="reward breakdown of a predicted layout")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--weights", default="0.5,0.5", help="lambda_ol,lambda_bl")
    s.set_defaults(func=cmd_layout_eval)

    s = sub.add_parser("eval", parents=[common], help="OCR-based text rendering benchmark")
    s.add_argument("--cases", required=True)
    s.add_argument("--system", default="identity")
    s.add_argument("--ocr", default="oracle", help="oracle, empty, noisy, stub or a URL")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("filter-data", parents=[common], help="normalized-style-distance filtering")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--threshold", type=float)
    s.add_argument("--mode", choices=["keep_above", "keep_below"])
    s.set_defaults(func=cmd_filter_data)
    return p


def _flags(args) -> dict:
    """Maps subcommand flags onto config keys so they sit on the top layer."""
    flags: dict = {"seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    mapping = {
        "count": ("data", "count"),
        "resolution": ("data", "resolution"),
        "threshold": ("filter", "threshold"),
        "mode": ("filter", "mode"),
        "cfg_scale": ("sampler", "cfg_scale"),
    }
    for attr, (section, key) in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            flags.setdefault(section, {})[key] = v
    steps = getattr(args, "steps", None)
    if steps is not None:
        section = {"train-stage1": "stage1", "train-stage2": "stage2", "sample": "sampler"}[args.command]
        flags.setdefault(section, {})["steps"] = steps
    return flags


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "set", None), _flags(args))
        args.func(args, cfg)
    except (GlyphForgeError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
