"""Command line front end: one subcommand per pipeline stage.

Precedence for every setting is flag > config file > built-in default.
All subcommands exit nonzero on contract violations and print the offending
detail to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .serialize import FormatError
from .story import (
    StoryConfig,
    load_config,
    run_ablation_sampling_rate,
    run_generate_story,
    run_generate_transitions,
    run_metrics,
    run_train_image,
    run_train_motion,
    write_image_dataset,
    write_transition_dataset,
)
from .tensor import ContractError, DimensionError

__all__ = ["build_parser", "main"]


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--seed", type=int, metavar="U64", help="generation seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--tile-size", type=int, metavar="N",
                   help="batch window length for consistent attention")
    p.add_argument("--sampling-rate", type=float, metavar="F",
                   help="fraction of window tokens mixed into K/V")
    p.add_argument("--steps", type=int, metavar="N", help="sampler steps")
    p.add_argument("--guidance", type=float, metavar="F",
                   help="guidance scale for image sampling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ministory",
        description="Toy pipeline for consistent story images and "
                    "transition clips.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("make-dataset", "render seeded image and clip datasets to disk"),
        ("train-image", "train the prompt-conditioned image denoiser"),
        ("train-motion", "train the transition clip model"),
        ("generate-story", "sample one consistent image per prompt line"),
        ("generate-transitions", "generate clips between story images"),
        ("metrics", "score an existing story image directory"),
        ("ablate", "sweep the attention sampling rate"),
    ]
    for name, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
        if name == "ablate":
            p.add_argument("--rate-list", metavar="CSV",
                           help="comma separated sampling rates")
    return parser


_FLAG_FIELDS = {
    "seed": "seed",
    "out": "out_dir",
    "tile_size": "tile_size",
    "sampling_rate": "sampling_rate",
    "steps": "steps",
    "guidance": "guidance",
}


def _resolve(args: argparse.Namespace) -> StoryConfig:
    cfg = load_config(args.config) if args.config else StoryConfig()
    overrides = {
        field: getattr(args, attr)
        for attr, field in _FLAG_FIELDS.items()
        if getattr(args, attr, None) is not None
    }
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _parse_rates(text: str) -> list[float]:
    rates = []
    for part in text.split(","):
        part = part.strip()
        try:
            rates.append(float(part))
        except ValueError:
            raise ContractError(f"bad rate {part!r} in --rate-list") from None
    return rates


def _write_report(cfg: StoryConfig, report, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
        f.write("\n")
    return path


def _run(args: argparse.Namespace) -> None:
    cfg = _resolve(args)
    if args.command == "make-dataset":
        images_cfg = dataclasses.replace(
            cfg, out_dir=os.path.join(cfg.out_dir, "images"))
        clips_cfg = dataclasses.replace(
            cfg, out_dir=os.path.join(cfg.out_dir, "clips"))
        write_image_dataset(images_cfg)
        write_transition_dataset(clips_cfg)
        print(os.path.join(images_cfg.out_dir, "index.json"))
        print(os.path.join(clips_cfg.out_dir, "index.json"))
    elif args.command == "train-image":
        run_train_image(cfg)
        print(cfg.image_checkpoint)
    elif args.command == "train-motion":
        run_train_motion(cfg)
        print(cfg.motion_checkpoint)
    elif args.command == "generate-story":
        manifest = run_generate_story(cfg)
        print(os.path.join(cfg.out_dir, "story_manifest.json"))
        print(f"{len(manifest['outputs'])} images")
    elif args.command == "generate-transitions":
        manifest = run_generate_transitions(cfg)
        print(os.path.join(cfg.out_dir, "transitions_manifest.json"))
        print(f"{len(manifest['clips'])} clips")
    elif args.command == "metrics":
        report = run_metrics(cfg)
        path = _write_report(cfg, report, "metrics_report.json")
        print(path)
        print(json.dumps(report.values, sort_keys=True))
    elif args.command == "ablate":
        raw = getattr(args, "rate_list", None)
        rates = _parse_rates(raw) if raw else [0.0, 0.3, 0.5, 1.0]
        report = run_ablation_sampling_rate(cfg, rates)
        path = _write_report(cfg, report, "ablation_report.json")
        print(path)
        for row in report.breakdown:
            print(f"rate {row['rate']:g}: "
                  f"similarity {row['character_similarity']:.6f}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ContractError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _run(args)
    except (ContractError, DimensionError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
