"""``inpaint-swap`` command line: gen-data, train, swap, headswap, eval, grid.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
writes ``command.json`` (arguments, resolved config, seed) into its output
directory so a run can be repeated from that file alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import ConfigError, TrainConfig, load_config
from .toy.dataset import read_image, read_label_map, read_landmarks, write_image

log = logging.getLogger("inpaint_swap")

DATA_ENV = "INPAINT_SWAP_DATA"


class UsageError(Exception):
    """Bad flags or flag combinations (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_data() -> Optional[str]:
    return os.environ.get(DATA_ENV) or None


def _echo(out: Path, command: str, args: argparse.Namespace, cfg: Optional[TrainConfig] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    blob = {"command": command, "version": __version__, "args": flags}
    if cfg is not None:
        blob["config"] = cfg.to_dict()
        blob["config_hash"] = cfg.hash()
    (out / "command.json").write_text(json.dumps(blob, indent=2, sort_keys=True, default=str) + "\n")


def _data_root(args) -> Path:
    root = args.data or _default_data()
    if root is None:
        raise UsageError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(root)


def _resolve_config(args) -> TrainConfig:
    """Config file first, then flag overrides (flags win)."""
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        over["lr"] = args.lr
    if getattr(args, "steps", None) is not None:
        over["n_train_steps"] = args.steps
    return cfg.override(**over) if over else cfg


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .toy.dataset import generate_toy_dataset

    out = Path(args.out or _data_root(args))
    if (out / "manifest.jsonl").exists() and not args.force:
        raise UsageError(f"{out}: dataset already exists (use --force to overwrite)")
    records = generate_toy_dataset(args.identities, args.per_identity, args.size, args.seed, out)
    _echo(out, "gen-data", args)
    print(f"wrote {len(records)} items to {out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_featurizers
    from .toy.dataset import load_dataset
    from .training import train

    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo(out, "train", args, cfg)
    dataset = load_dataset(_data_root(args))
    feats = load_featurizers(args.featurizers) if args.featurizers else None
    summary = train(cfg, dataset, out, featurizers=feats, resume=args.resume, stop_after=args.stop_after)
    print(f"trained {summary['steps']}/{summary['total_steps']} steps; checkpoint {summary['checkpoint']}")
    return 0


def _swap_requests(args, dataset):
    from .evaluation import make_pairs
    from .inference import SwapRequest

    if args.source or args.target:
        if not (args.source and args.target and args.source_labels and args.target_labels):
            raise UsageError("--source, --source-labels, --target and --target-labels go together")
        for p in (args.source, args.target, args.source_labels, args.target_labels, args.target_landmarks):
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"{p}: no such file")
        lms = read_landmarks(Path(args.target_landmarks)) if args.target_landmarks else None
        return [
            SwapRequest(
                x_src=torch.from_numpy(read_image(Path(args.source))),
                x_tar=torch.from_numpy(read_image(Path(args.target))),
                labels_src=read_label_map(Path(args.source_labels)),
                labels_tar=read_label_map(Path(args.target_labels)),
                preset=args.preset,
                n_steps=args.steps,
                seed=args.seed,
                landmarks_tar=lms,
                src_path=str(args.source),
                tar_path=str(args.target),
            )
        ]
    pairs = make_pairs(dataset.identities, dataset.split_indices(args.split), args.n_pairs, args.seed)
    return [
        SwapRequest(
            x_src=dataset.images[s],
            x_tar=dataset.images[t],
            labels_src=dataset.labels[s],
            labels_tar=dataset.labels[t],
            preset=args.preset,
            n_steps=args.steps,
            seed=args.seed * 100003 + k,
            landmarks_tar=dataset.landmarks[t],
            src_path=str(dataset.path(s)),
            tar_path=str(dataset.path(t)),
        )
        for k, (s, t) in enumerate(pairs)
    ]


def cmd_swap(args) -> int:
    from .checkpoint import load_checkpoint
    from .inference import swap_batch
    from .masks import resolve_preset
    from .toy.dataset import load_dataset

    try:
        resolve_preset(args.preset)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bundle = load_checkpoint(args.checkpoint)
    dataset = None
    if not (args.source or args.target):
        dataset = load_dataset(_data_root(args))
    requests = _swap_requests(args, dataset)
    out = Path(args.out)
    _echo(out, args.command, args, bundle.config)
    rows = swap_batch(bundle, requests, out)
    n_bad = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows) - n_bad}/{len(rows)} swaps written to {out}")
    if n_bad:
        for r in rows:
            if r["status"] != "ok":
                print(f"item {r['index']}: {r['status']}", file=sys.stderr)
        return 2
    return 0


def cmd_headswap(args) -> int:
    args.preset = "head"
    return cmd_swap(args)


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, load_featurizers
    from .evaluation import run_benchmark
    from .toy.dataset import load_dataset

    bundle = load_checkpoint(args.checkpoint)
    feats_path = Path(args.featurizers) if args.featurizers else Path(args.checkpoint).with_name("featurizers.pt")
    feats = load_featurizers(feats_path)
    dataset = load_dataset(_data_root(args))
    out = Path(args.out)
    _echo(out, "eval", args, bundle.config)
    report = run_benchmark(
        bundle,
        feats.oracle,
        dataset,
        n_pairs=args.n_pairs,
        seed=args.seed,
        n_steps=args.steps,
        extra_steps=tuple(args.extra_steps),
        preset=args.preset,
        out_dir=out,
    )
    print(report.to_json(), end="")
    return 0


def compose_grid(rows: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], pad: int = 2) -> np.ndarray:
    """Stack (source, target, swap) triptychs into one (3, H', W') image with white gutters."""
    if not rows:
        raise ValueError("no rows to compose")
    c, h, w = rows[0][0].shape
    grid = np.ones((c, len(rows) * (h + pad) + pad, 3 * (w + pad) + pad), dtype=np.float32)
    for r, trip in enumerate(rows):
        for k, img in enumerate(trip):
            if img.shape != (c, h, w):
                raise ValueError(f"row {r}: image shape {img.shape} != {(c, h, w)}")
            y, x = pad + r * (h + pad), pad + k * (w + pad)
            grid[:, y : y + h, x : x + w] = img
    return grid


def cmd_grid(args) -> int:
    run = Path(args.run)
    manifest = run / "manifest.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: no swap manifest")
    rows = []
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("status") != "ok":
            continue
        rows.append(
            (read_image(Path(rec["source"])), read_image(Path(rec["target"])), read_image(run / rec["output"]))
        )
        if args.max_rows and len(rows) >= args.max_rows:
            break
    if not rows:
        raise RuntimeError(f"{manifest}: no successful swaps to show")
    out = Path(args.out) if args.out else run / "grid.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    _echo(out.parent, "grid", args)
    write_image(out, compose_grid(rows))
    print(f"wrote {len(rows)}-row grid to {out}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inpaint-swap", description="Inpainting-based face swapping on toy data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the toy face dataset")
    g.add_argument("--out", help=f"dataset directory (default ${DATA_ENV})")
    g.add_argument("--data", help=argparse.SUPPRESS)
    g.add_argument("--identities", type=int, default=8)
    g.add_argument("--per-identity", type=int, default=32)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the denoiser and condition maps")
    t.add_argument("--config", help="JSON config file (flags override it)")
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--steps", type=int, help="differentiable sampler steps N during training")
    t.add_argument("--featurizers", help="reuse pretrained featurizers.pt instead of pretraining")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, help="stop after this many total steps")
    t.set_defaults(func=cmd_train)

    for name, helptext in (("swap", "swap faces"), ("headswap", "swap heads (face + hair)")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--data", help=f"dataset directory for seeded pairs (default ${DATA_ENV})")
        s.add_argument("--n-pairs", type=int, default=8)
        s.add_argument("--split", default="val", choices=("train", "val", "all"))
        s.add_argument("--source")
        s.add_argument("--source-labels")
        s.add_argument("--target")
        s.add_argument("--target-labels")
        s.add_argument("--target-landmarks")
        s.add_argument("--steps", type=int, default=50)
        s.add_argument("--seed", type=int, default=0)
        if name == "swap":
            s.add_argument("--preset", default="face", help="face, head or custom=<ids>")
        s.set_defaults(func=cmd_swap if name == "swap" else cmd_headswap, preset="face")

    e = sub.add_parser("eval", help="run the swap benchmark")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--featurizers", help="defaults to featurizers.pt next to the checkpoint")
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    e.add_argument("--out", required=True)
    e.add_argument("--n-pairs", type=int, default=64)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--extra-steps", type=int, nargs="*", default=[5])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--preset", default="face")
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("grid", help="compose source/target/swap triptychs from a swap run")
    gr.add_argument("--run", required=True, help="swap output directory")
    gr.add_argument("--out", help="image path (default <run>/grid.png)")
    gr.add_argument("--max-rows", type=int, default=8)
    gr.set_defaults(func=cmd_grid)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "steps", None) is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inpaint-swap {args.command}: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"inpaint-swap {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"inpaint-swap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
