"""Command-line entry point: ``splatparts <command> ...``.

Relative input paths that do not exist in the working directory are looked
up under ``$SPLATPARTS_DATA_DIR``; relative output paths are placed under
``$SPLATPARTS_OUTPUT_DIR`` when it is set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .clustering import NOISE, DbscanConfig, Segmentation, refine_segments, segmentation_metrics, sweep
from .errors import SplatPartsError
from .faceswap import MergeConfig, extract_segment, merge
from .hashgrid import HashGridConfig
from .network import NetConfig
from .render import orbit_camera, render, render_segments, save_image
from .synthetic import (SyntheticSpec, make_disjoint_subparts_spec, make_synthetic_avatar,
                        three_band_sphere_spec)
from .training import assign_segments, train

PRESETS = {
    "sphere3": lambda seed: three_band_sphere_spec(seed=seed),
    "subparts": lambda seed: make_disjoint_subparts_spec(seed=seed),
    "subparts-single": lambda seed: make_disjoint_subparts_spec(seed=seed, single_patch=True),
}


def _in(path) -> Path:
    p = Path(path)
    data_dir = os.environ.get("SPLATPARTS_DATA_DIR")
    if not p.is_absolute() and not p.exists() and data_dir:
        return Path(data_dir) / p
    return p


def _out(path) -> Path:
    p = Path(path)
    out_dir = os.environ.get("SPLATPARTS_OUTPUT_DIR")
    if not p.is_absolute() and out_dir:
        p = Path(out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _repro_block(args, config: dict | None = None) -> None:
    payload = config if config is not None else {k: v for k, v in vars(args).items() if k != "func"}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
    seed = getattr(args, "seed", None)
    formats = " ".join(f"{k}={v}" for k, v in sio.FORMAT_VERSIONS.items())
    print(f"# splatparts {__version__} {args.command}")
    print(f"# seed: {seed if seed is not None else 'n/a'}")
    print(f"# config-hash: {digest}")
    print(f"# formats: {formats}")


def _load_labels(path) -> np.ndarray:
    """Channel labels from a labels file, or flat labels from a segmentation."""
    kind = sio.sniff_kind(path)
    if kind == "labels":
        return sio.read_labels(path)
    if kind == "segmentation":
        return sio.read_segmentation(path).flat_labels()
    raise SplatPartsError(f"{path}: expected a labels or segmentation file, found {kind!r}")


def _camera(args, avatar):
    return orbit_camera(avatar, args.azimuth, args.elevation, args.distance, args.fov, args.width, args.height)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> None:
    if args.config:
        import yaml

        with open(_in(args.config)) as fh:
            spec = SyntheticSpec.from_dict(yaml.safe_load(fh))
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = PRESETS[args.preset](args.seed or 0)
    args.seed = spec.seed
    _repro_block(args, spec.to_dict())
    out = _out(args.out)
    avatar, truth = make_synthetic_avatar(spec, name=args.name or out.stem)
    sio.write_avatar(avatar, out)
    truth_path = out.with_suffix(".truth.txt")
    sio.write_labels(truth_path, truth, avatar.name)
    print(f"wrote {len(avatar)} Gaussians on {avatar.mesh.n_triangles} triangles to {out}")
    print(f"truth labels: {truth_path}")


def _net_config(args) -> NetConfig:
    base = {}
    if args.config:
        import yaml

        with open(_in(args.config)) as fh:
            base = yaml.safe_load(fh) or {}
    hash_cfg = dict(base.pop("hash", {}) or {})
    flags = {"bottleneck": args.k, "hidden_dim": args.d, "encoder": args.encoder, "activation": args.activation,
             "usage_weight": args.usage_weight, "sparsity_weight": args.sparsity_weight,
             "tau_start": args.tau_start, "tau_end": args.tau_end, "anneal_steps": args.anneal_steps,
             "lr": args.lr, "lr_hash": args.lr_hash, "batch_size": args.batch_size,
             "total_steps": args.steps, "seed": args.seed, "dtype": args.dtype}
    base.update({k: v for k, v in flags.items() if v is not None})
    for key, val in (("levels", args.levels), ("table_size", None if args.table_log2 is None else 2 ** args.table_log2)):
        if val is not None:
            hash_cfg[key] = val
    return NetConfig(**base, hash=HashGridConfig(**hash_cfg))


def cmd_train(args) -> None:
    config = _net_config(args)
    args.seed = config.seed
    _repro_block(args, config.to_dict())
    avatar = sio.read_avatar(_in(args.avatar))
    model, history = train(avatar, config, log_every=args.log_every)
    out = _out(args.out)
    sio.save_checkpoint(out, model)
    final = history.reconstruction[-1] if history.reconstruction else float("nan")
    print(f"final reconstruction loss {final:.6g} (target variance {history.target_variance:.6g})")
    print(f"channel usage {history.channel_usage.tolist()}")
    print(f"checkpoint: {out}")


def cmd_segment(args) -> None:
    _repro_block(args)
    model = sio.load_checkpoint(_in(args.checkpoint))
    avatar = sio.read_avatar(_in(args.avatar))
    labels = assign_segments(model, avatar)
    out = _out(args.out)
    sio.write_labels(out, labels, avatar.name)
    counts = np.bincount(labels, minlength=model.config.bottleneck)
    print(f"channel sizes {counts.tolist()}")
    print(f"labels: {out}")


def cmd_cluster(args) -> None:
    _repro_block(args)
    avatar = sio.read_avatar(_in(args.avatar))
    labels = sio.read_labels(_in(args.labels))
    if args.sweep:
        rows = sweep(avatar, labels, args.eps_values, args.min_samples_values)
        print("channel,eps,min_samples,members,clusters,noise_fraction")
        for r in rows:
            print(f"{r['channel']},{r['eps']:g},{r['min_samples']},{r['members']},{r['clusters']},"
                  f"{r['noise_fraction']:.4f}")
        return
    if not args.out:
        raise SplatPartsError("cluster needs --out unless --sweep is given")
    seg = refine_segments(avatar, labels, DbscanConfig(args.eps, args.min_samples))
    out = _out(args.out)
    sio.write_segmentation(out, seg)
    for ch in np.unique(seg.channel):
        members = seg.channel == ch
        print(f"channel {ch}: {seg.n_clusters(ch)} cluster(s), "
              f"noise {int(np.sum(members & (seg.cluster == NOISE)))}/{int(members.sum())}")
    print(f"segmentation: {out}")


def cmd_extract(args) -> None:
    _repro_block(args)
    avatar = sio.read_avatar(_in(args.avatar))
    seg = sio.read_segmentation(_in(args.segmentation))
    part = extract_segment(avatar, seg, args.channel, args.cluster, args.tag)
    out = _out(args.out)
    sio.write_segment(out, part)
    print(f"extracted {len(part)} Gaussians on {len(part.triangles)} triangles to {out}")


def cmd_swap(args) -> None:
    _repro_block(args)
    target = sio.read_avatar(_in(args.target))
    part = sio.read_segment(_in(args.part))
    merged = merge(target, part, MergeConfig(args.strategy, args.n, args.o))
    out = _out(args.out)
    sio.write_avatar(merged, out)
    print(f"merged avatar: {len(target)} -> {len(merged)} Gaussians, written to {out}")


def cmd_render(args) -> None:
    _repro_block(args)
    avatar = sio.read_avatar(_in(args.avatar))
    img = render(avatar, _camera(args, avatar), sh_degree=args.sh_degree)
    out = _out(args.out)
    save_image(out, img)
    print(f"image: {out}")


def cmd_render_segments(args) -> None:
    _repro_block(args)
    avatar = sio.read_avatar(_in(args.avatar))
    labels = _load_labels(_in(args.labels))
    img = render_segments(avatar, labels, _camera(args, avatar))
    out = _out(args.out)
    save_image(out, img)
    print(f"image: {out}")


def cmd_metrics(args) -> None:
    _repro_block(args)
    truth = sio.read_labels(_in(args.truth))
    print("prediction,ari,nmi,purity")
    for path in args.predicted:
        kind = sio.sniff_kind(_in(path))
        pred = sio.read_segmentation(_in(path)) if kind == "segmentation" else _load_labels(_in(path))
        ari, nmi, purity = segmentation_metrics(pred, truth)
        print(f"{path},{ari:.4f},{nmi:.4f},{purity:.4f}")


# ---------------------------------------------------------------------------
# parser

def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _add_camera(p):
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--azimuth", type=float, default=30.0)
    p.add_argument("--elevation", type=float, default=20.0)
    p.add_argument("--distance", type=float, default=2.5, help="in multiples of the bounding radius")
    p.add_argument("--fov", type=float, default=40.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatparts", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"splatparts {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic avatar")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS), default="sphere3")
    src.add_argument("--config", help="YAML/JSON synthetic spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--name")
    p.add_argument("--out", required=True, help="splat file; binding, mesh and truth sidecars go next to it")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the disentanglement network")
    p.add_argument("avatar")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML/JSON network config; flags override it")
    p.add_argument("--k", type=int, help="bottleneck size")
    p.add_argument("--d", type=int, help="hidden width")
    p.add_argument("--encoder", choices=["hash_grid", "raw_xyz"])
    p.add_argument("--activation", choices=["gumbel_softmax", "plain_softmax"])
    p.add_argument("--usage-weight", type=float)
    p.add_argument("--sparsity-weight", type=float)
    p.add_argument("--tau-start", type=float)
    p.add_argument("--tau-end", type=float)
    p.add_argument("--anneal-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-hash", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--table-log2", type=int)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="channel labels from a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("avatar")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("cluster", help="refine channel labels with per-channel DBSCAN")
    p.add_argument("avatar")
    p.add_argument("labels")
    p.add_argument("--eps", type=float, default=DbscanConfig.eps)
    p.add_argument("--min-samples", type=int, default=DbscanConfig.min_samples)
    p.add_argument("--sweep", action="store_true", help="print a cluster-count / noise table instead")
    p.add_argument("--eps-values", type=_floats, default=[0.001, 0.002, 0.005, 0.01, 0.02])
    p.add_argument("--min-samples-values", type=_ints, default=[50, 100, 150])
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("extract", help="store a cluster as a reusable part")
    p.add_argument("avatar")
    p.add_argument("segmentation")
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--cluster", type=int, help="omit to take every clustered member of the channel")
    p.add_argument("--tag", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("swap", help="attach a part to a target avatar")
    p.add_argument("target")
    p.add_argument("part")
    p.add_argument("--strategy", choices=["replacement", "overlap"], default="replacement")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--o", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("render", help="render an avatar to PNG")
    p.add_argument("avatar")
    p.add_argument("--out", required=True)
    p.add_argument("--sh-degree", type=int, choices=[0, 1, 2, 3], default=3)
    _add_camera(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("render-segments", help="render labels or a segmentation as palette colours")
    p.add_argument("avatar")
    p.add_argument("labels")
    p.add_argument("--out", required=True)
    _add_camera(p)
    p.set_defaults(func=cmd_render_segments)

    p = sub.add_parser("metrics", help="ARI / NMI / purity against truth labels")
    p.add_argument("truth")
    p.add_argument("predicted", nargs="+")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (SplatPartsError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print("splatparts-error " + json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
