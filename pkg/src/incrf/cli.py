"""Command line: ``incrf synth | reconstruct | render | eval``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import oracle
from .config import ReconConfig
from .errors import IncrfError
from .pipeline import io
from .pipeline.dataset import load_dataset, write_dataset
from .pipeline.run import evaluate, reconstruct, render_path

logger = logging.getLogger("incrf")


def _config(args) -> ReconConfig:
    over = {
        "seed": args.seed, "test_every": args.test_every, "refine_iters_per_frame": args.iters_per_frame,
        "coarse_res": args.coarse_res, "fine_res": args.fine_res,
    }
    return ReconConfig.load(args.config, overrides=over)


def _out(args) -> Path:
    return Path(args.out) if args.out else Path(args.data) / "output"


def cmd_synth(args) -> int:
    spec = yaml.safe_load(Path(args.spec).read_text()) if args.spec else oracle.sweep_room_spec()
    spec = dict(spec)
    prior = spec.pop("prior", None)
    test_every = int(spec.pop("test_every", 8))
    scene = oracle.make_scene(spec, seed=args.seed or 0)
    root = write_dataset(scene, args.out, seed=args.seed or 0, prior=prior,
                         depth_format=args.depth_format, test_every=test_every)
    print(f"wrote {len(scene)} frames to {root}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.data, test_every=args.test_every)
    out = _out(args)
    rec = reconstruct(cfg, ds, out)
    print(f"registered {len(ds.train)} frames into {len(rec.registry)} fields in {rec.elapsed:.1f}s -> {out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data, test_every=args.test_every)
    out = _out(args)
    cfg = ReconConfig.load(out / "config.yaml") if args.config is None else _config(args)
    report = evaluate(out, ds, cfg)
    print(report.to_json())
    return 0


def cmd_render(args) -> int:
    out = _out(args)
    _, poses = io.read_tum(args.poses)
    cfg = ReconConfig.load(args.config or out / "config.yaml")
    dest = Path(args.dest) if args.dest else out / "renders"
    render_path(out, poses, cfg=cfg, dest=dest)
    print(f"rendered {len(poses)} views to {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incrf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--out", help="output directory (default: <data>/output)")
        sp.add_argument("--config", help="run config YAML")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--test-every", type=int, dest="test_every")
        sp.add_argument("--iters-per-frame", type=int, dest="iters_per_frame")
        sp.add_argument("--coarse-res", type=int, dest="coarse_res")
        sp.add_argument("--fine-res", type=int, dest="fine_res")

    s = sub.add_parser("synth", help="emit an oracle dataset")
    s.add_argument("--spec", help="scene spec YAML (default: built-in sweep room)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth-format", choices=("pfm", "png"), default="pfm", dest="depth_format")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="run incremental reconstruction")
    common(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="score a reconstruction")
    common(e)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("render", help="render views along a TUM pose file")
    common(v, data=False)
    v.add_argument("--data", help="dataset directory (locates the default output)")
    v.add_argument("--poses", required=True, help="TUM trajectory of camera-to-world poses")
    v.add_argument("--dest", help="directory for rendered PNGs")
    v.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "render" and not (args.out or args.data):
        parser.error("render needs --out or --data")
    try:
        return args.func(args)
    except (IncrfError, OSError, KeyError, ValueError) as exc:
        print(f"incrf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
