"""Command-line entry point: generate, train, extract, render, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("dynsurf")

SCENES = ("sphere", "topology", "ellipsoid", "torus", "two_spheres")


def _overrides(parser: argparse.ArgumentParser, extra: list[str]) -> dict[str, str]:
    """Turn leftover `--key=value` / `--key value` tokens into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            parser.error(f"unexpected argument '{tok}'")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            val = extra[i]
        else:
            parser.error(f"flag '{tok}' needs a value")
        out[key] = val
        i += 1
    return out


def cmd_generate(args) -> int:
    from .scene import default_camera, generate_sequence, make_scene, write_sequence

    scene = make_scene(args.scene, n_frames=args.frames)
    cam = default_camera(args.size)
    seq = generate_sequence(scene, cam, depth_noise=args.depth_noise, seed=args.seed)
    write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames of '{args.scene}' ({args.size}x{args.size}) to {args.out}")
    return 0


def build_config(parser, args, extra):
    from .pipeline.config import TrainConfig, apply_overrides

    base = TrainConfig.full_scale(seed=0).to_dict() if args.full_scale else TrainConfig(seed=0).to_dict()
    if args.config:
        with open(args.config) as fh:
            try:
                base.update(json.load(fh))
            except json.JSONDecodeError as exc:
                parser.error(f"invalid config file {args.config}: {exc}")
    try:
        d = apply_overrides(base, _overrides(parser, extra))
        d["seed"] = args.seed
        return TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))


def cmd_train(args, parser, extra) -> int:
    from .pipeline.checkpoint import file_hash
    from .pipeline.train import Trainer
    from .scene import load_sequence

    cfg = build_config(parser, args, extra)
    seq = load_sequence(args.sequence)
    if args.resume:
        tr = Trainer.resume(args.resume, seq, args.out, cfg)
        log.info("resumed from %s at step %d", args.resume, tr.step)
    else:
        tr = Trainer(cfg, seq, args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, default=list)
    tr.run(args.until)
    final = os.path.join(args.out, "final.dsc")
    print(f"step {tr.step}; checkpoint {final} sha256 {file_hash(final)}")
    return 0


def cmd_extract(args) -> int:
    from .pipeline.checkpoint import file_hash
    from .pipeline.mcubes import extract_mesh, write_ply
    from .pipeline.train import load_model

    model, cfg, meta = load_model(args.checkpoint)
    frames = range(model.n_frames) if args.frame is None else [args.frame]
    digest = file_hash(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    for t in frames:
        if not 0 <= t < model.n_frames:
            raise SystemExit(f"frame {t} outside [0, {model.n_frames})")
        mesh = extract_mesh(model, t, args.resolution)
        path = os.path.join(args.out, f"mesh_{t:04d}.ply")
        write_ply(mesh, path, [f"frame {t}", f"checkpoint {digest}", f"resolution {args.resolution}"])
        print(f"frame {t}: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles -> {path}")
    return 0


def cmd_render(args) -> int:
    from .pipeline.io import save_render
    from .pipeline.train import load_model
    from .render import Camera, render_image
    from .scene import load_sequence

    model, cfg, meta = load_model(args.checkpoint)
    if args.sequence:
        cam = load_sequence(args.sequence).cameras[args.frame]
    elif "cameras" in meta:
        cam = Camera.from_dict(meta["cameras"][args.frame])
    else:
        raise SystemExit("checkpoint has no camera; pass --sequence")
    rgb, depth, mask = render_image(model, cam, args.frame, np.random.default_rng(args.seed), cfg.render_config())
    paths = save_render(args.out, f"frame_{args.frame:04d}", rgb, depth, mask)
    print("\n".join(paths))
    return 0


def cmd_eval(args) -> int:
    from .pipeline.evaluate import evaluate_mesh, evaluate_model
    from .pipeline.mcubes import extract_mesh
    from .pipeline.train import load_model
    from .scene import load_sequence

    model, cfg, meta = load_model(args.checkpoint)
    seq = load_sequence(args.sequence)
    if len(seq) != model.n_frames:
        raise SystemExit(f"sequence has {len(seq)} frames, checkpoint was trained on {model.n_frames}")
    reports = []
    if args.mode in ("sdf", "both"):
        reports.append(evaluate_model(model, seq))
    if args.mode in ("mesh", "both"):
        reports.append(evaluate_mesh(lambda t: extract_mesh(model, t, args.resolution), seq))
    scale, unit = (1000.0, "mm") if args.mm else (1.0, "scene units")
    for r in reports:
        print(r.format(scale, unit))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
    return 0


def cmd_gradcheck(args) -> int:
    from .pipeline.gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, per_class=args.entries)
    print(report.format())
    return 0 if report.ok else 1


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    p = argparse.ArgumentParser(prog="dynsurf", description="Dynamic SDF reconstruction from RGB-D sequences.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add("generate", help="write a synthetic RGB-D sequence")
    g.add_argument("--scene", choices=SCENES, default="sphere")
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--depth-noise", type=float, default=0.0, help="Gaussian depth jitter, scene units")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = add("train", help="optimise a model on a sequence; extra --key=value flags override the config",
                       epilog="Every TrainConfig field can be set with --field=value (dashes or underscores).")
    t.add_argument("sequence")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--full-scale", action="store_true", help="start from the original-scale settings")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop at this step (checkpoint written)")

    e = add("extract", help="marching-cubes mesh of one or all frames")
    e.add_argument("checkpoint")
    e.add_argument("--frame", type=int)
    e.add_argument("--resolution", type=int, default=64)
    e.add_argument("--out", default=".")

    r = add("render", help="render RGB, depth and mask images of a frame")
    r.add_argument("checkpoint")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--sequence", help="take the camera from this sequence instead of the checkpoint")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=".")

    v = add("eval", help="geometric error against masked, back-projected depth")
    v.add_argument("checkpoint")
    v.add_argument("sequence")
    v.add_argument("--mode", choices=("sdf", "mesh", "both"), default="sdf")
    v.add_argument("--resolution", type=int, default=64)
    v.add_argument("--mm", action="store_true", help="report millimetres (1 scene unit = 1 m)")
    v.add_argument("--json")

    c = add("gradcheck", help="finite-difference check of all loss gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--entries", type=int, default=8, help="entries per parameter class")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "train":
        return cmd_train(args, parser, extra)
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    handlers = {"generate": cmd_generate, "extract": cmd_extract, "render": cmd_render, "eval": cmd_eval,
                "gradcheck": cmd_gradcheck}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
