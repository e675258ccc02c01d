"""Command line front door: synth, train, eval, sample, serve.

Every command is seeded and reproducible; failures print a one-line JSON
object to stderr and exit nonzero so scripts can parse them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .. import synthworld
from ..behavior import (
    BehaviorConfig,
    GenerationRequest,
    context_of,
    generate_goal,
    generate_one_stage,
    generate_path,
    generate_pose,
    load_config,
    load_model,
    save_model,
    train_behavior,
)
from ..evalsuite import (
    GroundTruthSampler,
    eval_model,
    fit_location_prior,
    split_clips,
    train_gaussian_baseline,
)
from ..worldstate import World, load_world, slice_windows
from .service import Service, create_app


class CliError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep argparse failures one-line parsable
        raise CliError("usage", message)


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as err:
        raise CliError("missing_file", str(err))
    except ValueError as err:
        raise CliError("bad_config", f"{path}: {err}")


def _load_bundle(path: str) -> World:
    try:
        return load_world(path)
    except OSError as err:
        raise CliError("missing_file", str(err))


def _bundle_split(world: World, path: str):
    """(train ids, eval ids): the bundle manifest if present, else hashed."""
    manifest = os.path.join(path, "split.json")
    if os.path.exists(manifest):
        split = synthworld.load_split(path)
        return list(split["trainClips"]), list(split["evalClips"])
    return split_clips(world)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = _read_json(args.config) if args.config else {}
    preset = spec.pop("preset", "default")
    if preset == "flee":
        base = synthworld.flee_corpus_config(args.out)
    elif preset == "default":
        base = synthworld.CorpusConfig(out_dir=args.out)
    else:
        raise CliError("bad_config", f"unknown preset {preset!r}")
    policy = spec.pop("policy", None)
    fields = {
        "clips": "clips",
        "evalClips": "eval_clips",
        "seconds": "seconds",
        "stride": "stride",
        "observers": "observers",
        "poseJitter": "pose_jitter",
    }
    override = {}
    for key, value in spec.items():
        if key not in fields:
            raise CliError("bad_config", f"unknown synth option {key!r}")
        override[fields[key]] = tuple(value) if key == "observers" else value
    if policy is not None:
        override["policy"] = synthworld.default_policy(**policy)
    config = dataclasses.replace(base, out_dir=args.out, **override)
    split = synthworld.generate_corpus(config, args.seed)
    print(json.dumps({"out": args.out, **split}, sort_keys=True))
    return 0


_STAGE_FLAG = {"goal": "goal", "path": "path", "pose": "pose", "one-stage": "one_stage"}


def _cmd_train(args) -> int:
    world = _load_bundle(args.world)
    train_ids, _ = _bundle_split(world, args.world)
    config = load_config(args.config) if args.config else BehaviorConfig()
    if args.stage:
        stages = []
        for flag in args.stage:
            name = _STAGE_FLAG[flag]
            if name not in stages:
                stages.append(name)
        config = dataclasses.replace(config, stages=tuple(stages))
    model = train_behavior(world, config, clip_ids=train_ids, seed=args.seed)
    save_model(model, args.out)
    with open(args.out + ".loss.json", "w") as fh:
        json.dump({"stages": list(config.stages), "loss": model.curve}, fh)
        fh.write("\n")
    print(json.dumps({"out": args.out, "steps": len(model.curve), "finalLoss": model.curve[-1]}))
    return 0


_ABLATIONS = (
    "none",
    "no-observer",
    "no-scene",
    "world-frame",
    "one-stage",
    "gaussian",
    "location-prior",
    "oracle",
)


def _cmd_eval(args) -> int:
    world = _load_bundle(args.world)
    train_ids, eval_ids = _bundle_split(world, args.world)
    disable, label = (), None
    if args.ablation in ("none", "no-observer", "no-scene", "world-frame", "one-stage"):
        if not args.ckpt:
            raise CliError("usage", f"--ablation {args.ablation} requires --ckpt")
        target = load_model(args.ckpt)
        if args.ablation == "no-observer":
            disable, label = ("observer",), "no_observer"
        elif args.ablation == "no-scene":
            disable, label = ("scene",), "no_scene"
        elif args.ablation == "world-frame":
            if not target.config.world_frame:
                raise CliError("bad_config", "checkpoint was not trained in the world frame")
            label = "world_frame"
        elif args.ablation == "one-stage":
            if "one_stage" not in target.config.stages:
                raise CliError("bad_config", "checkpoint has no one-stage net")
            label = "one_stage"
    elif args.ablation == "gaussian":
        if args.ckpt:
            config = load_model(args.ckpt).config
        elif args.config:
            config = load_config(args.config)
        else:
            config = BehaviorConfig()
        target = train_gaussian_baseline(world, config, clip_ids=train_ids, seed=args.seed)
    elif args.ablation == "location-prior":
        target = fit_location_prior(World(world.scene, [c for c in world.clips if c.clip_id in set(train_ids)], world.bone_scales))
    else:
        target = GroundTruthSampler()
    report = eval_model(
        target,
        world,
        k=args.K,
        trials=args.L,
        clip_ids=eval_ids,
        stride=args.stride,
        guidance=args.s,
        disable=disable,
        label=label,
    )
    print(report.table())
    if args.out:
        report.save(args.out)
    return 0


def _cmd_sample(args) -> int:
    model = load_model(args.ckpt)
    world = _load_bundle(args.world)
    _, eval_ids = _bundle_split(world, args.world)
    clip_id = args.clip if args.clip else eval_ids[0]
    clips = [c for c in world.clips if c.clip_id == clip_id]
    if not clips:
        raise CliError("unknown_clip", f"no clip {clip_id!r}")
    windows = slice_windows(clips[0], args.stride)
    if not 0 <= args.index < len(windows):
        raise CliError("bad_params", f"window index out of range 0..{len(windows) - 1}")
    window = windows[args.index]
    ctx = context_of(model.config, window)
    req = GenerationRequest(world, ctx, guidance=args.s, count=args.K, seed=args.seed)
    stages = model.config.stages
    if "one_stage" in stages and "path" not in stages:
        poses = generate_one_stage(model, req)
        goals = poses.root.t[:, -1]
        paths = poses.root.t
    else:
        goals = generate_goal(model, req)
        paths, poses = None, None
        if "path" in stages:
            paths3 = generate_path(model, req, goals)
            paths = paths3.transpose(0, 2, 1)
            if "pose" in stages:
                poses = generate_pose(model, req, paths3)
    payload = {
        "clipId": clip_id,
        "start": int(window.start),
        "s": args.s,
        "K": args.K,
        "seed": args.seed,
        "anchor": {"q": ctx.anchor.q.tolist(), "t": ctx.anchor.t.tolist()},
        "goals": np.asarray(goals, dtype=float).tolist(),
    }
    if paths is not None:
        payload["paths"] = np.asarray(paths, dtype=float).tolist()
    if poses is not None:
        payload["root"] = {"q": poses.root.q.tolist(), "t": poses.root.t.tolist()}
        payload["bones"] = {"q": poses.bones.q.tolist(), "t": poses.bones.t.tolist()}
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    print(json.dumps({"out": args.out, "clipId": clip_id, "K": args.K}))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    world = _load_bundle(args.world)
    model = load_model(args.ckpt)
    world_id = os.path.basename(os.path.normpath(args.world))
    service = Service({world_id: world}, model, pool_size=args.workers)
    app = create_app(service, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="ats", description="agent behavior toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a world bundle")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_synth)

    p = sub.add_parser("train", help="train a behavior checkpoint")
    p.add_argument("--world", required=True)
    p.add_argument("--stage", action="append", choices=sorted(_STAGE_FLAG), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("eval", help="score a generator on the held-out split")
    p.add_argument("--world", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--ablation", choices=_ABLATIONS, default="none")
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("sample", help="write generated windows for one context")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--s", type=float, default=2.0)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--stride", type=int, default=4)
    p.set_defaults(run=_cmd_sample)

    p = sub.add_parser("serve", help="run the live session service")
    p.add_argument("--world", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--static", default=None)
    p.set_defaults(run=_cmd_serve)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.run(args)
    except CliError as err:
        print(json.dumps({"error": err.code, "detail": str(err)}), file=sys.stderr)
        return 2
    except Exception as err:  # every failure stays one line and parsable
        print(json.dumps({"error": type(err).__name__, "detail": str(err)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
