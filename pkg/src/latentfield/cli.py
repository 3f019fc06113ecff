"""Command-line entry point: synth, init, edit, render, eval.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .config import RunConfig, build_edit_config, build_schedule, build_train_config, init_phases
from .errors import ConfigError, FormatError, LatentFieldError, ValidationError

log = logging.getLogger("latentfield")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.update({"seed": args.seed})
    if args.backend is not None:
        cfg.update({"backend.name": args.backend})
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    from .scene import SceneSpec, synth_scene, write_scene

    over = {}
    if args.spec is not None:
        over["scene.spec"] = args.spec
    if args.views is not None:
        over["scene.views"] = args.views
    cfg.update(over)
    if cfg["scene.views"] < 2:
        raise ConfigError(f"a scene needs at least 2 views, got {cfg['scene.views']}")
    spec = SceneSpec(name=cfg["scene.spec"], n_views=cfg["scene.views"], height=cfg["scene.height"], width=cfg["scene.width"])
    out = _require_out(args)
    write_scene(synth_scene(spec, seed=cfg["seed"]), out)
    log.info("wrote %d-view scene to %s", spec.n_views, out)
    return EXIT_OK


def _train_state(args, cfg, dataset):
    from .training import TrainState, load_checkpoint

    tcfg = build_train_config(cfg)
    if args.resume:
        return load_checkpoint(args.resume, tcfg)
    return TrainState.create(dataset, seed=cfg["seed"], config=tcfg, adapter_channels=cfg["adapter.channels"])


def cmd_init(args, cfg: RunConfig) -> int:
    from .scene import load_scene
    from .training import fit, save_checkpoint

    if args.steps is not None:
        cfg.update({"init.steps": args.steps})
    if args.no_adapter:
        cfg.update({"init.no_adapter": True})
    if not args.scene:
        raise ConfigError("--scene is required")
    dataset = load_scene(args.scene)
    out = _require_out(args)
    ts = _train_state(args, cfg, dataset)
    total = cfg["init.steps"]
    phases = init_phases(cfg, total)
    remaining = total - ts.step
    if remaining < 0:
        raise ConfigError(f"checkpoint is at step {ts.step}, beyond --steps {total}")
    with open(out / "init_log.jsonl", "a" if args.resume else "w") as fh:
        def record(rep):
            fh.write(json.dumps(rep.as_dict()) + "\n")

        fit(ts, dataset, phases, remaining, seed=cfg["seed"], callback=record)
    save_checkpoint(ts, out / "checkpoint")
    (out / "run_config.json").write_text(cfg.dumps())
    return EXIT_OK


def _region_for_tag(dataset, tag):
    if dataset.region_labels is None:
        raise ConfigError("the oracle backend needs a scene with region labels")
    return {n: dataset.region_labels[n] == tag for n in range(dataset.n_views)}


def build_denoisers(cfg: RunConfig, dataset, n_prompts: int, sched):
    """One backend per prompt.  Oracle prompt ``j`` edits label ``region_tag + j`` when present."""
    from .diffusion import ExternalDenoiser, IdentityDenoiser, OracleEditDenoiser

    name = cfg["backend.name"]
    if name == "identity":
        return [IdentityDenoiser(sched)] * n_prompts
    if name == "external":
        if not cfg["backend.command"]:
            raise ConfigError("backend.command is required for the external backend")
        return [ExternalDenoiser(cfg["backend.command"])] * n_prompts
    if name != "oracle_edit":
        raise ConfigError(f"unknown backend {name!r}")
    tags = set()
    if dataset.region_labels is not None:
        for r in dataset.region_labels:
            tags.update(int(t) for t in np.unique(r))
    direction = np.asarray(cfg["backend.direction"], dtype=np.float64)
    if direction.shape != (4,) or not np.isfinite(direction).all() or np.linalg.norm(direction) == 0:
        raise ConfigError("backend.direction must be a non-zero 4-vector")
    direction = direction / np.linalg.norm(direction)
    out = []
    for j in range(n_prompts):
        tag = cfg["backend.region_tag"] + j
        if tag not in tags:
            tag = cfg["backend.region_tag"]
        out.append(OracleEditDenoiser(_region_for_tag(dataset, tag), direction, cfg["backend.magnitude"], sched))
    return out


def cmd_edit(args, cfg: RunConfig) -> int:
    from .editing import EditSession, edit_scene, split_prompt
    from .scene import load_scene, write_scene
    from .training import load_checkpoint, save_checkpoint

    over = {}
    if args.iterations is not None:
        over["edit.iterations"] = args.iterations
    if args.editing_rate is not None:
        over["edit.editing_rate"] = args.editing_rate
    if args.prompts is not None:
        over["edit.prompt"] = args.prompts
    cfg.update(over)
    if not args.scene or not args.checkpoint:
        raise ConfigError("--scene and --checkpoint are required")
    dataset = load_scene(args.scene)
    ts = load_checkpoint(args.checkpoint, build_train_config(cfg))
    out = _require_out(args)
    sched = build_schedule(cfg)
    ecfg = build_edit_config(cfg)
    prompts = split_prompt(cfg["edit.prompt"])
    dens = build_denoisers(cfg, dataset, len(prompts), sched)
    session = EditSession.start(ts, dataset)
    log_path = out / "session.jsonl"
    log_path.write_text("")
    try:
        edit_scene(
            session,
            prompts,
            dens,
            ecfg,
            sched,
            seed=cfg["seed"],
            log_path=log_path,
            mask_dir=args.dump_masks,
            checkpoint_dir=out / "checkpoints" if ecfg.checkpoint_every else None,
        )
    finally:
        for d in dens:
            close = getattr(d, "close", None)
            if close is not None:
                close()
    save_checkpoint(ts, out / "checkpoint")
    write_scene(session.dataset, out / "scene")
    (out / "run_config.json").write_text(cfg.dumps())
    log.info("edit finished: %d dataset updates", session.du_count)
    return EXIT_OK


def _codec(name):
    from .scene import IdentityCodec, PoolCodec

    if name == "pool":
        return PoolCodec(8)
    if name == "identity":
        return IdentityCodec()
    raise ConfigError(f"unknown codec {name!r}")


def cmd_render(args, cfg: RunConfig) -> int:
    from .render import RenderConfig, render_view
    from .training import load_checkpoint

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ts = load_checkpoint(args.checkpoint)
    out = _require_out(args)
    codec = _codec(args.codec)
    factor = codec.downscale_factor
    rcfg = RenderConfig(samples_per_ray=cfg["train.samples_per_ray"])
    h, w = ts.latent_shape[:2]
    cams = ts.current_cameras()
    views = range(len(cams)) if args.views is None else [int(v) for v in args.views.split(",")]
    events = []
    for n in views:
        if not 0 <= n < len(cams):
            raise ConfigError(f"view {n} out of range")
        lat = render_view(ts.field, None if args.no_adapter else ts.adapter, cams[n], rcfg, ts.latent_shape, ts.near, ts.far, ts.downscale, n)
        tensorio.write_tensor(out / f"latent_{n:03d}.lte", lat.data.astype(np.float32))
        events.append({"event": "render", "view": n, "rays": h * w, "pixels": h * w * factor * factor})
        image = codec.decode(lat.data)
        tensorio.write_tensor(out / f"image_{n:03d}.lte", np.asarray(image, dtype=np.float32))
        events.append({"event": "decode", "view": n, "shape": list(np.shape(image))})
    with open(out / "render_log.jsonl", "w") as fh:
        for e in events:
            fh.write(json.dumps(e) + "\n")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .editing import displacement_cosine, edit_psnr
    from .errors import UndefinedResultError
    from .training import load_checkpoint, render_all
    from .render import RenderConfig
    from .scene import load_scene

    if not args.reference or not args.checkpoint:
        raise ConfigError("--reference and --checkpoint are required")
    for p in (args.reference, args.checkpoint):
        if not (Path(p) / "checkpoint.json").exists():
            raise ConfigError(f"no checkpoint at {p}")
    rcfg = RenderConfig(samples_per_ray=cfg["train.samples_per_ray"])
    before = render_all(load_checkpoint(args.reference), rcfg)
    after = render_all(load_checkpoint(args.checkpoint), rcfg)
    if len(before) != len(after):
        raise ConfigError("checkpoints have different view counts")
    regions = None
    if args.scene:
        ds = load_scene(args.scene)
        if ds.region_labels is not None:
            regions = [r == cfg["backend.region_tag"] for r in ds.region_labels]
    views = []
    for n, (b, a) in enumerate(zip(before, after)):
        rec = {"view": n, "psnr": edit_psnr(b, a)}
        if regions is not None:
            inside = regions[n]
            rec["psnr_outside"] = edit_psnr(b, a, ~inside) if (~inside).any() else None
            rec["psnr_inside"] = edit_psnr(b, a, inside) if inside.any() else None
        views.append(rec)
    metrics = {"views": views, "psnr_mean": float(np.mean([v["psnr"] for v in views]))}
    if regions is not None:
        outs = [v["psnr_outside"] for v in views if v["psnr_outside"] is not None]
        metrics["psnr_outside_mean"] = float(np.mean(outs)) if outs else None
        stack = lambda imgs: np.concatenate([im.data[r] for im, r in zip(imgs, regions)])[:, None, :]  # noqa: E731
        try:
            direction = np.asarray(cfg["backend.direction"], dtype=np.float64)
            metrics["inside_cosine"] = displacement_cosine(stack(before), stack(after), direction, np.ones((stack(before).shape[0], 1), bool))
        except (UndefinedResultError, ValueError):
            metrics["inside_cosine"] = None
    out = _require_out(args)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "views"}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--backend", help="denoiser backend: oracle_edit, identity or external")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.add_argument("--spec")
    s.add_argument("--views", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", parents=[common], help="fit the latent field to a scene")
    s.add_argument("--scene")
    s.add_argument("--steps", type=int)
    s.add_argument("--no-adapter", action="store_true", help="ablation: lambda_f = 0 throughout")
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("edit", parents=[common], help="edit a fitted field")
    s.add_argument("--scene")
    s.add_argument("--checkpoint")
    s.add_argument("--prompts")
    s.add_argument("--iterations", type=int)
    s.add_argument("--editing-rate", type=int)
    s.add_argument("--dump-masks", help="write one PGM per prompt per dataset update here")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("render", parents=[common], help="render latents and decode them")
    s.add_argument("--checkpoint")
    s.add_argument("--codec", default="pool", help="pool (factor 8) or identity")
    s.add_argument("--views", help="comma-separated view indices (default: all)")
    s.add_argument("--no-adapter", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="compare two checkpoints")
    s.add_argument("--reference", help="checkpoint before editing")
    s.add_argument("--checkpoint", help="checkpoint after editing")
    s.add_argument("--scene", help="scene with region labels for inside/outside metrics")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LatentFieldError, RuntimeError, FloatingPointError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
