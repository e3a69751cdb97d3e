"""``renderctl <command> --config <file> [--seed N] [--out DIR]``."""
import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import io
from .exceptions import ConfigurationError, RenderctlError, ValidationError
from .renderer import CameraSpec, RenderOptions, render_image

log = logging.getLogger("renderctl")

COMMANDS = ("gen-data", "pretrain-sky", "train-geometry", "distill", "train-render", "render",
            "adapt", "extrapolate", "photo3d", "eval")

# every section a command reads; unknown sections or keys are rejected
SECTIONS = {
    "data": {"preset", "scene_seed", "n_views", "n_test", "width", "height", "fov_deg",
             "ring_radius", "elevation_deg", "azimuth_jitter_deg", "target_jitter",
             "occluder_prob", "assignment", "dir"},
    "sky": {"n_samples", "steps", "batch_size", "lr", "latent_dim", "max_log_mae"},
    "train": None,  # validated by TrainConfig
    "render": {"n_coarse", "n_importance", "chunk", "frames", "split"},
    "realism": {"pretrain_steps", "finetune_steps", "lr"},
    "adapt": {"steps", "lr", "photo", "camera", "frame", "split", "mask"},
    "extrapolate": {"request", "band", "target_fov_deg"},
    "photo3d": {"kind", "n_frames", "step_deg", "amplitude_deg", "center", "step", "amplitude",
                "request", "realism"},
    "eval": {"protocol", "toggles", "split", "realism"},
    "paths": {"dataset", "decoder", "stage1", "geometry", "distilled", "model", "realism"},
}

NEEDS = {
    "gen-data": ("data",), "pretrain-sky": ("sky",), "train-geometry": ("train",),
    "distill": ("render",), "train-render": ("train", "realism"), "render": ("render",),
    "adapt": ("adapt",), "extrapolate": ("extrapolate", "adapt", "realism"),
    "photo3d": ("photo3d",), "eval": ("eval", "adapt", "realism"),
}


def validate_config(cfg, command):
    for section, value in cfg.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(value, dict):
            raise ConfigurationError(f"[{section}] must be a table")
        allowed = SECTIONS[section]
        if allowed is not None:
            bad = set(value) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in [{section}]: {sorted(bad)}")
    if "train" in cfg:
        from .training import TrainConfig
        TrainConfig.from_dict(cfg["train"])
    if command == "eval":
        proto = cfg.get("eval", {}).get("protocol", "left-half")
        if proto not in ("left-half", "full-view", "ablation"):
            raise ConfigurationError(f"unknown eval protocol {proto!r}")


def resolve(cfg, seed):
    """Fill defaults and route the single seed to every consumer."""
    from .training import TrainConfig

    cfg = json.loads(json.dumps(cfg))
    cfg.setdefault("data", {})
    cfg["data"].setdefault("preset", "facade-like")
    cfg["data"]["scene_seed"] = seed
    train = TrainConfig.from_dict(cfg.get("train", {}))
    train.seed = seed
    cfg["train"] = train.to_dict()
    cfg["seed"] = seed
    return cfg


class Context:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.paths = cfg.get("paths", {})
        self.seed = cfg["seed"]

    def path(self, key, default):
        return Path(self.paths.get(key, self.out / default))

    def section(self, name):
        return self.cfg.get(name, {})

    def render_options(self):
        r = self.section("render")
        return RenderOptions(r.get("n_coarse", 64), r.get("n_importance", 32))

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig.from_dict(self.cfg["train"])


def cache_dir():
    d = os.environ.get("RENDERCTL_CACHE")
    return Path(d) if d else None


def _cache_key(kind, params):
    blob = json.dumps({"kind": kind, **params}, sort_keys=True).encode()
    return f"{kind}-{hashlib.sha256(blob).hexdigest()[:16]}.zip"


# --------------------------------------------------------------------------- commands

def cmd_gen_data(ctx):
    from .synthdata import DatasetSpec, generate_dataset, make_scene

    d = dict(ctx.section("data"))
    preset = d.pop("preset", "facade-like")
    scene_seed = d.pop("scene_seed", ctx.seed)
    out = Path(d.pop("dir", ctx.path("dataset", "data")))
    spec_fields = {f.name for f in fields(DatasetSpec)}
    spec = DatasetSpec(**{k: v for k, v in d.items() if k in spec_fields}, seed=ctx.seed)
    scene = make_scene(preset, scene_seed)
    train, test = generate_dataset(scene, spec, out)
    return {"dataset": str(out), "train": len(train), "test": 0 if test is None else len(test),
            "spec_hash": spec.hash(), "scene_hash": scene.hash()}


def load_decoder(ctx):
    path = ctx.path("decoder", "sky_decoder.zip")
    if path.exists():
        return io.load_decoder(path)
    cache = cache_dir()
    if cache is not None:
        hits = sorted(cache.glob("sky_decoder-*.zip"))
        if hits:
            return io.load_decoder(hits[-1])
    raise ConfigurationError(f"no sky decoder at {path}; run pretrain-sky first")


def cmd_pretrain_sky(ctx):
    from .lighting import pretrain_sky_decoder

    s = ctx.section("sky")
    params = {"n_samples": s.get("n_samples", 2000), "steps": s.get("steps", 3000),
              "batch_size": s.get("batch_size", 64), "lr": s.get("lr", 1e-3),
              "latent_dim": s.get("latent_dim", 16), "seed": ctx.seed,
              "max_log_mae": s.get("max_log_mae", 0.15)}
    cache = cache_dir()
    key = _cache_key("sky_decoder", params)
    out = ctx.path("decoder", "sky_decoder.zip")
    if cache is not None and (cache / key).exists():
        decoder = io.load_decoder(cache / key)
        source = "cache"
    else:
        decoder = pretrain_sky_decoder(**params)
        source = "trained"
        if cache is not None:
            io.save_decoder(cache / key, decoder, {"params": params})
    report = getattr(decoder, "report", None)
    extra = {"params": params}
    if report is not None:
        extra["heldout_log_mae"] = report.heldout_log_mae
    io.save_decoder(out, decoder, extra)
    return {"decoder": str(out), "source": source, **extra}


def _dataset(ctx, split="train"):
    return io.load_dataset(ctx.path("dataset", "data"), split)


def cmd_train_geometry(ctx):
    from .training import train_geometry

    ds = _dataset(ctx)
    cfg = ctx.train_config()
    logger = io.JsonlLogger(ctx.out / "train_geometry.jsonl")
    stage1 = train_geometry(ds, cfg, logger)
    out = ctx.path("stage1", "stage1.zip")
    io.save_archive(out, {"stage1": stage1},
                    {"kind": "stage1", "stage1": stage1.config(), "train": cfg.to_dict()})
    return {"stage1": str(out), "final": logger.records[-1] if logger.records else {}}


def _load_stage1(path):
    from .training import Stage1Model

    meta, states = io.load_archive(path)
    if meta.get("kind") != "stage1":
        raise ConfigurationError(f"{path} is not a stage-1 archive")
    model = Stage1Model.from_config(meta["stage1"])
    if "stage1" in states:
        model.load_state_dict(states["stage1"])
    else:
        model.geometry.load_state_dict(states["geometry"])
        model.log_sharpness.data.copy_(states["sharpness"]["log_sharpness"])
        model.discarded = True
    return model.eval()


def cmd_distill(ctx):
    from .training import distill_occlusion_free

    ds = _dataset(ctx)
    stage1 = _load_stage1(ctx.path("stage1", "stage1.zip"))
    out = ctx.path("distilled", ".")
    distill_occlusion_free(stage1, ds, ctx.render_options(), out_dir=out)
    # only the geometry survives past distillation
    stage1.discarded = True
    geo = ctx.path("geometry", "geometry.zip")
    io.save_archive(geo, {"geometry": stage1.geometry,
                          "sharpness": {"log_sharpness": stage1.log_sharpness.detach()}},
                    {"kind": "stage1", "stage1": stage1.config(),
                     "discarded": ["radiance", "background", "transient",
                                   "appearance_embedding", "transient_embedding"]})
    return {"distilled": str(Path(out) / "distilled"), "geometry": str(geo), "count": len(ds)}


def _realism_net(ctx, model, decoder, ds, train=True):
    from .adaptation import RealismNet, pretrain_realism, realism_training_pairs

    path = ctx.path("realism", "realism.zip")
    if path.exists():
        meta, states = io.load_archive(path)
        net = RealismNet(**meta["realism"])
        net.load_state_dict(states["realism"])
        return net.eval()
    if not train:
        return None
    steps = ctx.section("realism").get("pretrain_steps", 400)
    if steps <= 0:
        return None
    renders, photos, masks = realism_training_pairs(model, decoder, ds, ctx.render_options())
    net = pretrain_realism(renders, photos, masks, steps, seed=ctx.seed)
    io.save_archive(path, {"realism": net}, {"kind": "realism", "realism": net.config()})
    cache = cache_dir()
    if cache is not None:
        io.save_archive(cache / _cache_key("realism", {"seed": ctx.seed, "steps": steps}),
                        {"realism": net}, {"kind": "realism", "realism": net.config()})
    return net


def cmd_train_render(ctx):
    from .training import train_rerender

    ds = _dataset(ctx)
    decoder = load_decoder(ctx)
    geo_path = ctx.path("geometry", "geometry.zip")
    stage1 = _load_stage1(geo_path if geo_path.exists() else ctx.path("stage1", "stage1.zip"))
    distilled = io.load_images(ctx.path("distilled", "."), ds.frame_ids)
    cfg = ctx.train_config()
    logger = io.JsonlLogger(ctx.out / "train_render.jsonl")
    model = train_rerender(stage1, distilled, ds, decoder, cfg, logger)
    out = ctx.path("model", "model.zip")
    io.save_checkpoint(out, model, decoder, {"train": cfg.to_dict()})
    net = _realism_net(ctx, model, decoder, ds)
    return {"model": str(out), "realism": net is not None,
            "final": logger.records[-1] if logger.records else {}}


def _load_model(ctx):
    model, decoder, _ = io.load_checkpoint(ctx.path("model", "model.zip"))
    if decoder is None:
        decoder = load_decoder(ctx)
    return model, decoder


def write_render(out_dir, name, maps):
    out_dir = Path(out_dir)
    io.write_exr(out_dir / f"{name}.exr", {"RGB": maps["rgb"], "opacity": maps["opacity"],
                                            "depth": maps["depth"], "normal": maps["normal"],
                                            "shadow": maps["shadow"]})
    io.write_png(out_dir / f"{name}.png", maps["rgb"])
    io.write_mask(out_dir / f"{name}_diagnostics.png", maps["diagnostics"])


def cmd_render(ctx):
    model, decoder = _load_model(ctx)
    r = ctx.section("render")
    ds = _dataset(ctx, r.get("split", "train"))
    frames = r.get("frames") or ds.frame_ids
    written = []
    for fid in frames:
        if fid not in ds.frame_ids:
            raise ValidationError(f"unknown frame {fid!r}")
        i = ds.frame_ids.index(fid)
        codes = model.codes.codes([fid]).detach() if fid in model.codes.index else None
        if codes is None:
            raise ValidationError(f"frame {fid!r} has no trained codes; use adapt")
        maps = render_image(model, ds.cameras[i], codes, decoder, r.get("chunk", 4096),
                            ctx.render_options())
        write_render(ctx.out / "renders", fid, maps)
        written.append(fid)
    return {"rendered": written}


def _photo_inputs(ctx, section):
    """Photo, camera and fit mask from a config section (dataset frame or files)."""
    a = ctx.section(section)
    if "frame" in a:
        ds = _dataset(ctx, a.get("split", "test"))
        i = ds.frame_ids.index(a["frame"])
        occ = ds.occluder_masks[i] if ds.occluder_masks is not None else None
        return ds.images[i], ds.cameras[i], (None if occ is None else ~occ)
    if "photo" not in a or "camera" not in a:
        raise ConfigurationError(f"[{section}] needs either frame or photo + camera")
    photo = io.read_image(a["photo"])
    cam = CameraSpec.from_dict(io.read_json(a["camera"]))
    mask = ~io.read_mask(a["mask"]) if a.get("mask") else None
    return photo, cam, mask


def cmd_adapt(ctx):
    from .adaptation import adapt_photo

    model, decoder = _load_model(ctx)
    photo, cam, mask = _photo_inputs(ctx, "adapt")
    a = ctx.section("adapt")
    res = adapt_photo(model, decoder, photo, cam, mask, a.get("steps", 500), a.get("lr", 1e-2),
                      options=ctx.render_options())
    io.write_json(ctx.out / "codes.json", res.codes.to_dict())
    maps = render_image(model, cam, res.codes, decoder, options=ctx.render_options())
    write_render(ctx.out, "adapted", maps)
    return {"codes": str(ctx.out / "codes.json"), "masked_mse": res.error,
            "initial_mse": res.initial_error, "reduction": res.reduction}


def load_request(path, band=16, target_fov_deg=None):
    """Extrapolation request JSON: photo, pose, intrinsics, target FoV, mask, output."""
    from .adaptation import ExtrapolationRequest

    r = io.read_json(path)
    base = Path(path).parent
    photo = io.read_image(base / r["photo"])
    cam = CameraSpec(np.asarray(r["pose"], float).reshape(4, 4), *r["intrinsics"])
    mask = io.read_mask(base / r["mask"]) if r.get("mask") else None
    fov = math.radians(r.get("target_fov_deg", target_fov_deg or math.degrees(cam.fov_x)))
    if fov < cam.fov_x - 1e-9:
        raise ValidationError("target field of view is smaller than the source photo's")
    width = 2 * cam.fx * math.tan(fov / 2)
    margin_x = max(int(round((width - cam.width) / 2)), 0)
    margin_y = max(int(round(margin_x * cam.fy / cam.fx)), 0) if r.get("widen_vertical") else 0
    req = ExtrapolationRequest.widen(photo, cam, margin_x, margin_x, margin_y, margin_y,
                                     people_mask=mask, band=r.get("band", band))
    return req, r.get("output")


def cmd_extrapolate(ctx):
    from .adaptation import extrapolate

    model, decoder = _load_model(ctx)
    e = ctx.section("extrapolate")
    if "request" not in e:
        raise ConfigurationError("[extrapolate] needs a request file")
    req, output = load_request(e["request"], e.get("band", 16), e.get("target_fov_deg"))
    ds = _dataset(ctx) if ctx.path("dataset", "data").exists() else None
    net = _realism_net(ctx, model, decoder, ds, train=ds is not None) \
        if ctx.section("realism").get("pretrain_steps", 400) > 0 else None
    a = ctx.section("adapt")
    res = extrapolate(model, decoder, req, net, a.get("steps", 500),
                      ctx.section("realism").get("finetune_steps", 300), ctx.render_options(),
                      seed=ctx.seed)
    out = Path(output) if output else ctx.out / "extrapolated"
    io.write_exr(out.with_suffix(".exr"), res.image)
    io.write_png(out.with_suffix(".png"), res.image)
    io.write_exr(ctx.out / "augmented.exr", res.augmented)
    io.write_json(ctx.out / "codes.json", res.adaptation.codes.to_dict())
    return {"output": str(out.with_suffix(".exr")), "seam_jump": res.seam_jump(),
            "masked_mse": res.adaptation.error}


def cmd_photo3d(ctx):
    from .adaptation import PathSpec, adapt_photo, finetune_realism, render_3d_photo
    from .field import LatentCodes

    model, decoder = _load_model(ctx)
    p = dict(ctx.section("photo3d"))
    n_frames = p.pop("n_frames", 30)
    use_realism = p.pop("realism", True)
    request = p.pop("request", None)
    spec = PathSpec(**{k: (tuple(v) if k == "center" else v) for k, v in p.items()})
    net = None
    if request:
        req, _ = load_request(request)
        cam = req.target_camera
        res = adapt_photo(model, decoder, req.photo, req.camera, ~req.people_mask,
                          ctx.section("adapt").get("steps", 500), options=ctx.render_options())
        codes = res.codes
        if use_realism:
            base = _realism_net(ctx, model, decoder, None, train=False)
            if base is not None:
                rgb = render_image(model, req.camera, codes, decoder,
                                   options=ctx.render_options())["rgb"]
                net, _ = finetune_realism(base, rgb, req.photo, ~req.people_mask,
                                          ctx.section("realism").get("finetune_steps", 300))
    else:
        photo, cam, mask = _photo_inputs(ctx, "adapt")
        codes_path = ctx.out / "codes.json"
        if codes_path.exists():
            codes = LatentCodes.from_dict(io.read_json(codes_path))
        else:
            codes = adapt_photo(model, decoder, photo, cam, mask,
                                ctx.section("adapt").get("steps", 500),
                                options=ctx.render_options()).codes
    result = render_3d_photo(model, decoder, codes, cam, spec, n_frames, net,
                             ctx.out / "frames", ctx.render_options())
    return {"frames": len(result.frames), "dir": str(ctx.out / "frames")}


def cmd_eval(ctx):
    from .evaluation import EvalOptions, eval_left_half, eval_views, run_ablation

    model, decoder = _load_model(ctx)
    e = ctx.section("eval")
    proto = e.get("protocol", "left-half")
    test = _dataset(ctx, e.get("split", "test"))
    train = _dataset(ctx, "train")
    a, r = ctx.section("adapt"), ctx.section("realism")
    opts = EvalOptions(a.get("steps", 500), a.get("lr", 1e-2), r.get("finetune_steps", 300),
                       ctx.render_options())
    net = _realism_net(ctx, model, decoder, train) if e.get("realism", True) else None
    reports = {}
    if proto == "left-half":
        reports = {k: v for k, v in eval_left_half(model, decoder, test, net, opts).items() if v}
    elif proto == "full-view":
        out = eval_views(model, decoder, test, net, opts)
        reports = {k: out[k] for k in ("plain", "realism") if out[k] is not None}
    else:
        geo = _load_stage1(ctx.path("geometry", "geometry.zip"))
        distilled = io.load_images(ctx.path("distilled", "."), train.frame_ids)
        res = run_ablation(ctx.train_config(), tuple(e.get("toggles", ("tone", "shadow",
                                                                        "realism"))),
                           geo, distilled, train, test, decoder, net, opts,
                           models={"full": model})
        reports = res["reports"]
        io.write_json(ctx.out / "ablation_table.json", res["table"])
    summary = {}
    for name, rep in reports.items():
        d = rep.to_dict()
        io.write_json(ctx.out / f"report_{name}.json", d)
        io.atomic_write_bytes(ctx.out / f"report_{name}.csv", rep.to_csv().encode())
        summary[name] = d["aggregate"]
    return summary


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain-sky": cmd_pretrain_sky,
    "train-geometry": cmd_train_geometry, "distill": cmd_distill,
    "train-render": cmd_train_render, "render": cmd_render, "adapt": cmd_adapt,
    "extrapolate": cmd_extrapolate, "photo3d": cmd_photo3d, "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="renderctl", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML or JSON configuration file")
    parser.add_argument("--seed", type=int, default=0, help="single source of randomness")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = io.load_config(args.config)
        validate_config(raw, args.command)
        cfg = resolve(raw, args.seed)
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / f"{args.command}.config.json", cfg)
        result = HANDLERS[args.command](Context(cfg, out))
    except RenderctlError as exc:
        print(f"renderctl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
