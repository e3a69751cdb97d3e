"""File formats: EXR/PNG images, dataset directories, model archives, configs."""
import io as _io
import json
import os
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import OpenEXR
import torch
from PIL import Image

from .exceptions import ConfigurationError, ValidationError
from .renderer import CameraSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FORMAT_VERSION = 1


# --------------------------------------------------------------------------- atomic writes

def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)


# --------------------------------------------------------------------------- images

def write_exr(path, layers):
    """Write float32 layers.  ``layers`` is an array (H, W, C) or a dict name -> array."""
    if not isinstance(layers, dict):
        layers = {"RGB" if np.asarray(layers).shape[-1] == 3 else "Y": layers}
    chans = {}
    for name, arr in layers.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        if arr.ndim == 3 and arr.shape[-1] == 1:
            arr = arr[..., 0]
        chans[name] = arr
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.exr")
    OpenEXR.File(header, chans).write(str(tmp))
    os.replace(tmp, path)


def read_exr(path, layer=None):
    """Read an EXR file; returns the requested layer or a dict of all layers."""
    with OpenEXR.File(str(path)) as f:
        chans = {k: np.array(v.pixels, dtype=np.float32) for k, v in f.channels().items()}
    if layer is not None:
        return chans[layer]
    if set(chans) == {"RGB"}:
        return chans["RGB"]
    return chans


def to_display(image, gamma=2.2):
    """Linear rgb -> gamma-encoded uint8."""
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma) * 255.0
            + 0.5).astype(np.uint8)


def _save_pil(img, path):
    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_png(path, image, linear=True):
    """Write a preview PNG; linear images are gamma-2.2 encoded."""
    arr = to_display(image) if linear else np.asarray(image, dtype=np.uint8)
    _save_pil(Image.fromarray(arr), path)


def write_mask(path, mask):
    _save_pil(Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255), path)


def read_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise ValidationError(f"mask {path} is not binary")
    return arr > 127


def read_image(path):
    """Read a linear rgb image from EXR, or decode a gamma-2.2 PNG/JPEG to linear."""
    path = Path(path)
    if path.suffix.lower() == ".exr":
        return read_exr(path, "RGB")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr ** 2.2


# --------------------------------------------------------------------------- datasets

def _camera_record(cam, split):
    d = cam.to_dict()
    d["split"] = split
    return d


def save_dataset(dataset, out_dir, scene=None, test=None):
    """Write the dataset directory layout (train and optional test split)."""
    out = Path(out_dir)
    cameras, frames = {}, []
    for split, ds in (("train", dataset), ("test", test)):
        if ds is None:
            continue
        for i, fid in enumerate(ds.frame_ids):
            write_exr(out / "images" / f"{fid}.exr", ds.images[i])
            write_mask(out / "masks_sky" / f"{fid}.png", ds.sky_masks[i])
            occ = ds.occluder_masks[i] if ds.occluder_masks is not None else \
                np.zeros(ds.shape, dtype=bool)
            write_mask(out / "masks_occluder" / f"{fid}.png", occ)
            cameras[fid] = _camera_record(ds.cameras[i], split)
        frames.extend(ds.meta.get("frames", [{"frame_id": f, "split": split}
                                             for f in ds.frame_ids]))
    write_json(out / "cameras.json", cameras)
    manifest = {k: v for k, v in dataset.meta.items() if k not in ("frames", "split")}
    manifest["frames"] = frames
    manifest["format_version"] = FORMAT_VERSION
    if scene is not None:
        manifest["scene"] = scene.to_dict()
    write_json(out / "gt_manifest.json", manifest)


def load_dataset(root, split="train"):
    """Load one split of a dataset directory."""
    from .synthdata import Dataset

    root = Path(root)
    if not (root / "cameras.json").exists():
        raise ValidationError(f"{root} is not a dataset directory (cameras.json missing)")
    cams = read_json(root / "cameras.json")
    manifest = read_json(root / "gt_manifest.json") if (root / "gt_manifest.json").exists() else {}
    frames = {f["frame_id"]: f for f in manifest.get("frames", [])}
    ids = [f for f, c in cams.items() if c.get("split", "train") == split]
    if not ids:
        raise ValidationError(f"no frames in split {split!r}")
    images, skies, occs, cameras = [], [], [], []
    for fid in ids:
        images.append(read_exr(root / "images" / f"{fid}.exr", "RGB"))
        skies.append(read_mask(root / "masks_sky" / f"{fid}.png"))
        occ_path = root / "masks_occluder" / f"{fid}.png"
        occs.append(read_mask(occ_path) if occ_path.exists() else np.zeros(skies[-1].shape, bool))
        cameras.append(CameraSpec.from_dict(cams[fid]))
    meta = {k: v for k, v in manifest.items() if k != "frames"}
    meta["split"] = split
    meta["frames"] = [frames.get(f, {"frame_id": f}) for f in ids]
    return Dataset(np.stack(images), cameras, np.stack(skies), ids, np.stack(occs), meta)


def save_images(out_dir, images, frame_ids, prefix="distilled"):
    """Write ``<prefix>/<frame_id>.exr`` for each image."""
    for fid, img in zip(frame_ids, images):
        write_exr(Path(out_dir) / prefix / f"{fid}.exr", img)


def load_images(out_dir, frame_ids, prefix="distilled"):
    return np.stack([read_exr(Path(out_dir) / prefix / f"{fid}.exr", "RGB") for fid in frame_ids])


# --------------------------------------------------------------------------- archives

def _state_to_npz(state):
    buf = _io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in state.items()})
    return buf.getvalue()


def _npz_to_state(data):
    with np.load(_io.BytesIO(data)) as z:
        return {k: torch.from_numpy(z[k].copy()) for k in z.files}


def save_archive(path, modules, metadata):
    """Atomically write a zip with ``metadata.json`` and one ``<name>.npz`` per module."""
    buf = _io.BytesIO()
    meta = dict(metadata)
    meta["format_version"] = FORMAT_VERSION
    meta["modules"] = sorted(modules)
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, mod in modules.items():
            state = mod.state_dict() if hasattr(mod, "state_dict") else mod
            z.writestr(f"{name}.npz", _state_to_npz(state))
    atomic_write_bytes(path, buf.getvalue())


def load_archive(path):
    """Return ``(metadata, {name: state_dict})``."""
    try:
        with zipfile.ZipFile(path) as z:
            meta = json.loads(z.read("metadata.json"))
            states = {n: _npz_to_state(z.read(f"{n}.npz")) for n in meta["modules"]}
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ConfigurationError(f"{path} is not a valid model archive: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported archive version {meta.get('format_version')}")
    return meta, states


def save_checkpoint(path, model, decoder=None, extra=None):
    """Scene model archive: parameters, encoding, codes keyed by frame id, metadata."""
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("codes.")}
    codes = {}
    for fid in model.codes.frame_ids:
        i = model.codes.index[fid]
        for name in ("environment", "shadow", "tone"):
            codes[f"{fid}/{name}"] = getattr(model.codes, name)[i]
    modules = {"model": state, "codes": codes}
    if decoder is not None:
        modules["sky_decoder"] = decoder
    meta = {"kind": "scene_model", "model": model.config(), "scene_scale": 1.0,
            **(extra or {})}
    if decoder is not None:
        meta["sky_decoder"] = decoder.config()
    save_archive(path, modules, meta)


def load_checkpoint(path):
    """Return ``(model, decoder_or_None, metadata)``."""
    from .field import SceneModel
    from .lighting import SkyDecoder

    meta, states = load_archive(path)
    if meta.get("kind") != "scene_model":
        raise ConfigurationError(f"{path} does not hold a scene model")
    model = SceneModel.from_config(meta["model"])
    state = dict(states["model"])
    for name in ("environment", "shadow", "tone"):
        state[f"codes.{name}"] = torch.stack(
            [states["codes"][f"{fid}/{name}"] for fid in model.codes.frame_ids]) \
            if model.codes.frame_ids else getattr(model.codes, name).detach()
    model.load_state_dict(state)
    decoder = None
    if "sky_decoder" in states:
        decoder = SkyDecoder(**meta["sky_decoder"])
        decoder.load_state_dict(states["sky_decoder"])
        decoder.freeze()
    return model, decoder, meta


def save_decoder(path, decoder, extra=None):
    save_archive(path, {"sky_decoder": decoder},
                 {"kind": "sky_decoder", "sky_decoder": decoder.config(), **(extra or {})})


def load_decoder(path):
    from .lighting import SkyDecoder

    meta, states = load_archive(path)
    if meta.get("kind") != "sky_decoder":
        raise ConfigurationError(f"{path} does not hold a sky decoder")
    decoder = SkyDecoder(**meta["sky_decoder"])
    decoder.load_state_dict(states["sky_decoder"])
    decoder.freeze()
    return decoder


# --------------------------------------------------------------------------- config

def load_config(path):
    """Load a TOML or JSON configuration file into a dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        if path.suffix.lower() == ".json":
            return read_json(path)
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None


class JsonlLogger:
    """Append-only JSON-lines training log."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")
