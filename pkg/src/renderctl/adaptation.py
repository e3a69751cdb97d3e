"""Single-photo adaptation: latent-code fitting, realism augmentation with a
local implicit image network, field-of-view extrapolation and 3D-photo paths.
"""
import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import GeometryMutationError, TrainingError, ValidationError
from .field import BOUND_RADIUS, LatentCodes, _mlp
from .renderer import (CameraSpec, RenderOptions, generate_rays, irradiance_transfer, render_image,
                       shade_samples)
from .training import cache_geometry
from .validation import check_image, check_mask

log = logging.getLogger(__name__)


def parameter_checksum(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- latent adaptation

@dataclass
class AdaptationResult:
    codes: LatentCodes
    error: float                  # best masked MSE
    initial_error: float
    trace: list = field(default_factory=list)   # best-so-far masked MSE per step
    raw_trace: list = field(default_factory=list)

    @property
    def reduction(self):
        return 1.0 - self.error / max(self.initial_error, 1e-20)


def _rays_for_mask(cam, mask):
    rays = generate_rays(cam)
    idx = torch.from_numpy(np.flatnonzero(mask.reshape(-1)))
    return rays.subset(idx), idx


def adapt_photo(model, decoder, photo, cam, mask=None, steps=500, lr=1e-2, init=None,
                options=RenderOptions(), cache_samples=16):
    """Fit ``{l_e, l_s, l_t}`` to a photo with every field parameter frozen.

    ``mask`` is 1 on pixels to fit (people and other occluders excluded).
    Returns the best iterate by masked MSE.
    """
    photo = check_image(photo, "photo")
    if photo.shape[:2] != (cam.height, cam.width):
        raise ValidationError("photo resolution does not match the camera")
    mask = np.ones(photo.shape[:2], bool) if mask is None else check_mask(mask, photo.shape[:2])
    if not mask.any():
        raise ValidationError("adaptation mask selects no pixels")
    before = parameter_checksum(model)
    rays, idx = _rays_for_mask(cam, mask)
    target = torch.from_numpy(photo.reshape(-1, 3))[idx]
    cache = cache_geometry(model, rays, cache_samples, options)
    with torch.no_grad():
        albedo = model.appearance(cache.points, cache.feature)
        transfer = irradiance_transfer(cache.normal)

    dims = model.dims
    start = init if init is not None else LatentCodes.zeros(dims)
    params = [start.environment.detach().clone().requires_grad_(True),
              start.shadow.detach().clone().requires_grad_(True),
              start.tone.detach().clone().requires_grad_(True)]
    opt = torch.optim.Adam(params, lr=lr)

    frozen = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        best, best_err, trace, raw = None, math.inf, [], []
        initial = None
        for step in range(steps + 1):
            codes = LatentCodes(*params)
            rgb = shade_samples(model, decoder, cache.points, cache.feature, cache.normal,
                                cache.weight, cache.opacity, cache.directions, codes,
                                albedo=albedo, transfer=transfer)[0]
            loss = ((rgb - target) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"adaptation loss is not finite at step {step}",
                                    {"trace": trace})
            err = loss.item()
            if initial is None:
                initial = err
            raw.append(err)
            if err < best_err:
                best_err, best = err, codes.detach()
            trace.append(best_err)
            if step == steps:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p, r in zip(model.parameters(), frozen):
            p.requires_grad_(r)
    if parameter_checksum(model) != before:
        raise GeometryMutationError("field parameters changed during photo adaptation")
    return AdaptationResult(best, best_err, initial, trace, raw)


# --------------------------------------------------------------------------- realism network

class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def _make_coord(h, w, dtype=torch.float32):
    """Pixel-center coordinates in ``[-1, 1]``, shape ``(h, w, 2)`` as (y, x)."""
    ys = -1 + (2 * torch.arange(h, dtype=dtype) + 1) / h
    xs = -1 + (2 * torch.arange(w, dtype=dtype) + 1) / w
    return torch.stack(torch.meshgrid(ys, xs, indexing="ij"), -1)


def downscale(image, factor=2):
    """Area downscale of ``(B, 3, H, W)`` by an integer factor (floor sizes)."""
    H, W = image.shape[-2:]
    return F.interpolate(image, size=(max(H // factor, 1), max(W // factor, 1)), mode="area")


class RealismNet(nn.Module):
    """Convolutional encoder plus a local implicit decoder.

    The encoder sees the render downscaled by ``factor``; the decoder is queried
    at arbitrary output coordinates with the nearest feature, the relative
    offset to that feature's cell and the query cell size, blended over the four
    neighboring cells.  Its output is a residual on the full-resolution render
    resampled to the output grid, and the last layer starts at zero.
    """

    def __init__(self, channels=64, blocks=4, hidden=128, depth=4, factor=2):
        super().__init__()
        self.factor = factor
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.body = nn.Sequential(*[_ResBlock(channels) for _ in range(blocks)])
        self.decoder = _mlp(channels + 4, 3, hidden, depth - 1, nn.ReLU)
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def config(self):
        return {"channels": self.head.out_channels, "blocks": len(self.body),
                "hidden": self.decoder[0].out_features,
                "depth": sum(isinstance(m, nn.Linear) for m in self.decoder),
                "factor": self.factor}

    def encode(self, lowres):
        f = self.head(lowres)
        return f + self.body(f)

    def query(self, feat, coord, cell):
        """Decode residual rgb at ``coord`` ``(B, Q, 2)`` with cell size ``(B, Q, 2)``."""
        B, C, h, w = feat.shape
        rh, rw = 1.0 / h, 1.0 / w
        feat_coord = _make_coord(h, w, feat.dtype).permute(2, 0, 1)[None].expand(B, 2, h, w)
        preds, areas = [], []
        for vy in (-1, 1):
            for vx in (-1, 1):
                c = coord.clone()
                c[..., 0] += vy * rh + 1e-6
                c[..., 1] += vx * rw + 1e-6
                c = c.clamp(-1 + 1e-6, 1 - 1e-6)
                grid = c.flip(-1)[:, :, None]   # grid_sample wants (x, y)
                q_feat = F.grid_sample(feat, grid, mode="nearest", align_corners=False)
                q_feat = q_feat[..., 0].permute(0, 2, 1)
                q_coord = F.grid_sample(feat_coord, grid, mode="nearest", align_corners=False)
                q_coord = q_coord[..., 0].permute(0, 2, 1)
                rel = (coord - q_coord) * torch.tensor([h, w], dtype=coord.dtype)
                rel_cell = cell * torch.tensor([h, w], dtype=coord.dtype)
                preds.append(self.decoder(torch.cat([q_feat, rel, rel_cell], -1)))
                areas.append((rel[..., 0] * rel[..., 1]).abs() + 1e-9)
        total = sum(areas)
        # each prediction is weighted by the area of the diagonally opposite cell
        order = (3, 2, 1, 0)
        return sum(p * (areas[o] / total)[..., None] for p, o in zip(preds, order))

    def forward(self, rendered, out_size=None):
        """``rendered`` ``(B, 3, H, W)`` -> ``(B, 3, H', W')`` at ``out_size``."""
        H, W = rendered.shape[-2:]
        out_h, out_w = out_size if out_size is not None else (H, W)
        feat = self.encode(downscale(rendered, self.factor))
        coord = _make_coord(out_h, out_w, rendered.dtype).reshape(1, -1, 2)
        coord = coord.expand(rendered.shape[0], -1, -1)
        cell = torch.tensor([2.0 / out_h, 2.0 / out_w], dtype=rendered.dtype).expand_as(coord)
        residual = self.query(feat, coord, cell).permute(0, 2, 1).reshape(-1, 3, out_h, out_w)
        if (out_h, out_w) == (H, W):
            base = rendered
        else:
            base = F.interpolate(rendered, size=(out_h, out_w), mode="bilinear",
                                 align_corners=False)
        return base + residual


def _to_tensor(image):
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def _to_image(t):
    return t[0].permute(1, 2, 0).detach().numpy()


def _masked_mse(pred, target, mask):
    m = mask[:, None].to(pred.dtype)
    return ((pred - target) ** 2 * m).sum() / (3 * m.sum()).clamp_min(1.0)


def pretrain_realism(renders, photos, masks, steps=400, lr=5e-4, batch_size=4, seed=0, net=None):
    """Train on (render, photo, mask) triples of equal resolution."""
    renders = torch.from_numpy(np.asarray(renders, dtype=np.float32)).permute(0, 3, 1, 2)
    photos = torch.from_numpy(np.asarray(photos, dtype=np.float32)).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.asarray(masks, dtype=bool))
    if renders.shape != photos.shape or masks.shape != renders.shape[:1] + renders.shape[2:]:
        raise ValidationError("render, photo and mask stacks must align")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = RealismNet() if net is None else net
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    trace = []
    net.train()
    for step in range(steps):
        idx = torch.randint(len(renders), (min(batch_size, len(renders)),), generator=gen)
        loss = _masked_mse(net(renders[idx]), photos[idx], masks[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    net.eval()
    net.pretrain_trace = trace
    return net


def finetune_realism(net, rendered, photo, mask=None, steps=300, lr=2e-4, seed=0):
    """Fine-tune a copy of ``net`` so that ``net(rendered) ~ photo`` on the mask.

    Returns ``(net, loss_trace)``; the input network is left untouched.
    """
    rendered = check_image(rendered, "rendered")
    photo = check_image(photo, "photo")
    if rendered.shape != photo.shape:
        raise ValidationError(f"render {rendered.shape} and photo {photo.shape} differ in size")
    mask = np.ones(photo.shape[:2], bool) if mask is None else check_mask(mask, photo.shape[:2])
    net = copy.deepcopy(net)
    x, y = _to_tensor(rendered), _to_tensor(photo)
    m = torch.from_numpy(mask)[None]
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    trace = []
    net.train()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for _ in range(steps):
            loss = _masked_mse(net(x), y, m)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(loss.item())
    net.eval()
    return net, trace


def augment_realism(net, rendered_full, out_size=None):
    """Query the fine-tuned network on a (possibly wider) render at ``out_size``."""
    rendered_full = check_image(rendered_full, "rendered_full")
    if out_size is not None:
        out_size = (int(out_size[0]), int(out_size[1]))
        if min(out_size) < 1:
            raise ValidationError("out_size must be positive")
    with torch.no_grad():
        return _to_image(net.eval()(_to_tensor(rendered_full), out_size))


# --------------------------------------------------------------------------- extrapolation

@dataclass
class ExtrapolationRequest:
    photo: np.ndarray
    camera: CameraSpec
    target_camera: CameraSpec
    people_mask: np.ndarray = None   # 1 = person or occluder, excluded from fitting
    band: int = 16

    def __post_init__(self):
        self.photo = check_image(self.photo, "photo")
        H, W = self.photo.shape[:2]
        if (H, W) != (self.camera.height, self.camera.width):
            raise ValidationError("photo resolution does not match its camera")
        if self.people_mask is None:
            self.people_mask = np.zeros((H, W), bool)
        self.people_mask = check_mask(self.people_mask, (H, W), "people_mask")
        if self.band < 1:
            raise ValidationError("blend band must be at least one pixel")
        src, dst = self.camera, self.target_camera
        if dst.fov_x < src.fov_x - 1e-9 or dst.fov_y < src.fov_y - 1e-9:
            raise ValidationError("target field of view is smaller than the source photo's")
        if not np.allclose(src.pose, dst.pose, atol=1e-9) or \
                not np.isclose(src.fx, dst.fx) or not np.isclose(src.fy, dst.fy):
            raise ValidationError("target camera must share the photo's pose and focal length")
        ox, oy = dst.cx - src.cx, dst.cy - src.cy
        if abs(ox - round(ox)) > 1e-6 or abs(oy - round(oy)) > 1e-6:
            raise ValidationError("photo must sit at an integer pixel offset in the target view")
        self.offset = (int(round(oy)), int(round(ox)))
        y0, x0 = self.offset
        if y0 < 0 or x0 < 0 or y0 + H > dst.height or x0 + W > dst.width:
            raise ValidationError("photo does not lie inside the target view")

    @classmethod
    def widen(cls, photo, camera, left=0, right=0, top=0, bottom=0, **kw):
        """Request whose target extends the photo by the given pixel margins."""
        target = CameraSpec(camera.pose, camera.fx, camera.fy, camera.cx + left, camera.cy + top,
                            camera.width + left + right, camera.height + top + bottom)
        return cls(photo, camera, target, **kw)


def blend_weights(shape, offset, target_shape, band):
    """Photo weight over the photo region: 0 at open edges, 1 from ``band`` px inside.

    Edges that coincide with the target border are closed (no feathering).
    """
    H, W = shape
    y0, x0 = offset
    TH, TW = target_shape
    ys = np.arange(H)[:, None].astype(np.float64)
    xs = np.arange(W)[None, :].astype(np.float64)
    d = np.full((H, W), np.inf)
    if x0 > 0:
        d = np.minimum(d, xs + 0 * ys)
    if x0 + W < TW:
        d = np.minimum(d, (W - 1 - xs) + 0 * ys)
    if y0 > 0:
        d = np.minimum(d, ys + 0 * xs)
    if y0 + H < TH:
        d = np.minimum(d, (H - 1 - ys) + 0 * xs)
    return np.clip(d / band, 0.0, 1.0), d


@dataclass
class ExtrapolationResult:
    image: np.ndarray          # composite
    augmented: np.ndarray      # realism-augmented wide render
    rendered: np.ndarray       # plain wide render
    weights: np.ndarray        # photo weight over the photo region
    offset: tuple
    adaptation: AdaptationResult
    realism_trace: list = field(default_factory=list)
    net: object = None

    def seam_jump(self):
        return seam_jump(self.image, self.augmented, self.weights, self.offset)


def composite_photo(photo, wide, weights, offset):
    """Blend the photo into ``wide``; pixels with weight 1 are copied bitwise."""
    out = np.array(wide, dtype=np.float32, copy=True)
    H, W = photo.shape[:2]
    y0, x0 = offset
    region = out[y0:y0 + H, x0:x0 + W]
    w = weights[..., None].astype(np.float32)
    blended = w * photo + (1.0 - w) * region
    out[y0:y0 + H, x0:x0 + W] = np.where(w >= 1.0, photo, blended)
    return out


def seam_jump(image, underlying, weights, offset):
    """Largest channel jump across the blend-band boundaries beyond the underlying image's own.

    Looks at neighboring pixel pairs that straddle the photo's open edge or the
    inner edge of the band.
    """
    H, W = weights.shape
    y0, x0 = offset
    worst = 0.0
    full_w = np.zeros(image.shape[:2])
    full_w[y0:y0 + H, x0:x0 + W] = weights
    inside = np.zeros(image.shape[:2], bool)
    inside[y0:y0 + H, x0:x0 + W] = True
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis], b[axis] = slice(None, -1), slice(1, None)
        a, b = tuple(a), tuple(b)
        boundary = (inside[a] != inside[b]) | ((full_w[a] >= 1) != (full_w[b] >= 1))
        if not boundary.any():
            continue
        jump = np.abs(image[a] - image[b]).max(-1)
        base = np.abs(underlying[a] - underlying[b]).max(-1)
        worst = max(worst, float((jump - base)[boundary].max()))
    return max(worst, 0.0)


def extrapolate(model, decoder, req, realism=None, adapt_steps=500, finetune_steps=300,
                options=RenderOptions(), adaptation=None, seed=0):
    """Adapt codes, render the wide view, propagate photo detail and composite the photo."""
    fit_mask = ~req.people_mask
    if adaptation is None:
        adaptation = adapt_photo(model, decoder, req.photo, req.camera, fit_mask, adapt_steps,
                                 options=options)
    wide = render_image(model, req.target_camera, adaptation.codes, decoder,
                        options=options)["rgb"]
    H, W = req.photo.shape[:2]
    y0, x0 = req.offset
    trace, net = [], None
    if realism is not None:
        overlap = wide[y0:y0 + H, x0:x0 + W]
        net, trace = finetune_realism(realism, overlap, req.photo, fit_mask, finetune_steps,
                                      seed=seed)
        augmented = augment_realism(net, wide, wide.shape[:2])
    else:
        augmented = wide
    weights, _ = blend_weights((H, W), req.offset, wide.shape[:2], req.band)
    image = composite_photo(req.photo, augmented, weights, req.offset)
    return ExtrapolationResult(image, augmented, wide, weights, req.offset, adaptation, trace, net)


# --------------------------------------------------------------------------- 3D photo

@dataclass
class PathSpec:
    """Camera trajectory around a base camera.

    ``orbit``: rotate about the vertical axis through ``center`` by
    ``step_deg`` per frame, swinging ``amplitude_deg`` either side of the base
    pose (zero amplitude keeps the base pose).  ``dolly``: move along the
    viewing axis by ``step`` per frame, up to ``amplitude``.
    """
    kind: str = "orbit"
    step_deg: float = 2.0
    amplitude_deg: float = 10.0
    center: tuple = (0.0, 0.0, 0.0)
    step: float = 0.02
    amplitude: float = 0.2
    max_camera_radius: float = 10.0

    def __post_init__(self):
        if self.kind not in ("orbit", "dolly"):
            raise ValidationError(f"unknown path kind {self.kind!r}")
        if np.linalg.norm(self.center) > BOUND_RADIUS:
            raise ValidationError("path center leaves the scene bounding sphere")

    def cameras(self, base, n_frames):
        if n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        cams = []
        for i in range(n_frames):
            pose = base.pose.copy()
            if self.kind == "orbit":
                ang = _triangle(i * self.step_deg, self.amplitude_deg)
                pose = _rotate_about_z(pose, np.radians(ang), np.asarray(self.center, float))
            else:
                off = _triangle(i * self.step, self.amplitude)
                pose[:3, 3] = pose[:3, 3] + off * pose[:3, 2]
            c = pose[:3, 3]
            if np.linalg.norm(c) > self.max_camera_radius:
                raise ValidationError("camera path leaves the allowed region")
            if self.kind == "dolly" and np.linalg.norm(c) < BOUND_RADIUS:
                raise ValidationError("dolly path enters the scene bounding sphere")
            cams.append(base.with_pose(pose))
        return cams


def _triangle(x, amplitude):
    """Back-and-forth sweep ``0 -> a -> -a -> 0`` at unit speed."""
    if amplitude <= 0:
        return 0.0
    period = 4 * amplitude
    p = x % period
    if p <= amplitude:
        return p
    if p <= 3 * amplitude:
        return 2 * amplitude - p
    return p - period


def _rotate_about_z(pose, angle, center):
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    out = pose.copy()
    out[:3, :3] = R @ pose[:3, :3]
    out[:3, 3] = R @ (pose[:3, 3] - center) + center
    return out


@dataclass
class Photo3DResult:
    frames: list
    cameras: list
    manifest: dict


def render_3d_photo(model, decoder, codes, base_cam, path_spec=PathSpec(), n_frames=30,
                    realism=None, out_dir=None, options=RenderOptions()):
    """Render frames along a camera path with fixed codes, realism-augmented if a net is given."""
    cams = path_spec.cameras(base_cam, n_frames)
    frames = []
    for cam in cams:
        rgb = render_image(model, cam, codes, decoder, options=options)["rgb"]
        frames.append(augment_realism(realism, rgb) if realism is not None else rgb)
    manifest = {"n_frames": n_frames, "path": path_spec.__dict__ | {"center": list(path_spec.center)},
                "codes": codes.to_dict(), "realism": realism is not None,
                "frames": [f"frame_{i:04d}.png" for i in range(n_frames)],
                "cameras": [c.to_dict() for c in cams]}
    if out_dir is not None:
        from pathlib import Path

        from .io import write_json, write_png
        for i, f in enumerate(frames):
            write_png(Path(out_dir) / f"frame_{i:04d}.png", f)
        write_json(Path(out_dir) / "manifest.json", manifest)
    return Photo3DResult(frames, cams, manifest)


def realism_training_pairs(model, decoder, dataset, options=RenderOptions(), frames=None):
    """Renders at training poses with the frames' own codes, paired with the raw photos.

    Occluder pixels are masked out of the targets.
    """
    idx = range(len(dataset)) if frames is None else frames
    renders, photos, masks = [], [], []
    for i in idx:
        codes = model.codes.codes([dataset.frame_ids[i]]).detach()
        renders.append(render_image(model, dataset.cameras[i], codes, decoder,
                                    options=options)["rgb"])
        photos.append(dataset.images[i])
        occ = dataset.occluder_masks[i] if dataset.occluder_masks is not None else \
            np.zeros(dataset.shape, bool)
        masks.append(~occ)
    return np.stack(renders), np.stack(photos), np.stack(masks)
