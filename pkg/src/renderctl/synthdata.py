"""Procedural ground truth: analytic SDF scenes with known albedo, shadow,
lighting and tone, plus a sphere tracer that shades with the same Lambertian
quadrature as the neural renderer.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .exceptions import ValidationError
from .field import BOUND_RADIUS
from .lighting import (DECODER_RES, SHADING_RES, EnvMap, ProceduralSkyParams, ToneMap,
                       area_downscale, procedural_sky, shade_lambertian, sky_radiance, tone_apply)
from .renderer import CameraSpec, generate_rays
from .validation import check_probability

PRESETS = ("fountain-like", "facade-like", "minimal-sphere")


# --------------------------------------------------------------------------- primitives

def _sd_sphere(p, c, r):
    return torch.linalg.norm(p - c, dim=-1) - r


def _sd_box(p, c, half):
    q = (p - c).abs() - half
    outside = torch.linalg.norm(q.clamp_min(0.0), dim=-1)
    inside = q.max(dim=-1).values.clamp_max(0.0)
    return outside + inside


def _sd_round_box(p, c, half, r):
    return _sd_box(p, c, half - r) - r


def _sd_cylinder(p, c, r, half_h):
    q = p - c
    d = torch.stack([torch.linalg.norm(q[..., :2], dim=-1) - r, q[..., 2].abs() - half_h], -1)
    return d.max(-1).values.clamp_max(0.0) + torch.linalg.norm(d.clamp_min(0.0), dim=-1)


def _sd_torus(p, c, major, minor):
    q = p - c
    ring = torch.linalg.norm(q[..., :2], dim=-1) - major
    return torch.sqrt(ring * ring + q[..., 2] ** 2) - minor


def _sd_plane(p, height):
    return p[..., 2] - height


_SDF = {
    "sphere": lambda p, a: _sd_sphere(p, a["center"], a["radius"]),
    "box": lambda p, a: _sd_box(p, a["center"], a["half"]),
    "round_box": lambda p, a: _sd_round_box(p, a["center"], a["half"], a["rounding"]),
    "cylinder": lambda p, a: _sd_cylinder(p, a["center"], a["radius"], a["half_height"]),
    "torus": lambda p, a: _sd_torus(p, a["center"], a["major"], a["minor"]),
    "plane": lambda p, a: _sd_plane(p, a["height"]),
}


@dataclass
class Primitive:
    kind: str
    params: dict
    color: tuple = (0.8, 0.8, 0.8)
    texture_freq: float = 0.0
    texture_amp: float = 0.0

    def tensors(self, dtype):
        return {k: torch.as_tensor(v, dtype=dtype) for k, v in self.params.items()}

    def sdf(self, p):
        return _SDF[self.kind](p, self.tensors(p.dtype))

    def albedo(self, p):
        base = torch.tensor(self.color, dtype=p.dtype)
        if self.texture_amp == 0:
            return base.expand(*p.shape[:-1], 3)
        f = self.texture_freq
        pattern = 0.5 + 0.5 * torch.sin(f * p[..., 0] + 0.7) * torch.sin(f * p[..., 1] + 1.3) \
            * torch.cos(f * p[..., 2])
        return base * (1.0 - self.texture_amp + self.texture_amp * pattern[..., None])


def smooth_min(a, b, k):
    """Polynomial smooth minimum; exact ``min`` for ``k = 0``."""
    if k <= 0:
        return torch.minimum(a, b)
    h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


# --------------------------------------------------------------------------- shadows

@dataclass
class ShadowCaster:
    """Horizontal rectangle above the scene, out of frame, casting a soft box shadow.

    A point is shadowed when the ray from it toward the sun crosses the
    rectangle at height ``height``.
    """
    sun_direction: tuple
    center: tuple          # (x, y) in the caster plane
    half: tuple            # half extents along (axis, axis rotated by +90 deg)
    axis: tuple = (1.0, 0.0)
    height: float = 3.0
    softness: float = 0.08
    strength: float = 0.6  # shadowed value is 1 - strength

    def __call__(self, x):
        sun = torch.tensor(self.sun_direction, dtype=x.dtype)
        t = (self.height - x[..., 2]) / sun[2]
        p = x[..., :2] + t[..., None] * sun[:2]
        u = torch.tensor(self.axis, dtype=x.dtype)
        rot = torch.stack([u, torch.stack([-u[1], u[0]])])
        local = (p - torch.tensor(self.center, dtype=x.dtype)) @ rot.T
        d = local.abs() - torch.tensor(self.half, dtype=x.dtype)
        inside = torch.sigmoid(-d / self.softness).prod(-1)
        return 1.0 - self.strength * inside


# --------------------------------------------------------------------------- scene

@dataclass
class Condition:
    sky: ProceduralSkyParams
    shadow: ShadowCaster

    def envmap(self):
        """Shading-resolution GT map: native procedural map, area-averaged."""
        native = procedural_sky(self.sky, *DECODER_RES)
        return EnvMap(area_downscale(native.radiance, DECODER_RES[0] // SHADING_RES[0]))


@dataclass
class Occluder:
    kind: str              # "sphere" or "billboard"
    center: tuple
    size: tuple            # sphere: (radius,), billboard: (half_width, half_height)
    colors: tuple = ((0.9, 0.15, 0.1), (0.1, 0.2, 0.85))
    normal: tuple = (0.0, 0.0, 1.0)  # billboard facing direction
    checker: float = 0.06

    def intersect(self, origins, dirs):
        """Depth of the first hit (inf on miss) and the hit color."""
        dt = origins.dtype
        c = torch.tensor(self.center, dtype=dt)
        if self.kind == "sphere":
            oc = origins - c
            b = (oc * dirs).sum(-1)
            disc = b * b - ((oc * oc).sum(-1) - self.size[0] ** 2)
            t = -b - torch.sqrt(disc.clamp_min(0.0))
            t = torch.where((disc > 0) & (t > 0), t, torch.full_like(t, math.inf))
            p = origins + t.clamp_max(1e6)[:, None] * dirs
            local = p - c
        else:
            n = torch.tensor(self.normal, dtype=dt)
            denom = dirs @ n
            t = ((c - origins) @ n) / torch.where(denom.abs() < 1e-9, torch.full_like(denom, 1e-9), denom)
            p = origins + t.clamp(-1e6, 1e6)[:, None] * dirs
            up = torch.tensor((0.0, 0.0, 1.0), dtype=dt)
            right = torch.linalg.cross(up, n)
            right = right / torch.linalg.norm(right)
            local3 = p - c
            u, v = local3 @ right, local3 @ up
            inside = (u.abs() <= self.size[0]) & (v.abs() <= self.size[1]) & (t > 0)
            t = torch.where(inside, t, torch.full_like(t, math.inf))
            local = torch.stack([u, v, torch.zeros_like(u)], -1)
        cells = torch.floor(local / self.checker).sum(-1)
        pick = torch.remainder(cells, 2.0)[:, None]
        c0 = torch.tensor(self.colors[0], dtype=dt)
        c1 = torch.tensor(self.colors[1], dtype=dt)
        return t, c0 * (1 - pick) + c1 * pick

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticScene:
    preset: str
    seed: int
    primitives: list
    blend_k: float
    conditions: list
    tonemaps: list
    occluder_library: list = field(default_factory=list)

    # analytic fields ---------------------------------------------------
    def primitive_distances(self, p):
        return torch.stack([prim.sdf(p) for prim in self.primitives], -1)

    def sdf(self, p):
        d = self.primitive_distances(p)
        out = d[..., 0]
        for i in range(1, d.shape[-1]):
            out = smooth_min(out, d[..., i], self.blend_k)
        return out

    __call__ = sdf

    def in_blend_region(self, p):
        """True where two primitives are within the smooth-min band of each other."""
        if self.blend_k <= 0 or len(self.primitives) < 2:
            return torch.zeros(p.shape[:-1], dtype=torch.bool)
        d, _ = torch.sort(self.primitive_distances(p), dim=-1)
        return (d[..., 1] - d[..., 0]) < self.blend_k

    def albedo(self, p):
        d = self.primitive_distances(p)
        nearest = d.argmin(-1)
        cols = torch.stack([prim.albedo(p) for prim in self.primitives], -2)
        return cols.gather(-2, nearest[..., None, None].expand(*nearest.shape, 1, 3))[..., 0, :]

    def shadow(self, p, condition):
        return self.conditions[condition].shadow(p)

    def envmap(self, condition):
        return self.conditions[condition].envmap()

    @property
    def n_conditions(self):
        return len(self.conditions)

    def to_dict(self):
        return {
            "preset": self.preset, "seed": self.seed, "blend_k": self.blend_k,
            "primitives": [asdict(p) for p in self.primitives],
            "conditions": [{"sky": c.sky.to_dict(), "shadow": asdict(c.shadow)}
                           for c in self.conditions],
            "tonemaps": [t.to_dict() for t in self.tonemaps],
            "occluder_library": [o.to_dict() for o in self.occluder_library],
        }

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_jsonable).encode()
        return hashlib.sha256(blob).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _sun(elev_deg, az_deg):
    e, a = math.radians(elev_deg), math.radians(az_deg)
    return (math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e))


def _caster_for(sun, offset, rng):
    """Rectangle whose shadow edge crosses the scene near ``offset`` along the sun-perpendicular."""
    height = 3.0
    horiz = np.array(sun[:2]) / np.linalg.norm(sun[:2])
    perp = np.array([-horiz[1], horiz[0]])
    reach = height / math.tan(math.asin(sun[2]))
    # rectangle spans the sun azimuth widely, covers one side of the perpendicular line
    center = horiz * reach + perp * (offset + 1.5)
    return ShadowCaster(sun_direction=tuple(sun), center=tuple(center.tolist()),
                        half=(3.0, 1.5), axis=tuple(horiz.tolist()), height=height,
                        strength=float(rng.uniform(0.45, 0.6)))


def make_scene(preset, seed=0):
    """Build a deterministic synthetic scene from a named preset."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    rng = np.random.default_rng(seed)
    jit = lambda s: float(rng.uniform(-s, s))  # noqa: E731

    if preset == "minimal-sphere":
        prims = [Primitive("sphere", {"center": (0.0, 0.0, 0.0), "radius": 1.0}, (0.8, 0.8, 0.8))]
        blend = 0.0
    elif preset == "facade-like":
        prims = [
            Primitive("plane", {"height": -0.45}, (0.55, 0.53, 0.5), texture_freq=9.0,
                      texture_amp=0.25),
            Primitive("box", {"center": (0.0, 0.0, -0.08 + jit(0.02)), "half": (0.45, 0.28, 0.34)},
                      (0.8, 0.68, 0.5), texture_freq=14.0, texture_amp=0.35),
            Primitive("box", {"center": (0.0, -0.38, -0.28), "half": (0.3, 0.12, 0.14)},
                      (0.65, 0.4, 0.35), texture_freq=11.0, texture_amp=0.3),
            Primitive("round_box", {"center": (0.0, 0.0, 0.34), "half": (0.22, 0.16, 0.1),
                                    "rounding": 0.05},
                      (0.5, 0.55, 0.62)),
        ]
        blend = 0.0
    else:
        prims = [
            Primitive("plane", {"height": -0.45}, (0.55, 0.53, 0.5), texture_freq=9.0,
                      texture_amp=0.25),
            Primitive("torus", {"center": (0.0, 0.0, -0.38), "major": 0.55, "minor": 0.09},
                      (0.78, 0.74, 0.68), texture_freq=16.0, texture_amp=0.3),
            Primitive("cylinder", {"center": (0.0, 0.0, -0.15), "radius": 0.12, "half_height": 0.25},
                      (0.75, 0.7, 0.62), texture_freq=12.0, texture_amp=0.2),
            Primitive("sphere", {"center": (0.0, 0.0, 0.28 + jit(0.03)), "radius": 0.24},
                      (0.62, 0.66, 0.72), texture_freq=10.0, texture_amp=0.3),
        ]
        blend = 0.04

    day = ProceduralSkyParams(sun_direction=_sun(50 + jit(5), 35 + jit(10)), sun_intensity=28.0,
                              sun_angular_radius=0.09, zenith_color=(0.12, 0.24, 0.58),
                              horizon_color=(0.5, 0.58, 0.68), ambient=0.06,
                              ground_tint=(1.2, 1.1, 0.95))
    dusk = ProceduralSkyParams(sun_direction=_sun(28 + jit(4), 150 + jit(10)), sun_intensity=22.0,
                               sun_angular_radius=0.1, zenith_color=(0.24, 0.17, 0.34),
                               horizon_color=(0.85, 0.45, 0.2), ambient=0.08,
                               ground_tint=(1.1, 0.85, 0.6))
    conditions = [Condition(day, _caster_for(day.sun_direction, -0.1, rng)),
                  Condition(dusk, _caster_for(dusk.sun_direction, 0.15, rng))]
    tonemaps = [
        ToneMap.identity(),
        ToneMap(torch.tensor([[1.06, 0.04, 0.0], [0.02, 0.97, 0.0], [0.0, 0.03, 0.86]],
                             dtype=torch.float64),
                torch.tensor([0.035, 0.02, 0.0], dtype=torch.float64)),
    ]
    library = [
        Occluder("billboard", (0, 0, 0), (0.09, 0.2)),
        Occluder("billboard", (0, 0, 0), (0.12, 0.16), colors=((0.95, 0.85, 0.1), (0.1, 0.1, 0.1))),
        Occluder("sphere", (0, 0, 0), (0.13,), colors=((0.1, 0.8, 0.2), (0.9, 0.1, 0.8))),
    ]
    return SyntheticScene(preset, seed, prims, blend, conditions, tonemaps, library)


# --------------------------------------------------------------------------- ground-truth render

def sphere_trace(sdf_fn, origins, dirs, near, far, max_steps=512, eps=1e-6):
    """Return ``(t, converged)``; ``t = inf`` where the ray leaves ``[near, far]``."""
    t = near.clone()
    active = torch.ones_like(t, dtype=torch.bool)
    converged = torch.zeros_like(active)
    missed = torch.zeros_like(active)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = active.nonzero()[:, 0]
        d = sdf_fn(origins[idx] + t[idx, None] * dirs[idx])
        hit = d.abs() < eps
        converged[idx[hit]] = True
        t[idx[~hit]] += d[~hit]
        gone = t[idx] > far[idx]
        missed[idx[gone & ~hit]] = True
        active[idx[hit | gone]] = False
    t = torch.where(converged, t, torch.full_like(t, math.inf))
    invalid = active  # ran out of steps
    return t, converged, invalid


def render_ground_truth(scene, cam, condition, tone=0, shadow_condition=None, occluders=(),
                        env_condition=None):
    """Sphere-traced reference image with the same light model as the neural renderer.

    Surface: ``Gamma(a * s * sum L (w.n) dw)``; sky pixels: the procedural sky
    along the view direction, not tone mapped.  ``env_condition`` and
    ``shadow_condition`` default to ``condition``.
    """
    if not 0 <= condition < scene.n_conditions:
        raise ValidationError(f"condition {condition} out of range")
    env_c = condition if env_condition is None else env_condition
    sh_c = condition if shadow_condition is None else shadow_condition
    dt = torch.float64
    rays = generate_rays(cam, dtype=dt)
    o, d = rays.origins, rays.directions
    t, conv, invalid = sphere_trace(scene.sdf, o, d, rays.near, rays.far)
    hit = conv & rays.hit
    N = len(rays)
    img = torch.zeros(N, 3, dtype=dt)

    sky = sky_radiance(scene.conditions[env_c].sky, d)
    img[~hit] = sky[~hit]
    if hit.any():
        x = (o[hit] + t[hit, None] * d[hit]).detach().requires_grad_(True)
        with torch.enable_grad():
            sdf = scene.sdf(x)
            (grad,) = torch.autograd.grad(sdf.sum(), x)
        x = x.detach()
        n = grad / torch.linalg.norm(grad, dim=-1, keepdim=True)
        c = shade_lambertian(scene.albedo(x), scene.shadow(x, sh_c), n, scene.envmap(env_c))
        tm = scene.tonemaps[tone] if isinstance(tone, int) else tone
        img[hit] = tone_apply(tm, c)
    depth = torch.where(hit, t, torch.full_like(t, math.inf))

    occ_mask = torch.zeros(N, dtype=torch.bool)
    for occ in occluders:
        ot, col = occ.intersect(o, d)
        front = ot < depth
        img[front] = col[front]
        occ_mask |= front
        depth = torch.where(front, ot, depth)
    H, W = cam.height, cam.width
    return {
        "image": img.reshape(H, W, 3).numpy().astype(np.float32),
        "sky_mask": (hit | occ_mask).reshape(H, W).numpy(),
        "surface_mask": hit.reshape(H, W).numpy(),
        "occluder_mask": occ_mask.reshape(H, W).numpy(),
        "depth": depth.reshape(H, W).numpy(),
        "invalid": (invalid & rays.hit).reshape(H, W).numpy(),
    }


# --------------------------------------------------------------------------- datasets

@dataclass
class DatasetSpec:
    n_views: int = 40
    n_test: int = 6
    width: int = 48
    height: int = 48
    fov_deg: float = 45.0
    ring_radius: float = 3.2
    elevation_deg: tuple = (6.0, 20.0)
    azimuth_jitter_deg: float = 3.0
    target_jitter: float = 0.05
    occluder_prob: float = 0.5
    assignment: str = "round-robin"
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 10:
            raise ValidationError("need at least 10 training views")
        check_probability(self.occluder_prob, "occluder_prob")
        if self.ring_radius <= BOUND_RADIUS:
            raise ValidationError("cameras must sit outside the bounding sphere")
        if self.assignment not in ("round-robin", "random"):
            raise ValidationError(f"unknown assignment {self.assignment!r}")
        self.elevation_deg = tuple(self.elevation_deg)

    def to_dict(self):
        d = asdict(self)
        d["elevation_deg"] = list(self.elevation_deg)
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    """Posed images with sky masks, optional occluder masks and frame ids."""
    images: np.ndarray                 # (F, H, W, 3) linear float32
    cameras: list
    sky_masks: np.ndarray              # (F, H, W) bool, True = non-sky
    frame_ids: list
    occluder_masks: np.ndarray = None  # (F, H, W) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frame_ids)
        if len(self.images) != n or len(self.cameras) != n or len(self.sky_masks) != n:
            raise ValidationError("images, cameras, masks and frame ids must align")
        if self.sky_masks.shape != self.images.shape[:3]:
            raise ValidationError("sky masks must match image resolution")
        if self.occluder_masks is not None and self.occluder_masks.shape != self.images.shape[:3]:
            raise ValidationError("occluder masks must match image resolution")
        self.frame_ids = [str(f) for f in self.frame_ids]

    def __len__(self):
        return len(self.frame_ids)

    @property
    def shape(self):
        return self.images.shape[1:3]

    def subset(self, idx):
        idx = list(idx)
        occ = None if self.occluder_masks is None else self.occluder_masks[idx]
        meta = dict(self.meta)
        if "frames" in meta:
            meta["frames"] = [meta["frames"][i] for i in idx]
        return Dataset(self.images[idx], [self.cameras[i] for i in idx], self.sky_masks[idx],
                       [self.frame_ids[i] for i in idx], occ, meta)


def _camera_for_view(spec, azimuth_deg, rng):
    elev = math.radians(rng.uniform(*spec.elevation_deg))
    az = math.radians(azimuth_deg + rng.uniform(-spec.azimuth_jitter_deg, spec.azimuth_jitter_deg))
    eye = spec.ring_radius * np.array([math.cos(elev) * math.cos(az),
                                       math.cos(elev) * math.sin(az), math.sin(elev)])
    target = rng.uniform(-spec.target_jitter, spec.target_jitter, 3) + np.array([0, 0, 0.1])
    return CameraSpec.look_at(eye, target, spec.width, spec.height, spec.fov_deg)


def _place_occluders(scene, cam, rng):
    proto = scene.occluder_library[rng.integers(len(scene.occluder_library))]
    eye = cam.center
    fwd, right, down = cam.pose[:3, 2], cam.pose[:3, 0], cam.pose[:3, 1]
    dist = rng.uniform(1.85, 2.1)
    pos = eye + dist * fwd + rng.uniform(-0.35, 0.35) * right + rng.uniform(0.0, 0.3) * down
    facing = -fwd.copy()
    facing[2] = 0.0
    facing /= np.linalg.norm(facing)
    return [Occluder(proto.kind, tuple(pos.tolist()), proto.size, proto.colors,
                     tuple(facing.tolist()), proto.checker)]


def _assign(spec, i, n_cond, n_tone, rng):
    if spec.assignment == "round-robin":
        return i % n_cond, (i // n_cond) % n_tone
    return int(rng.integers(n_cond)), int(rng.integers(n_tone))


def generate_dataset(scene, spec, out_dir=None):
    """Render train and test views; returns ``(train, test)`` datasets.

    Test views are occluder-free and interleaved in azimuth with the training
    ring.  When ``out_dir`` is given the dataset is also written to disk.
    """
    frames = []
    train, test = [], []
    n_total = spec.n_views + spec.n_test
    for i in range(n_total):
        is_test = i >= spec.n_views
        k = i - spec.n_views if is_test else i
        count = spec.n_test if is_test else spec.n_views
        base_az = 360.0 * (k + (0.5 if is_test else 0.0)) / count
        rng = np.random.default_rng([spec.seed, i])
        cam = _camera_for_view(spec, base_az, rng)
        cond, tone = _assign(spec, k, scene.n_conditions, len(scene.tonemaps), rng)
        occ = []
        if not is_test and rng.uniform() < spec.occluder_prob:
            occ = _place_occluders(scene, cam, rng)
        gt = render_ground_truth(scene, cam, cond, tone, occluders=occ)
        fid = f"{'test' if is_test else 'train'}_{k:04d}"
        record = {"frame_id": fid, "split": "test" if is_test else "train", "condition": cond,
                  "tone": tone, "shadow_condition": cond,
                  "occluders": [o.to_dict() for o in occ]}
        (test if is_test else train).append((fid, cam, gt, record))
        frames.append(record)

    def build(items, split):
        meta = {"spec": spec.to_dict(), "spec_hash": spec.hash(), "scene_hash": scene.hash(),
                "preset": scene.preset, "split": split, "frames": [r for *_, r in items]}
        return Dataset(np.stack([g["image"] for _, _, g, _ in items]),
                       [c for _, c, _, _ in items],
                       np.stack([g["sky_mask"] for _, _, g, _ in items]),
                       [f for f, *_ in items],
                       np.stack([g["occluder_mask"] for _, _, g, _ in items]), meta)

    train_ds, test_ds = build(train, "train"), build(test, "test") if test else None
    if out_dir is not None:
        from .io import save_dataset
        save_dataset(train_ds, out_dir, scene=scene, test=test_ds)
    return train_ds, test_ds
