"""Ray generation, SDF-to-opacity sampling and factored pixel rendering.

Camera convention: right-handed camera frame, +z forward, +x right, +y down.
``CameraSpec.pose`` maps camera to world.  Pixel ``(i, j)`` (column, row) has
its center at image coordinates ``(i + 0.5, j + 0.5)``.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import DomainError, ValidationError
from .field import BOUND_RADIUS, clamp_to_bounds
from .lighting import SHADING_RES, decode_radiance, irradiance, solid_angles, tone_decode


@dataclass
class CameraSpec:
    pose: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @classmethod
    def look_at(cls, eye, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(pose, f, f, width / 2, height / 2, width, height)

    @property
    def center(self):
        return self.pose[:3, 3].copy()

    @property
    def fov_x(self):
        """Horizontal field of view in radians."""
        return float(np.arctan(self.cx / self.fx) + np.arctan((self.width - self.cx) / self.fx))

    @property
    def fov_y(self):
        return float(np.arctan(self.cy / self.fy) + np.arctan((self.height - self.cy) / self.fy))

    def with_pose(self, pose):
        return CameraSpec(pose, self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def crop(self, x0, y0, width, height):
        """Camera for the sub-window starting at pixel ``(x0, y0)``."""
        return CameraSpec(self.pose, self.fx, self.fy, self.cx - x0, self.cy - y0, width, height)

    def project(self, points):
        """World points ``(N, 3)`` to pixel-index coordinates ``(N, 2)`` and depth ``(N,)``."""
        points = np.asarray(points, dtype=np.float64)
        w2c = np.linalg.inv(self.pose)
        pc = points @ w2c[:3, :3].T + w2c[:3, 3]
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx - 0.5
        v = self.fy * pc[:, 1] / z + self.cy - 0.5
        return np.stack([u, v], axis=-1), z

    def to_dict(self):
        return {"pose": self.pose.reshape(-1).tolist(), "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["pose"], dtype=np.float64).reshape(4, 4), d["fx"], d["fy"],
                   d["cx"], d["cy"], d["width"], d["height"])


@dataclass
class RayBatch:
    origins: torch.Tensor      # (N, 3)
    directions: torch.Tensor   # (N, 3) unit
    near: torch.Tensor         # (N,)
    far: torch.Tensor          # (N,)
    hit: torch.Tensor          # (N,) bool, ray meets the bounding sphere
    pixel_ids: torch.Tensor    # (N,) long, row-major

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx],
                        self.hit[idx], self.pixel_ids[idx])


def sphere_bounds(origins, directions, radius=BOUND_RADIUS):
    """Near/far depths of the ray segment inside the bounding sphere.

    Rays missing the sphere get a short dummy segment around their closest
    approach and ``hit = False``.
    """
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(disc.clamp_min(0.0))
    near = (-b - root).clamp_min(0.0)
    far = -b + root
    closest = (-b).clamp_min(0.0)
    near = torch.where(hit, near, closest)
    far = torch.where(hit & (far > near), far, closest + 1e-3)
    hit = hit & (far > near + 1e-6)
    return near, far, hit


def generate_rays(cam, pixels=None, dtype=torch.float32):
    """Pinhole rays through pixel centers.

    ``pixels`` is ``(N, 2)`` in (column, row) index coordinates; ``None`` means
    every pixel in row-major order.
    """
    if pixels is None:
        jj, ii = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=-1)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if (pixels[:, 0].min(initial=0) < -0.5 or pixels[:, 1].min(initial=0) < -0.5
            or pixels[:, 0].max(initial=0) > cam.width - 0.5
            or pixels[:, 1].max(initial=0) > cam.height - 0.5):
        raise DomainError("pixel coordinates outside the image")
    d_cam = np.stack([(pixels[:, 0] + 0.5 - cam.cx) / cam.fx,
                      (pixels[:, 1] + 0.5 - cam.cy) / cam.fy,
                      np.ones(len(pixels))], axis=-1)
    d = d_cam @ cam.pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.pose[:3, 3], d.shape)
    origins = torch.tensor(o, dtype=dtype)
    directions = torch.tensor(d, dtype=dtype)
    near, far, hit = sphere_bounds(origins, directions)
    ids = np.round(pixels[:, 1]).astype(np.int64) * cam.width + np.round(pixels[:, 0]).astype(np.int64)
    return RayBatch(origins, directions, near, far, hit, torch.as_tensor(ids))


# --------------------------------------------------------------------------- opacity

def alpha_from_sdf(sdf, sharpness):
    """Interval opacities from ``K + 1`` SDF values along a ray.

    ``alpha_j = max((Phi(SDF_j) - Phi(SDF_j+1)) / Phi(SDF_j), 0)`` with the
    logistic CDF ``Phi(x) = 1 / (1 + exp(-s x))``, evaluated in log space.
    """
    sdf = torch.as_tensor(sdf)
    sharpness = torch.as_tensor(sharpness, dtype=sdf.dtype)
    log_phi = torch.nn.functional.logsigmoid(sharpness * sdf)
    return (-torch.expm1(log_phi[..., 1:] - log_phi[..., :-1])).clamp_min(0.0)


def composite(alphas, values):
    """Front-to-back compositing.

    Returns ``(accumulated (..., C), opacity (...), transmittance (..., K))``
    with ``T_1 = 1`` and ``T_k = prod_{j<k} (1 - alpha_j)``.
    """
    alphas = torch.as_tensor(alphas)
    values = torch.as_tensor(values, dtype=alphas.dtype)
    ones = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    weights = trans * alphas
    return (weights[..., None] * values).sum(-2), weights.sum(-1), trans


def sample_pdf(bins, weights, n_samples):
    """Deterministic inverse-CDF samples from piecewise-constant ``weights`` over ``bins``."""
    weights = weights + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    u = torch.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples, dtype=bins.dtype)
    u = u.expand(*cdf.shape[:-1], n_samples).contiguous()
    idx = torch.searchsorted(cdf.contiguous(), u, right=True)
    below = (idx - 1).clamp(0, cdf.shape[-1] - 1)
    above = idx.clamp(0, cdf.shape[-1] - 1)
    cdf_b, cdf_a = cdf.gather(-1, below), cdf.gather(-1, above)
    bin_b, bin_a = bins.gather(-1, below), bins.gather(-1, above)
    denom = torch.where(cdf_a - cdf_b < 1e-5, torch.ones_like(cdf_a), cdf_a - cdf_b)
    return bin_b + (u - cdf_b) / denom * (bin_a - bin_b)


def sample_points(rays, n_coarse, n_importance, sdf_fn=None, sharpness=None, generator=None,
                  sampling_sharpness=64.0):
    """Depths along each ray: stratified coarse samples plus importance samples.

    Coarse samples are jittered when ``generator`` is given, else bin midpoints.
    Importance samples follow the compositing weights of the coarse SDF, with
    the logistic sharpness floored at ``sampling_sharpness``.  Output is
    ``(N, n_coarse + n_importance)`` and strictly increasing.
    """
    if n_coarse < 2:
        raise ValidationError("need at least two coarse samples")
    N = len(rays)
    dt = rays.origins.dtype
    edges = torch.linspace(0.0, 1.0, n_coarse + 1, dtype=dt)
    if generator is not None:
        jitter = torch.rand(N, n_coarse, generator=generator, dtype=dt)
    else:
        jitter = torch.full((N, n_coarse), 0.5, dtype=dt)
    frac = edges[:-1] + jitter * (edges[1:] - edges[:-1])
    span = (rays.far - rays.near)[:, None]
    t = rays.near[:, None] + frac * span
    if n_importance > 0:
        with torch.no_grad():
            pts = clamp_to_bounds(rays.origins[:, None] + rays.directions[:, None] * t[..., None])
            sdf = sdf_fn(pts)
            s = max(float(sharpness), sampling_sharpness)
            alpha = alpha_from_sdf(sdf, s)
            _, _, trans = composite(alpha, torch.zeros(*alpha.shape, 1, dtype=dt))
            w = trans * alpha
            fine = sample_pdf(t, w, n_importance)
        t, _ = torch.sort(torch.cat([t, fine], -1), -1)
    # break exact ties so depths are strictly increasing
    eps = 1e-6 * span.clamp_min(1e-6)
    t = t + torch.arange(t.shape[-1], dtype=dt) * 1e-9
    gaps = (t[:, 1:] - t[:, :-1]).clamp_min(eps)
    t = torch.cat([t[:, :1], t[:, :1] + torch.cumsum(gaps, -1)], -1)
    return t


# --------------------------------------------------------------------------- render

@dataclass
class RenderOptions:
    n_coarse: int = 64
    n_importance: int = 32
    sampling_sharpness: float = 64.0
    keep_profile: bool = False


@dataclass
class GeometrySamples:
    """Geometry along a ray batch: ``K + 1`` SDF samples, ``K`` shading samples."""
    t: torch.Tensor             # (N, K+1)
    points: torch.Tensor        # (N, K, 3) shading points (left interval ends)
    sdf: torch.Tensor           # (N, K+1)
    feature: torch.Tensor       # (N, K, F)
    normal: torch.Tensor        # (N, K, 3)
    alpha: torch.Tensor         # (N, K)
    weight: torch.Tensor        # (N, K)
    transmittance: torch.Tensor  # (N, K)
    opacity: torch.Tensor       # (N,)
    degenerate: torch.Tensor    # (N,) bool

    def depth(self):
        mid = 0.5 * (self.t[:, 1:] + self.t[:, :-1])
        return (self.weight * mid).sum(-1)


def trace_geometry(model, rays, options=RenderOptions(), generator=None, create_graph=False,
                   need_normals=True):
    """Evaluate the SDF field along rays and convert it to compositing weights."""
    sdf_fn = lambda x: model.geometry(x)[0]  # noqa: E731
    t = sample_points(rays, options.n_coarse, options.n_importance, sdf_fn, model.sharpness,
                      generator, options.sampling_sharpness)
    pts = clamp_to_bounds(rays.origins[:, None] + rays.directions[:, None] * t[..., None])
    if need_normals:
        with torch.enable_grad():
            x = pts if create_graph else pts.detach()
            x = x.requires_grad_(True)
            sdf, feature = model.geometry(x)
            (grad,) = torch.autograd.grad(sdf.sum(), x, create_graph=create_graph,
                                          retain_graph=True)
        if not torch.is_grad_enabled():
            sdf, feature = sdf.detach(), feature.detach()
    else:
        sdf, feature = model.geometry(pts)
        grad = torch.zeros_like(pts)
    grad = grad[:, :-1]
    gnorm = torch.linalg.norm(grad, dim=-1, keepdim=True)
    normal = grad / gnorm.clamp_min(1e-8)
    alpha = alpha_from_sdf(sdf, model.sharpness)
    alpha = alpha * rays.hit[:, None].to(alpha.dtype)
    ones = torch.ones_like(alpha[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha[..., :-1]], -1), -1)
    weight = trans * alpha
    degenerate = ((gnorm[..., 0] < 1e-8) & (weight > 1e-3)).any(-1)
    return GeometrySamples(t, pts[:, :-1], sdf, feature[:, :-1], normal, alpha, weight, trans,
                           weight.sum(-1), degenerate)


@dataclass
class RenderOutput:
    rgb: torch.Tensor
    opacity: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    shadow: torch.Tensor
    sky: torch.Tensor
    surface: torch.Tensor
    degenerate: torch.Tensor
    transmittance_profile: torch.Tensor = None
    extras: dict = field(default_factory=dict)


def _group_index(group, n):
    if group is None:
        return torch.zeros(n, dtype=torch.long)
    return torch.as_tensor(group, dtype=torch.long)


def irradiance_transfer(normal, res=SHADING_RES):
    """``max(w . n, 0) dw`` per normal and texel, ``(..., H*W)``; irradiance is this times
    the flattened radiance map."""
    grid = solid_angles(*res, dtype=normal.dtype)
    dirs = grid.directions.reshape(-1, 3)
    return (normal @ dirs.T).clamp_min(0.0) * grid.dw.reshape(-1)


def shade_samples(model, decoder, points, feature, normal, weight, opacity, directions, codes,
                  group=None, albedo=None, transfer=None):
    """Factored shading and compositing of precomputed geometry samples.

    ``pixel = sum_k w_k Gamma(a_k s_k sum L (w.n) dw) + (1 - opacity) sky(v)``.
    ``transfer`` (N, K, H*W) from :func:`irradiance_transfer` skips the cosine
    products when the normals are fixed across calls (single code group only).
    Returns ``(rgb, surface, sky, shadow (N, K))``.
    """
    N, K = weight.shape
    dt = weight.dtype
    group = _group_index(group, N)
    if albedo is None:
        albedo = model.appearance(points, feature)
    if model.use_shadow:
        l_s = codes.shadow.to(dt)[group][:, None, :].expand(N, K, -1)
        shadow = model.shadow(points, l_s)
    else:
        shadow = torch.ones(N, K, dtype=dt)
    env = decode_radiance(decoder, codes.environment.to(dt))  # (G, 16, 32, 3)
    grid = solid_angles(*env.shape[1:3], dtype=dt)
    irr = torch.empty(N, K, 3, dtype=dt)
    if transfer is not None:
        if len(codes) != 1:
            raise ValidationError("a precomputed transfer needs a single code group")
        irr = transfer @ env[0].reshape(-1, 3)
    elif len(codes) == 1:
        irr = irradiance(normal.reshape(-1, 3), env[0], grid).reshape(N, K, 3)
    else:
        for g in torch.unique(group).tolist():
            m = group == g
            irr[m] = irradiance(normal[m].reshape(-1, 3), env[g], grid).reshape(-1, K, 3)
    relit = albedo * shadow[..., None] * irr
    if model.use_tone:
        tm = tone_decode(model.tone_mapper, codes.tone.to(dt)[group])
        A, b = tm.A[:, None], tm.b[:, None]
        toned = ((A @ relit[..., None])[..., 0] + b).clamp_min(0.0)
    else:
        toned = relit
    surface = (weight[..., None] * toned).sum(-2)
    sky = model.sky(directions, codes.environment.to(dt)[group])
    rgb = surface + (1.0 - opacity)[:, None] * sky
    return rgb, surface, sky, shadow


def render_rays(model, rays, codes, decoder, options=RenderOptions(), group=None,
                generator=None, create_graph=False):
    """Full factored rendering of a ray batch."""
    geo = trace_geometry(model, rays, options, generator, create_graph)
    rgb, surface, sky, shadow = shade_samples(model, decoder, geo.points, geo.feature,
                                              geo.normal, geo.weight, geo.opacity,
                                              rays.directions, codes, group)
    w = geo.weight
    out = RenderOutput(rgb=rgb, opacity=geo.opacity, depth=geo.depth(),
                       normal=(w[..., None] * geo.normal).sum(-2), shadow=(w * shadow).sum(-1),
                       sky=sky, surface=surface, degenerate=geo.degenerate)
    if options.keep_profile:
        out.transmittance_profile = geo.transmittance
    return out


def render_pixel_factored(model, ray, codes, decoder, options=RenderOptions()):
    """Render a single ray; ``ray`` is a one-element :class:`RayBatch`."""
    return render_rays(model, ray, codes, decoder, options)


def render_image(model, cam, codes, decoder, chunk=4096, options=RenderOptions(),
                 dtype=torch.float32):
    """Render all pixels of ``cam`` in chunks; returns a dict of ``(H, W, ...)`` arrays."""
    if chunk < 1:
        raise ValidationError("chunk must be >= 1")
    rays = generate_rays(cam, dtype=dtype)
    codes = codes.to(dtype)
    parts = []
    with torch.no_grad():
        for s in range(0, len(rays), chunk):
            sub = rays.subset(slice(s, s + chunk))
            parts.append(render_rays(model, sub, codes, decoder, options))
    H, W = cam.height, cam.width

    def cat(name, shape):
        return torch.cat([getattr(p, name) for p in parts]).reshape(H, W, *shape).numpy()

    return {
        "rgb": cat("rgb", (3,)),
        "opacity": cat("opacity", ()),
        "depth": cat("depth", ()),
        "normal": cat("normal", (3,)),
        "shadow": cat("shadow", ()),
        "sky": cat("sky", (3,)),
        "diagnostics": cat("degenerate", ()),
    }
