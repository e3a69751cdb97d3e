"""Illumination: equirectangular environment maps, the frozen HDR sky prior,
Lambertian texel-sum shading, affine tone mapping and the lighting regularizers.

Equirectangular convention: row 0 is the zenith (+z), rows advance in polar
angle theta, columns in azimuth phi = atan2(y, x) mod 2*pi.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError, TrainingError, ValidationError

log = logging.getLogger(__name__)

SHADING_RES = (16, 32)
DECODER_RES = (32, 64)


# --------------------------------------------------------------------------- grids

@dataclass(frozen=True)
class SolidAngleGrid:
    dw: torch.Tensor          # (H, W) steradians
    directions: torch.Tensor  # (H, W, 3) texel-center unit vectors

    @property
    def shape(self):
        return tuple(self.dw.shape)


@lru_cache(maxsize=32)
def _grid(H, W, dtype):
    i = torch.arange(H + 1, dtype=torch.float64)
    cos_edges = torch.cos(i * math.pi / H)
    row_dw = (2.0 * math.pi / W) * (cos_edges[:-1] - cos_edges[1:])
    dw = row_dw[:, None].expand(H, W).contiguous()
    theta = (torch.arange(H, dtype=torch.float64) + 0.5) * math.pi / H
    phi = (torch.arange(W, dtype=torch.float64) + 0.5) * 2.0 * math.pi / W
    th, ph = torch.meshgrid(theta, phi, indexing="ij")
    dirs = torch.stack([torch.sin(th) * torch.cos(ph), torch.sin(th) * torch.sin(ph),
                        torch.cos(th)], dim=-1)
    return SolidAngleGrid(dw.to(dtype), dirs.to(dtype))


def solid_angles(H, W, dtype=torch.float64):
    """Per-texel solid angles of an ``H x W`` equirectangular map (sum = 4 pi)."""
    if H < 1 or W < 1:
        raise ValidationError("grid dimensions must be positive")
    return _grid(int(H), int(W), dtype)


def direction_to_texel(dirs, H, W):
    """Row/column indices of the texels containing unit directions ``dirs`` (..., 3)."""
    dirs = torch.as_tensor(dirs)
    theta = torch.arccos(dirs[..., 2].clamp(-1.0, 1.0))
    phi = torch.remainder(torch.atan2(dirs[..., 1], dirs[..., 0]), 2.0 * math.pi)
    row = torch.clamp((theta / math.pi * H).long(), 0, H - 1)
    col = torch.clamp((phi / (2.0 * math.pi) * W).long(), 0, W - 1)
    return row, col


# --------------------------------------------------------------------------- env maps

@dataclass
class EnvMap:
    """Linear HDR equirectangular radiance, ``(H, W, 3)`` with ``W = 2H``."""
    radiance: torch.Tensor

    def __post_init__(self):
        r = torch.as_tensor(self.radiance)
        if r.ndim != 3 or r.shape[-1] != 3 or r.shape[1] != 2 * r.shape[0]:
            raise ValidationError(f"env map must be (H, 2H, 3), got {tuple(r.shape)}")
        if not torch.all(torch.isfinite(r)) or torch.any(r < 0):
            raise ValidationError("env map radiance must be finite and non-negative")
        self.radiance = r

    @property
    def shape(self):
        return tuple(self.radiance.shape[:2])

    def energy(self):
        """Total ``sum L * dw`` per channel."""
        grid = solid_angles(*self.shape, dtype=self.radiance.dtype)
        return (self.radiance * grid.dw[..., None]).sum(dim=(0, 1))

    def lookup(self, dirs):
        row, col = direction_to_texel(dirs, *self.shape)
        return self.radiance[row, col]


def area_downscale(radiance, factor):
    """Solid-angle-weighted block average of ``(..., H, W, 3)`` radiance.

    Preserves ``sum L * dw`` exactly because coarse texel solid angles are the
    sums of their fine texels.
    """
    *lead, H, W, C = radiance.shape
    if factor == 1:
        return radiance
    if H % factor or W % factor:
        raise ConfigurationError(f"cannot downscale {H}x{W} by {factor}")
    dw = solid_angles(H, W, dtype=radiance.dtype).dw
    weighted = radiance * dw[..., None]
    h, w = H // factor, W // factor
    blocks = weighted.reshape(*lead, h, factor, w, factor, C).sum(dim=(-4, -2))
    dw_coarse = dw.reshape(h, factor, w, factor).sum(dim=(-3, -1))
    return blocks / dw_coarse[..., None]


# --------------------------------------------------------------------------- procedural skies

@dataclass
class ProceduralSkyParams:
    sun_direction: tuple = (0.0, 0.6, 0.8)
    sun_intensity: float = 30.0
    sun_angular_radius: float = 0.08
    zenith_color: tuple = (0.15, 0.25, 0.55)
    horizon_color: tuple = (0.45, 0.5, 0.55)
    ambient: float = 0.05
    ground_tint: tuple = (1.0, 0.9, 0.8)

    def __post_init__(self):
        d = np.asarray(self.sun_direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValidationError("sun direction must be non-zero")
        d = d / n
        if d[2] <= 0:
            raise ValidationError("sun must be above the horizon")
        self.sun_direction = tuple(float(v) for v in d)
        for name in ("sun_intensity", "sun_angular_radius", "ambient"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        for name in ("zenith_color", "horizon_color", "ground_tint"):
            if min(getattr(self, name)) < 0:
                raise ValidationError(f"{name} must be non-negative")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def sky_radiance(params, dirs):
    """Continuous radiance of a procedural sky along unit directions ``(..., 3)``."""
    dirs = torch.as_tensor(dirs)
    dt = dirs.dtype
    z = dirs[..., 2:3]
    zen = torch.tensor(params.zenith_color, dtype=dt)
    hor = torch.tensor(params.horizon_color, dtype=dt)
    t = z.clamp(0.0, 1.0)
    upper = hor + (zen - hor) * t + params.ambient
    sun = torch.tensor(params.sun_direction, dtype=dt)
    ang = torch.arccos((dirs @ sun).clamp(-1.0, 1.0))
    r_out = params.sun_angular_radius
    r_in = 0.8 * r_out
    disk = ((r_out - ang) / max(r_out - r_in, 1e-9)).clamp(0.0, 1.0)
    upper = upper + params.sun_intensity * disk[..., None]
    lower = params.ambient * torch.tensor(params.ground_tint, dtype=dt).expand_as(upper)
    return torch.where(z >= 0, upper, lower)


def procedural_sky(params, H=DECODER_RES[0], W=DECODER_RES[1], supersample=4,
                   dtype=torch.float64):
    """Rasterize a procedural sky into an ``H x W`` env map.

    Each texel is the solid-angle average over a ``supersample^2`` sub-grid, so
    the small sun disk carries the right energy at any resolution.
    """
    grid = solid_angles(H * supersample, W * supersample, dtype=dtype)
    fine = sky_radiance(params, grid.directions)
    return EnvMap(area_downscale(fine, supersample))


def random_sky_params(rng):
    """Draw a plausible outdoor sky (clear day through dusk)."""
    elev = rng.uniform(math.radians(20), math.radians(75))
    az = rng.uniform(0, 2 * math.pi)
    sun = (math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev))
    dusk = rng.uniform(0, 1)
    day_zen, dusk_zen = np.array([0.12, 0.22, 0.55]), np.array([0.25, 0.18, 0.35])
    day_hor, dusk_hor = np.array([0.45, 0.5, 0.55]), np.array([0.7, 0.4, 0.2])
    scale = rng.uniform(0.6, 1.4)
    zen = scale * ((1 - dusk) * day_zen + dusk * dusk_zen) * rng.uniform(0.85, 1.15, 3)
    hor = scale * ((1 - dusk) * day_hor + dusk * dusk_hor) * rng.uniform(0.85, 1.15, 3)
    return ProceduralSkyParams(
        sun_direction=sun,
        sun_intensity=float(rng.uniform(10, 60)),
        sun_angular_radius=float(rng.uniform(0.06, 0.12)),
        zenith_color=tuple(zen.tolist()),
        horizon_color=tuple(hor.tolist()),
        ambient=float(rng.uniform(0.03, 0.15)),
        ground_tint=tuple((np.array([1.0, 0.9, 0.8]) * rng.uniform(0.8, 1.6)).tolist()),
    )


# --------------------------------------------------------------------------- HDR prior

class SkyDecoder(nn.Module):
    """Latent code -> native-resolution HDR map with exponential output."""

    def __init__(self, latent_dim=16, resolution=DECODER_RES, hidden=(128, 512)):
        super().__init__()
        self.latent_dim = latent_dim
        self.resolution = tuple(resolution)
        self.hidden = tuple(hidden)
        H, W = self.resolution
        layers, d = [], latent_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, H * W * 3))
        self.net = nn.Sequential(*layers)
        self.frozen = False

    def log_radiance(self, z):
        H, W = self.resolution
        return self.net(z).reshape(*z.shape[:-1], H, W, 3)

    def forward(self, z):
        return torch.exp(self.log_radiance(z))

    def config(self):
        return {"latent_dim": self.latent_dim, "resolution": list(self.resolution),
                "hidden": list(self.hidden)}

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self


class SkyEncoder(nn.Module):
    """Log-radiance map (at shading resolution) -> latent code."""

    def __init__(self, latent_dim=16, resolution=SHADING_RES, hidden=(512, 128)):
        super().__init__()
        H, W = resolution
        layers, d = [], H * W * 3
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, latent_dim))
        self.net = nn.Sequential(*layers)
        self.resolution = tuple(resolution)

    def forward(self, log_radiance):
        return self.net(log_radiance.flatten(-3))


@dataclass
class SkyPriorReport:
    train_loss: list = field(default_factory=list)
    heldout_log_mae: float = float("nan")
    heldout_relative_error: float = float("nan")
    interpolation_sun_columns: list = field(default_factory=list)


def _sky_dataset(n, rng, dtype=torch.float32):
    maps = [procedural_sky(random_sky_params(rng)).radiance for _ in range(n)]
    return torch.stack(maps).to(dtype)


def pretrain_sky_decoder(n_samples=2000, seed=0, latent_dim=16, steps=3000, batch_size=64,
                         lr=1e-3, heldout=200, max_log_mae=0.15, return_encoder=False):
    """Train an encoder/decoder pair on procedural skies and return the frozen decoder.

    Raises :class:`TrainingError` when the held-out per-texel log-radiance MAE
    ends above ``max_log_mae``.
    """
    if n_samples < 1000:
        raise ValidationError("the sky prior needs at least 1000 training skies")
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        maps = _sky_dataset(n_samples + heldout, rng)
        log_native = torch.log(maps)
        log_small = torch.log(area_downscale(maps, DECODER_RES[0] // SHADING_RES[0]))
        train_idx = torch.arange(n_samples)
        test_idx = torch.arange(n_samples, n_samples + heldout)

        encoder = SkyEncoder(latent_dim)
        decoder = SkyDecoder(latent_dim)
        params = list(encoder.parameters()) + list(decoder.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=lr * 0.05)
        report = SkyPriorReport()
        for step in range(steps):
            idx = train_idx[torch.randint(n_samples, (batch_size,))]
            z = encoder(log_small[idx])
            # latent noise keeps the decoder smooth for later code optimization
            pred = decoder.log_radiance(z + 0.05 * torch.randn_like(z))
            loss = (pred - log_native[idx]).abs().mean() + 1e-4 * (z * z).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if not torch.isfinite(loss):
                raise TrainingError("sky prior loss is not finite", asdict(report))
            if step % 100 == 0:
                report.train_loss.append(loss.item())

        with torch.no_grad():
            z = encoder(log_small[test_idx])
            pred = decoder.log_radiance(z)
            err = (pred - log_native[test_idx]).abs()
            report.heldout_log_mae = float(err.mean())
            rel = (torch.exp(pred) - maps[test_idx]).abs() / maps[test_idx]
            report.heldout_relative_error = float(rel.median())
            # sanity artifact: dominant texel column along a latent interpolation
            za, zb = z[0], z[1]
            for t in np.linspace(0, 1, 11):
                m = decoder(za + float(t) * (zb - za))
                report.interpolation_sun_columns.append(
                    int(torch.argmax(m.sum(-1)).item() % DECODER_RES[1]))
    log.info("sky prior: held-out log MAE %.4f", report.heldout_log_mae)
    if report.heldout_log_mae > max_log_mae:
        raise TrainingError(
            f"sky prior did not converge: held-out log MAE {report.heldout_log_mae:.3f} "
            f"> {max_log_mae}", asdict(report))
    decoder.freeze()
    decoder.report = report
    if return_encoder:
        encoder.requires_grad_(False)
        return decoder, encoder
    return decoder


def decode_radiance(decoder, codes):
    """Decode ``(G, latent)`` codes to ``(G, 16, 32, 3)`` shading-resolution radiance."""
    if codes.shape[-1] != decoder.latent_dim:
        raise ConfigurationError(
            f"environment code has width {codes.shape[-1]}, decoder expects {decoder.latent_dim}")
    native = decoder(codes.to(next(decoder.parameters()).dtype))
    factor = decoder.resolution[0] // SHADING_RES[0]
    return area_downscale(native, factor).to(codes.dtype)


def decode_envmap(decoder, l_e):
    """Frozen decoder output for one code, downscaled to the 16 x 32 shading map."""
    l_e = torch.as_tensor(l_e)
    return EnvMap(decode_radiance(decoder, l_e[None] if l_e.ndim == 1 else l_e)[0])


# --------------------------------------------------------------------------- shading

def irradiance(normal, radiance, grid=None):
    """``sum_texels L(w) * max(w . n, 0) * dw`` for normals ``(N, 3)`` -> ``(N, 3)``."""
    H, W = radiance.shape[-3:-1]
    if grid is None:
        grid = solid_angles(H, W, dtype=radiance.dtype)
    if grid.shape != (H, W):
        raise ConfigurationError(f"env map {H}x{W} does not match solid-angle grid {grid.shape}")
    dirs = grid.directions.reshape(-1, 3).to(normal.dtype)
    dw = grid.dw.reshape(-1).to(normal.dtype)
    cos = (normal @ dirs.T).clamp_min(0.0)
    return (cos * dw) @ radiance.reshape(-1, 3).to(normal.dtype)


def shade_lambertian(albedo, shadow, normal, env, grid=None):
    """Relit surface color ``a * s * sum L(w) (w . n)+ dw``.

    No 1/pi factor: the learned albedo absorbs it.
    """
    radiance = env.radiance if isinstance(env, EnvMap) else torch.as_tensor(env)
    normal = torch.as_tensor(normal)
    squeeze = normal.ndim == 1
    if squeeze:
        normal = normal[None]
    albedo = torch.as_tensor(albedo, dtype=normal.dtype)
    shadow = torch.as_tensor(shadow, dtype=normal.dtype)
    if shadow.ndim < albedo.ndim:
        shadow = shadow[..., None]
    out = albedo * shadow * irradiance(normal, radiance, grid)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------- tone mapping

@dataclass
class ToneMap:
    """Affine color transform ``c -> A c + b``; leading batch dims allowed."""
    A: torch.Tensor
    b: torch.Tensor

    @classmethod
    def identity(cls, dtype=torch.float64):
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    def to_dict(self):
        return {"A": self.A.detach().cpu().tolist(), "b": self.b.detach().cpu().tolist()}

    @classmethod
    def from_dict(cls, d, dtype=torch.float64):
        return cls(torch.tensor(d["A"], dtype=dtype), torch.tensor(d["b"], dtype=dtype))

    @property
    def matrix(self):
        """The 3 x 4 matrix ``[A; b]``."""
        return torch.cat([self.A, self.b[..., None]], dim=-1)


class ToneMapper(nn.Module):
    """Two-layer network from a tone code to a 3 x 4 affine map, starting at identity."""

    def __init__(self, code_dim=8, hidden=32):
        super().__init__()
        self.code_dim = code_dim
        self.net = nn.Sequential(nn.Linear(code_dim, hidden), nn.ReLU(), nn.Linear(hidden, 12))
        nn.init.zeros_(self.net[-1].weight)
        with torch.no_grad():
            self.net[-1].bias.copy_(torch.tensor([1., 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]))

    def forward(self, code):
        out = self.net(code)
        return ToneMap(out[..., :9].reshape(*out.shape[:-1], 3, 3), out[..., 9:])


def tone_decode(mapper, l_t):
    l_t = torch.as_tensor(l_t)
    if l_t.shape[-1] != mapper.code_dim:
        raise ConfigurationError(
            f"tone code has width {l_t.shape[-1]}, mapper expects {mapper.code_dim}")
    return mapper(l_t.to(next(mapper.parameters()).dtype))


def tone_apply(t, c):
    """``max(A c + b, 0)`` applied over the last axis of ``c``."""
    c = torch.as_tensor(c)
    A = t.A.to(c.dtype)
    b = t.b.to(c.dtype)
    return ((A @ c[..., None])[..., 0] + b).clamp_min(0.0)


def tone_regularizer(t):
    """Sum of squared entries of ``A - I`` plus ``|b|^2``."""
    eye = torch.eye(3, dtype=t.A.dtype)
    R = t.A - eye
    return (R * R).sum(dim=(-2, -1)) + (t.b * t.b).sum(-1)


def shadow_regularizer(shadow_samples, weights=None):
    """``sum_k (s_k - 1)^2``; zero for an empty input.

    Optional ``weights`` scale each term (compositing weights during training).
    """
    s = torch.as_tensor(shadow_samples, dtype=torch.float64) if not isinstance(
        shadow_samples, torch.Tensor) else shadow_samples
    if s.numel() == 0:
        return torch.zeros((), dtype=s.dtype)
    sq = (s - 1.0) ** 2
    return (sq if weights is None else weights * sq).sum()
