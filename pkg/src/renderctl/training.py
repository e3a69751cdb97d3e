"""Two-stage training: geometry with transient modeling, distillation of
occlusion-free images, and factorized re-rendering with frozen geometry.
"""
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import (ConfigurationError, GeometryMutationError, TrainingError,
                         ValidationError)
from .field import (BOUND_RADIUS, SHARPNESS_SCALE, CodeDims, EncodingSpec, GeometryField,
                    SceneModel, _mlp, positional_encode, sdf_gradient)
from .lighting import shadow_regularizer, tone_decode, tone_regularizer
from .renderer import (RayBatch, RenderOptions, generate_rays, shade_samples, trace_geometry)

log = logging.getLogger(__name__)

MIN_VIEWS = 10


@dataclass
class TrainConfig:
    """Every training hyperparameter; loss weights default to the paper's values."""
    seed: int = 0
    # stage 1
    lambda_c: float = 1.0
    lambda_m: float = 0.1
    lambda_re: float = 0.1
    lambda_u: float = 0.01
    beta_min: float = 0.03
    stage1_steps: int = 20000
    stage1_rays: int = 1024
    stage1_lr: float = 5e-4
    stage1_coarse: int = 64
    stage1_importance: int = 32
    eikonal_points: int = 512
    transient_warmup: int = 0
    sharpness_lr_scale: float = 1.0
    gate_background: bool = True
    embed_dim: int = 16
    geometry_hidden: int = 128
    geometry_depth: int = 4
    # stage 2
    lambda_cr: float = 2.0
    lambda_rs: float = 0.01
    lambda_rt: float = 0.1
    stage2_steps: int = 5000
    stage2_rays: int = 1024
    stage2_lr: float = 5e-4
    code_lr: float = 5e-3
    cache_samples: int = 16
    use_tone: bool = True
    use_shadow: bool = True
    # shared
    lr_final_fraction: float = 0.05
    log_every: int = 50

    def __post_init__(self):
        for name in ("lambda_c", "lambda_m", "lambda_re", "lambda_u", "lambda_cr",
                     "lambda_rs", "lambda_rt"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.beta_min <= 0:
            raise ConfigurationError("beta_min must be positive")
        for name in ("stage1_rays", "stage2_rays", "stage1_coarse", "cache_samples"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def _cosine(opt, steps, final_fraction):
    return torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: final_fraction + (1 - final_fraction) * 0.5 * (1 + math.cos(
            math.pi * min(i, steps) / max(steps, 1))))


# --------------------------------------------------------------------------- losses

def sky_mask_loss(opacity, mask, eps=1e-6):
    """Binary cross-entropy between opacity and the mask (1 = non-sky)."""
    opacity = torch.as_tensor(opacity)
    mask = torch.as_tensor(mask, dtype=opacity.dtype)
    return F.binary_cross_entropy(opacity.clamp(eps, 1 - eps), mask)


def uniform_ball(n, radius=BOUND_RADIUS, generator=None, dtype=torch.float32):
    d = torch.randn(n, 3, generator=generator, dtype=dtype)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True).clamp_min(1e-12)
    r = radius * torch.rand(n, 1, generator=generator, dtype=dtype) ** (1.0 / 3.0)
    return d * r


def eikonal_loss(model, n_points=1024, seed=0, points=None, create_graph=False):
    """``mean (|grad SDF| - 1)^2`` over uniform points in the bounding sphere."""
    if points is None:
        if n_points < 1:
            raise ValidationError("n_points must be >= 1")
        points = uniform_ball(n_points, generator=torch.Generator().manual_seed(seed))
    sdf_fn = model.geometry if hasattr(model, "geometry") else model
    fn = (lambda x: sdf_fn(x)[0]) if isinstance(sdf_fn, GeometryField) else sdf_fn
    _, grad = sdf_gradient(fn, points, create_graph=create_graph)
    return ((torch.linalg.norm(grad, dim=-1) - 1.0) ** 2).mean()


def stage1_photometric_loss(pred_static, pred_transient, beta, target, transient_density=None,
                            lambda_u=0.01):
    """Uncertainty-weighted photometric loss with transient modeling.

    ``|C - (static + transient)|^2 / (2 beta^2) + log(beta) / 2 + lambda_u mean(sigma_t)``,
    averaged over rays.
    """
    pred = pred_static + pred_transient
    beta = torch.as_tensor(beta, dtype=pred.dtype)
    if beta.ndim == pred.ndim:
        beta = beta[..., 0]
    resid = ((target - pred) ** 2).sum(-1)
    loss = (resid / (2 * beta ** 2) + 0.5 * torch.log(beta)).mean()
    if transient_density is not None:
        loss = loss + lambda_u * transient_density.mean()
    return loss


# --------------------------------------------------------------------------- stage 1

class Stage1Model(nn.Module):
    """Shared SDF geometry plus static radiance, background and transient branches."""

    def __init__(self, frame_ids, encoding=EncodingSpec(), feature_dim=16, embed_dim=16,
                 geometry_hidden=128, geometry_depth=4, beta_min=0.03, seed=0):
        super().__init__()
        self.frame_ids = [str(f) for f in frame_ids]
        self.index = {f: i for i, f in enumerate(self.frame_ids)}
        self.encoding = encoding
        self.beta_min = beta_min
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.geometry = GeometryField(encoding, geometry_hidden, geometry_depth, feature_dim)
            pd, dd = encoding.position_dim, encoding.direction_dim
            self.radiance = _mlp(pd + feature_dim + dd + embed_dim, 3, 128, 3, nn.ReLU)
            self.background = _mlp(dd + embed_dim, 3, 64, 3, nn.ReLU)
            self.transient = _mlp(pd + embed_dim, 5, 64, 3, nn.ReLU)
            # transients start nearly empty
            nn.init.constant_(self.transient[-1].bias, 0.0)
            with torch.no_grad():
                self.transient[-1].bias[0] = -4.0
            self.appearance_embedding = nn.Embedding(len(self.frame_ids), embed_dim)
            self.transient_embedding = nn.Embedding(len(self.frame_ids), embed_dim)
            nn.init.normal_(self.appearance_embedding.weight, std=0.01)
            nn.init.normal_(self.transient_embedding.weight, std=0.01)
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(1.0 / 0.3) / SHARPNESS_SCALE))
        self.discarded = False

    @property
    def sharpness(self):
        return torch.exp(SHARPNESS_SCALE * self.log_sharpness)

    def rows(self, frame_ids):
        missing = [f for f in frame_ids if str(f) not in self.index]
        if missing:
            raise ValidationError(f"no stage-1 embedding for frames {missing[:5]}")
        return torch.tensor([self.index[str(f)] for f in frame_ids], dtype=torch.long)

    def forward(self, rays, frame_rows, options, generator=None, transient=True, bg_gate=None):
        """Render rays; returns a dict with static/transient parts, beta and opacity.

        ``bg_gate`` (N,) scales the background color per ray; training passes
        zero for pixels labelled non-sky so only the surface can explain them.
        """
        geo = trace_geometry(self, rays, options, generator, need_normals=False)
        N, K = geo.weight.shape
        enc_x = positional_encode(geo.points, self.encoding.num_freqs_position,
                                  self.encoding.include_input)
        enc_v = positional_encode(rays.directions, self.encoding.num_freqs_direction,
                                  self.encoding.include_input)
        emb_a = self.appearance_embedding(frame_rows)
        rgb = torch.sigmoid(self.radiance(torch.cat(
            [enc_x, geo.feature, enc_v[:, None].expand(N, K, -1),
             emb_a[:, None].expand(N, K, -1)], -1)))
        bg = F.softplus(self.background(torch.cat([enc_v, emb_a], -1)))
        if bg_gate is not None:
            bg = bg * bg_gate[:, None]
        out = {"opacity": geo.opacity, "geometry": geo}
        a_s = geo.alpha
        if not transient:
            out["static"] = (geo.weight[..., None] * rgb).sum(-2) + (1 - geo.opacity)[:, None] * bg
            return out
        emb_t = self.transient_embedding(frame_rows)
        raw = self.transient(torch.cat([enc_x, emb_t[:, None].expand(N, K, -1)], -1))
        sigma_t = F.softplus(raw[..., 0])
        c_t = torch.sigmoid(raw[..., 1:4])
        beta_t = F.softplus(raw[..., 4])
        delta = (geo.t[:, 1:] - geo.t[:, :-1])
        a_t = 1.0 - torch.exp(-sigma_t * delta)
        keep = (1 - a_s) * (1 - a_t)
        T = torch.cumprod(torch.cat([torch.ones_like(keep[:, :1]), keep], -1), -1)
        w_s = T[:, :-1] * a_s
        w_t = T[:, :-1] * (1 - a_s) * a_t
        out["static"] = (w_s[..., None] * rgb).sum(-2) + T[:, -1:] * bg
        out["transient"] = (w_t[..., None] * c_t).sum(-2)
        out["beta"] = (w_t * beta_t).sum(-1) + self.beta_min
        out["transient_density"] = sigma_t
        out["transient_opacity"] = w_t.sum(-1)
        return out

    def config(self):
        return {"frame_ids": self.frame_ids, "encoding": self.encoding.to_dict(),
                "feature_dim": self.geometry.feature_dim,
                "embed_dim": self.appearance_embedding.embedding_dim,
                "geometry_hidden": self.geometry.net[0].out_features,
                "geometry_depth": sum(isinstance(m, nn.Linear) for m in self.geometry.net) - 1,
                "beta_min": self.beta_min, "discarded": self.discarded}

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        discarded = cfg.pop("discarded", False)
        cfg["encoding"] = EncodingSpec(**cfg["encoding"])
        model = cls(**cfg)
        model.discarded = discarded
        return model


@dataclass
class RayTable:
    """Flattened training rays of a dataset."""
    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    hit: torch.Tensor
    frame: torch.Tensor      # dataset frame index per ray
    rgb: torch.Tensor
    mask: torch.Tensor       # 1 = non-sky
    occluder: torch.Tensor

    def __len__(self):
        return len(self.frame)

    def batch(self, idx):
        ids = torch.arange(len(self.frame))[idx]
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx],
                        self.hit[idx], ids)


def build_ray_table(dataset, images=None):
    images = dataset.images if images is None else images
    parts = []
    for i, cam in enumerate(dataset.cameras):
        r = generate_rays(cam)
        parts.append((r, torch.full((len(r),), i, dtype=torch.long)))
    cat = lambda name: torch.cat([getattr(r, name) for r, _ in parts])  # noqa: E731
    occ = dataset.occluder_masks if dataset.occluder_masks is not None else \
        np.zeros(dataset.images.shape[:3], dtype=bool)
    return RayTable(cat("origins"), cat("directions"), cat("near"), cat("far"), cat("hit"),
                    torch.cat([f for _, f in parts]),
                    torch.from_numpy(np.asarray(images, dtype=np.float32).reshape(-1, 3)),
                    torch.from_numpy(dataset.sky_masks.reshape(-1).astype(np.float32)),
                    torch.from_numpy(occ.reshape(-1)))


def _dump_state(model, step, parts):
    return {"step": step, "losses": {k: v.item() for k, v in parts.items()},
            "parameter_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()}}


def stage1_losses(model, table, idx, config, options, generator, transient=True):
    """All stage-1 loss components on one ray batch; returns ``(total, parts)``."""
    rays = table.batch(idx)
    frame = table.frame[idx]
    gate = None
    if config.gate_background:
        # background may only explain sky pixels (or occluded ones, whose label is moot)
        gate = torch.where(table.occluder[idx], 1.0, 1.0 - table.mask[idx])
    out = model(rays, frame, options, generator, transient=transient, bg_gate=gate)
    if not transient:
        out["transient"] = torch.zeros_like(out["static"])
        out["beta"] = torch.full_like(out["opacity"], model.beta_min)
        out["transient_density"] = None
        out["transient_opacity"] = torch.zeros_like(out["opacity"])
    target = table.rgb[idx]
    l_c = stage1_photometric_loss(out["static"], out["transient"], out["beta"], target,
                                  out["transient_density"], config.lambda_u)
    # occluder-labelled pixels say nothing about whether the static scene is sky
    keep = ~table.occluder[idx]
    l_m = sky_mask_loss(out["opacity"][keep], table.mask[idx][keep])
    n_eik = config.eikonal_points
    pts = out["geometry"].points.detach().reshape(-1, 3)
    pick = torch.randint(len(pts), (n_eik,), generator=generator)
    eik_pts = torch.cat([uniform_ball(n_eik, generator=generator), pts[pick]])
    l_re = eikonal_loss(model, points=eik_pts, create_graph=True)
    total = config.lambda_c * l_c + config.lambda_m * l_m + config.lambda_re * l_re
    parts = {"photometric": l_c, "sky_mask": l_m, "eikonal": l_re, "total": total,
             "beta": out["beta"].mean().detach(),
             "transient_opacity": out["transient_opacity"].mean().detach()}
    return total, parts


def train_geometry(dataset, config=TrainConfig(), logger=None, model=None):
    """Stage 1: ``lambda_c L_c + lambda_m L_m + lambda_re L_re``."""
    if len(dataset) < MIN_VIEWS:
        raise ValidationError(f"geometry training needs at least {MIN_VIEWS} views, "
                              f"got {len(dataset)}")
    gen = torch.Generator().manual_seed(config.seed)
    if model is None:
        model = Stage1Model(dataset.frame_ids, embed_dim=config.embed_dim,
                            geometry_hidden=config.geometry_hidden,
                            geometry_depth=config.geometry_depth, beta_min=config.beta_min,
                            seed=config.seed)
    table = build_ray_table(dataset)
    rows = model.rows(dataset.frame_ids)
    table.frame = rows[table.frame]
    options = RenderOptions(config.stage1_coarse, config.stage1_importance)
    rest = [p for n, p in model.named_parameters() if n != "log_sharpness"]
    opt = torch.optim.Adam([
        {"params": rest, "lr": config.stage1_lr},
        {"params": [model.log_sharpness], "lr": config.stage1_lr * config.sharpness_lr_scale}])
    sched = _cosine(opt, config.stage1_steps, config.lr_final_fraction)
    model.train()
    for step in range(config.stage1_steps):
        idx = torch.randint(len(table), (config.stage1_rays,), generator=gen)
        total, parts = stage1_losses(model, table, idx, config, options, gen,
                                     transient=step >= config.transient_warmup)
        if not torch.isfinite(total):
            raise TrainingError(f"stage-1 loss diverged at step {step}",
                                _dump_state(model, step, parts))
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        if logger is not None and (step % config.log_every == 0 or step == config.stage1_steps - 1):
            logger({"stage": 1, "step": step, "sharpness": float(model.sharpness.detach()),
                    **{k: v.item() for k, v in parts.items()}})
    model.eval()
    return model


def render_static(stage1, cam, frame_id, options=RenderOptions(), chunk=4096):
    """Static-branch image ``(H, W, 3)`` and opacity ``(H, W)`` for one frame."""
    rays = generate_rays(cam)
    row = stage1.rows([frame_id])
    rgbs, ops = [], []
    with torch.no_grad():
        for s in range(0, len(rays), chunk):
            sub = rays.subset(slice(s, s + chunk))
            out = stage1(sub, row.expand(len(sub)), options, transient=False)
            rgbs.append(out["static"])
            ops.append(out["opacity"])
    H, W = cam.height, cam.width
    return torch.cat(rgbs).reshape(H, W, 3).numpy(), torch.cat(ops).reshape(H, W).numpy()


def distill_occlusion_free(stage1, dataset, options=RenderOptions(), out_dir=None):
    """Static-branch renders at every training pose, keyed like the dataset frames."""
    stage1.rows(dataset.frame_ids)  # raises for frames without an embedding
    images = np.stack([render_static(stage1, cam, fid, options)[0]
                       for cam, fid in zip(dataset.cameras, dataset.frame_ids)])
    if out_dir is not None:
        from .io import save_images
        save_images(out_dir, images, dataset.frame_ids)
    return images.astype(np.float32)


# --------------------------------------------------------------------------- stage 2

def geometry_checksum(model):
    h = hashlib.sha256()
    for name, p in sorted(model.geometry.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    h.update(model.log_sharpness.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class GeometryCache:
    """Frozen-geometry samples per ray: the ``M`` highest-weight shading samples."""
    points: torch.Tensor     # (R, M, 3)
    normal: torch.Tensor     # (R, M, 3)
    feature: torch.Tensor    # (R, M, F)
    weight: torch.Tensor     # (R, M), rescaled to sum to the full opacity
    opacity: torch.Tensor    # (R,)
    directions: torch.Tensor  # (R, 3)

    def __len__(self):
        return len(self.opacity)

    def take(self, idx):
        return GeometryCache(self.points[idx], self.normal[idx], self.feature[idx],
                             self.weight[idx], self.opacity[idx], self.directions[idx])


def cache_geometry(model, rays, n_keep=16, options=RenderOptions(), chunk=2048):
    """Trace frozen geometry once and keep the top-``n_keep`` samples of each ray."""
    parts = []
    with torch.no_grad():
        for s in range(0, len(rays), chunk):
            sub = rays.subset(slice(s, s + chunk))
            geo = trace_geometry(model, sub, options)
            k = min(n_keep, geo.weight.shape[1])
            w, idx = geo.weight.topk(k, dim=-1)
            idx, order = idx.sort(-1)
            w = w.gather(-1, order)
            scale = geo.opacity / w.sum(-1).clamp_min(1e-12)
            g = lambda a: a.gather(1, idx[..., None].expand(-1, -1, a.shape[-1]))  # noqa: E731
            parts.append(GeometryCache(g(geo.points), g(geo.normal), g(geo.feature),
                                       w * scale[:, None], geo.opacity, sub.directions))
    return GeometryCache(*(torch.cat([getattr(p, f.name) for p in parts])
                           for f in fields(GeometryCache)))


def rerender_losses(model, decoder, cache, target, frame_rows, config):
    """Stage-2 components on cached geometry; returns ``(total, parts)``."""
    codes = model.codes.codes(model.codes.frame_ids)
    rgb, _, _, shadow = shade_samples(model, decoder, cache.points, cache.feature, cache.normal,
                                      cache.weight, cache.opacity, cache.directions, codes,
                                      frame_rows)
    l_cr = ((rgb - target) ** 2).mean()
    zero = torch.zeros((), dtype=rgb.dtype)
    l_rs = shadow_regularizer(shadow, cache.weight) / len(rgb) if model.use_shadow else zero
    if model.use_tone:
        used = torch.unique(frame_rows)
        l_rt = tone_regularizer(tone_decode(model.tone_mapper, codes.tone[used])).mean()
    else:
        l_rt = zero
    total = config.lambda_cr * l_cr + config.lambda_rs * l_rs + config.lambda_rt * l_rt
    return total, {"rerender": l_cr, "shadow_reg": l_rs, "tone_reg": l_rt, "total": total}


def scene_model_from_geometry(geometry, frame_ids, config=TrainConfig()):
    """Fresh :class:`SceneModel` carrying a copy of trained geometry and sharpness."""
    g = geometry.geometry
    model = SceneModel(frame_ids, encoding=g.encoding, dims=CodeDims(),
                       feature_dim=g.feature_dim,
                       geometry_hidden=g.net[0].out_features,
                       geometry_depth=sum(isinstance(m, nn.Linear) for m in g.net) - 1,
                       use_tone=config.use_tone, use_shadow=config.use_shadow, seed=config.seed)
    model.geometry.load_state_dict(g.state_dict())
    with torch.no_grad():
        model.log_sharpness.copy_(geometry.log_sharpness)
    return model


def stage2_parameters(model):
    groups = [model.appearance.parameters(), model.sky.parameters()]
    if model.use_shadow:
        groups.append(model.shadow.parameters())
    if model.use_tone:
        groups.append(model.tone_mapper.parameters())
    return [p for g in groups for p in g]


def train_rerender(geometry, distilled, dataset, decoder, config=TrainConfig(), logger=None,
                   cache=None):
    """Stage 2: ``lambda_cr L_cr + lambda_rs L_rs + lambda_rt L_rt`` with geometry frozen."""
    if not getattr(decoder, "frozen", False):
        raise ConfigurationError("the sky decoder must be frozen before re-render training")
    distilled = np.asarray(distilled, dtype=np.float32)
    if distilled.shape != dataset.images.shape:
        raise ValidationError("distilled images must match the dataset images")
    gen = torch.Generator().manual_seed(config.seed + 1)
    model = geometry if isinstance(geometry, SceneModel) else \
        scene_model_from_geometry(geometry, dataset.frame_ids, config)
    model.geometry.requires_grad_(False)
    model.log_sharpness.requires_grad_(False)
    before = geometry_checksum(model)

    table = build_ray_table(dataset, distilled)
    if cache is None:
        cache = cache_geometry(model, table.batch(slice(None)), config.cache_samples)
    rows = model.codes.rows(dataset.frame_ids)[table.frame]

    opt = torch.optim.Adam([{"params": stage2_parameters(model), "lr": config.stage2_lr},
                            {"params": list(model.codes.parameters()), "lr": config.code_lr}])
    sched = _cosine(opt, config.stage2_steps, config.lr_final_fraction)
    model.train()
    for step in range(config.stage2_steps):
        idx = torch.randint(len(table), (config.stage2_rays,), generator=gen)
        total, parts = rerender_losses(model, decoder, cache.take(idx), table.rgb[idx], rows[idx],
                                       config)
        if not torch.isfinite(total):
            raise TrainingError(f"stage-2 loss diverged at step {step}",
                                _dump_state(model, step, parts))
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        if logger is not None and (step % config.log_every == 0 or step == config.stage2_steps - 1):
            logger({"stage": 2, "step": step, **{k: v.item() for k, v in parts.items()}})
    model.eval()
    if geometry_checksum(model) != before:
        raise GeometryMutationError("geometry parameters changed during re-render training")
    return model
