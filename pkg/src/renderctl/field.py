"""Coordinate networks for the scene: SDF geometry, albedo, shadow and sky.

All fields take positionally encoded inputs.  Positions live in a scene
normalized to the unit sphere; queries are valid up to ``BOUND_RADIUS``.
"""
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, DegenerateNormalError, DomainError

BOUND_RADIUS = 1.5
INIT_SPHERE_RADIUS = 0.5
# sharpness = exp(SHARPNESS_SCALE * u); the scale speeds up learning of u
SHARPNESS_SCALE = 10.0


@dataclass(frozen=True)
class EncodingSpec:
    num_freqs_position: int = 8
    num_freqs_direction: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.num_freqs_position < 0 or self.num_freqs_direction < 0:
            raise ConfigurationError("frequency counts must be non-negative")

    def dim(self, num_freqs):
        return 3 * int(self.include_input) + 6 * num_freqs

    @property
    def position_dim(self):
        return self.dim(self.num_freqs_position)

    @property
    def direction_dim(self):
        return self.dim(self.num_freqs_direction)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CodeDims:
    environment: int = 16
    shadow: int = 8
    tone: int = 8


def positional_encode(x, num_freqs, include_input=True):
    """Encode ``x`` (..., 3) as ``[x, sin(2^0 pi x), cos(2^0 pi x), ...]``.

    Each sin/cos block holds the three axes in order.
    """
    parts = [x] if include_input else []
    for k in range(num_freqs):
        scaled = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


def _mlp(in_dim, out_dim, hidden, depth, activation):
    layers = []
    d = in_dim
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), activation()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class GeometryField(nn.Module):
    """SDF network with an analytic sphere prior.

    ``sdf(x) = head(x) + (|x| - r0)``; the output layer starts at zero so the
    untrained field is exactly the sphere of radius ``r0``.
    """

    def __init__(self, encoding=EncodingSpec(), hidden=128, depth=4, feature_dim=16,
                 init_radius=INIT_SPHERE_RADIUS):
        super().__init__()
        self.encoding = encoding
        self.feature_dim = feature_dim
        self.init_radius = init_radius
        # SiLU: smooth second derivatives for the Eikonal term, and fast on CPU
        self.net = _mlp(encoding.position_dim, 1 + feature_dim, hidden, depth, nn.SiLU)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        h = self.net(positional_encode(x, self.encoding.num_freqs_position,
                                       self.encoding.include_input))
        radius = torch.sqrt((x * x).sum(-1) + 1e-12)
        sdf = h[..., 0] + radius - self.init_radius
        return sdf, h[..., 1:]


class AppearanceField(nn.Module):
    """Base albedo ``a(x, feature)`` in (0, 1)^3."""

    def __init__(self, encoding=EncodingSpec(), feature_dim=16, hidden=128, depth=3):
        super().__init__()
        self.encoding = encoding
        self.net = _mlp(encoding.position_dim + feature_dim, 3, hidden, depth, nn.ReLU)

    def forward(self, x, feature):
        enc = positional_encode(x, self.encoding.num_freqs_position, self.encoding.include_input)
        return torch.sigmoid(self.net(torch.cat([enc, feature], dim=-1)))


class ShadowField(nn.Module):
    """Shadow multiplier ``s(x, l_s)`` in (0, 1), initialized near 1."""

    def __init__(self, encoding=EncodingSpec(), code_dim=8, hidden=64, depth=3, init_bias=3.0):
        super().__init__()
        self.encoding = encoding
        self.code_dim = code_dim
        self.net = _mlp(encoding.position_dim + code_dim, 1, hidden, depth, nn.ReLU)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.constant_(self.net[-1].bias, init_bias)

    def forward(self, x, code):
        enc = positional_encode(x, self.encoding.num_freqs_position, self.encoding.include_input)
        code = code.expand(*enc.shape[:-1], code.shape[-1])
        return torch.sigmoid(self.net(torch.cat([enc, code], dim=-1)))[..., 0]


class SkyField(nn.Module):
    """Non-negative sky radiance along a view direction, conditioned on ``l_e``."""

    def __init__(self, encoding=EncodingSpec(), code_dim=16, hidden=64, depth=3):
        super().__init__()
        self.encoding = encoding
        self.code_dim = code_dim
        self.net = _mlp(encoding.direction_dim + code_dim, 3, hidden, depth, nn.ReLU)

    def forward(self, v, code):
        enc = positional_encode(v, self.encoding.num_freqs_direction, self.encoding.include_input)
        code = code.expand(*enc.shape[:-1], code.shape[-1])
        return F.softplus(self.net(torch.cat([enc, code], dim=-1)))


class CodeTable(nn.Module):
    """Per-frame latent codes ``{l_e, l_s, l_t}`` keyed by frame id."""

    def __init__(self, frame_ids, dims=CodeDims(), init_std=0.01, generator=None):
        super().__init__()
        self.frame_ids = [str(f) for f in frame_ids]
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ConfigurationError("duplicate frame ids in code table")
        self.index = {f: i for i, f in enumerate(self.frame_ids)}
        self.dims = dims
        n = len(self.frame_ids)

        def init(d):
            return nn.Parameter(torch.randn(n, d, generator=generator) * init_std)

        self.environment = init(dims.environment)
        self.shadow = init(dims.shadow)
        self.tone = init(dims.tone)

    def __len__(self):
        return len(self.frame_ids)

    def rows(self, frame_ids):
        try:
            return torch.tensor([self.index[str(f)] for f in frame_ids], dtype=torch.long)
        except KeyError as exc:
            raise ConfigurationError(f"no latent codes for frame {exc.args[0]!r}") from None

    def codes(self, frame_ids):
        """Return a :class:`LatentCodes` with one row per requested frame."""
        idx = self.rows(frame_ids)
        return LatentCodes(self.environment[idx], self.shadow[idx], self.tone[idx])


@dataclass
class LatentCodes:
    """Environment, shadow and tone codes, each shaped ``(G, dim)``."""
    environment: torch.Tensor
    shadow: torch.Tensor
    tone: torch.Tensor

    @classmethod
    def zeros(cls, dims=CodeDims(), groups=1, dtype=torch.float32):
        return cls(torch.zeros(groups, dims.environment, dtype=dtype),
                   torch.zeros(groups, dims.shadow, dtype=dtype),
                   torch.zeros(groups, dims.tone, dtype=dtype))

    def __post_init__(self):
        for name in ("environment", "shadow", "tone"):
            t = getattr(self, name)
            if t.ndim == 1:
                setattr(self, name, t[None])

    def __len__(self):
        return self.environment.shape[0]

    def detach(self):
        return LatentCodes(self.environment.detach().clone(), self.shadow.detach().clone(),
                           self.tone.detach().clone())

    def to(self, dtype):
        return LatentCodes(self.environment.to(dtype), self.shadow.to(dtype), self.tone.to(dtype))

    def select(self, i):
        return LatentCodes(self.environment[i:i + 1], self.shadow[i:i + 1], self.tone[i:i + 1])

    def to_dict(self):
        return {k: getattr(self, k).detach().cpu().numpy().tolist()
                for k in ("environment", "shadow", "tone")}

    @classmethod
    def from_dict(cls, d, dtype=torch.float32):
        return cls(*(torch.tensor(d[k], dtype=dtype) for k in ("environment", "shadow", "tone")))


class SceneModel(nn.Module):
    """The trained artifact: fields, tone mapper, SDF sharpness and per-frame codes."""

    def __init__(self, frame_ids=(), encoding=EncodingSpec(), dims=CodeDims(),
                 feature_dim=16, geometry_hidden=128, geometry_depth=4,
                 use_tone=True, use_shadow=True, seed=0):
        super().__init__()
        from .lighting import ToneMapper

        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.geometry = GeometryField(encoding, geometry_hidden, geometry_depth, feature_dim)
            self.appearance = AppearanceField(encoding, feature_dim)
            self.shadow = ShadowField(encoding, dims.shadow)
            self.sky = SkyField(encoding, dims.environment)
            self.tone_mapper = ToneMapper(dims.tone)
        self.log_sharpness = nn.Parameter(
            torch.tensor(math.log(1.0 / 0.3) / SHARPNESS_SCALE))
        self.codes = CodeTable(frame_ids, dims, generator=gen)
        self.encoding = encoding
        self.dims = dims
        self.feature_dim = feature_dim
        self.use_tone = use_tone
        self.use_shadow = use_shadow

    @property
    def sharpness(self):
        return torch.exp(SHARPNESS_SCALE * self.log_sharpness)

    def geometry_parameters(self):
        yield from self.geometry.parameters()
        yield self.log_sharpness

    def config(self):
        return {
            "frame_ids": self.codes.frame_ids,
            "encoding": self.encoding.to_dict(),
            "dims": asdict(self.dims),
            "feature_dim": self.feature_dim,
            "geometry_hidden": self.geometry.net[0].out_features,
            "geometry_depth": sum(isinstance(m, nn.Linear) for m in self.geometry.net) - 1,
            "use_tone": self.use_tone,
            "use_shadow": self.use_shadow,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(frame_ids=cfg["frame_ids"], encoding=EncodingSpec(**cfg["encoding"]),
                   dims=CodeDims(**cfg["dims"]), feature_dim=cfg["feature_dim"],
                   geometry_hidden=cfg["geometry_hidden"], geometry_depth=cfg["geometry_depth"],
                   use_tone=cfg["use_tone"], use_shadow=cfg["use_shadow"])


def _sdf_callable(model):
    if isinstance(model, (SceneModel,)) or hasattr(model, "geometry"):
        return lambda x: model.geometry(x)[0]
    if isinstance(model, GeometryField):
        return lambda x: model(x)[0]
    return model


def _check_bounds(x):
    r = torch.linalg.norm(x, dim=-1)
    if torch.any(r > BOUND_RADIUS + 1e-6):
        raise DomainError(f"query point outside bounding sphere (|x| = {r.max().item():.3f} > "
                          f"{BOUND_RADIUS})")


def clamp_to_bounds(x, radius=BOUND_RADIUS):
    r = torch.linalg.norm(x, dim=-1, keepdim=True)
    return x * torch.clamp(radius / r.clamp_min(1e-12), max=1.0)


def eval_sdf(model, x):
    """SDF at points ``x`` (..., 3); raises :class:`DomainError` outside the bounds."""
    x = torch.as_tensor(x)
    _check_bounds(x)
    return _sdf_callable(model)(x)


def sdf_gradient(sdf_fn, x, create_graph=False):
    """Return ``(sdf, grad)`` of ``sdf_fn`` at ``x`` via autograd."""
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        sdf = sdf_fn(x)
        (grad,) = torch.autograd.grad(sdf.sum(), x, create_graph=create_graph)
    return sdf, grad


def eval_normal(model, x):
    """Unit surface normal from the normalized SDF gradient.

    ``model`` may be a :class:`SceneModel` or any callable mapping points to SDF.
    """
    x = torch.as_tensor(x)
    _check_bounds(x)
    _, grad = sdf_gradient(_sdf_callable(model), x)
    norm = torch.linalg.norm(grad, dim=-1, keepdim=True)
    if torch.any(norm < 1e-8):
        raise DegenerateNormalError("SDF gradient norm below 1e-8")
    return grad / norm


def eval_albedo(model, x):
    x = torch.as_tensor(x)
    _check_bounds(x)
    _, feature = model.geometry(x)
    return model.appearance(x, feature)


def eval_shadow(model, x, l_s):
    x = torch.as_tensor(x)
    l_s = torch.as_tensor(l_s, dtype=x.dtype)
    if l_s.shape[-1] != model.shadow.code_dim:
        raise ConfigurationError(
            f"shadow code has width {l_s.shape[-1]}, model expects {model.shadow.code_dim}")
    return model.shadow(x, l_s)


def eval_sky(model, v, l_e):
    v = torch.as_tensor(v)
    l_e = torch.as_tensor(l_e, dtype=v.dtype)
    if torch.any((torch.linalg.norm(v, dim=-1) - 1.0).abs() > 1e-4):
        raise DomainError("sky directions must be unit vectors")
    if l_e.shape[-1] != model.sky.code_dim:
        raise ConfigurationError(
            f"environment code has width {l_e.shape[-1]}, model expects {model.sky.code_dim}")
    return model.sky(v, l_e)
