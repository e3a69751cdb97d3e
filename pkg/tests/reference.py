"""Slow float64 reference implementations used as test oracles."""
import math

import numpy as np
import torch


def logistic_cdf(x, s):
    return 1.0 / (1.0 + math.exp(-s * x)) if s * x > -700 else 0.0


def sequential_composite(alphas, values):
    """Plain loop over samples: returns (color, opacity)."""
    T, color, opacity = 1.0, np.zeros(len(values[0])), 0.0
    for a, v in zip(alphas, values):
        color += T * a * np.asarray(v)
        opacity += T * a
        T *= 1.0 - a
    return color, opacity


def texel_grid(H, W):
    """Directions and solid angles from exact ring areas, computed with numpy."""
    theta_edges = np.linspace(0.0, np.pi, H + 1)
    dw_row = (2 * np.pi / W) * (np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:]))
    theta = (np.arange(H) + 0.5) * np.pi / H
    phi = (np.arange(W) + 0.5) * 2 * np.pi / W
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
    return dirs.reshape(-1, 3), np.repeat(dw_row, W)


def envmap_small(decoder, code):
    """Native decoder map box-averaged to 16 x 32 with solid-angle weights (numpy)."""
    with torch.no_grad():
        native = decoder(torch.as_tensor(code, dtype=torch.float64)[None])[0].double().numpy()
    H, W = native.shape[:2]
    f = H // 16
    _, dw = texel_grid(H, W)
    dw = dw.reshape(H, W)
    out = np.zeros((16, 32, 3))
    for i in range(16):
        for j in range(32):
            blk = native[i * f:(i + 1) * f, j * f:(j + 1) * f]
            wts = dw[i * f:(i + 1) * f, j * f:(j + 1) * f]
            out[i, j] = (blk * wts[..., None]).sum((0, 1)) / wts.sum()
    return out


def reference_pixel(model, decoder, codes, origin, direction, t):
    """Factored pixel color by sequential float64 evaluation at depths ``t`` (K + 1,)."""
    origin, direction = np.asarray(origin, float), np.asarray(direction, float)
    s = float(model.sharpness.detach())
    pts = [origin + ti * direction for ti in t]
    pts = [p * min(1.0, 1.5 / np.linalg.norm(p)) for p in pts]
    sdf, normals, feats = [], [], []
    for p in pts:
        x = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        d, f = model.geometry(x[None])
        (g,) = torch.autograd.grad(d.sum(), x)
        sdf.append(float(d.detach()))
        feats.append(f.detach())
        normals.append((g / g.norm()).numpy())
    alphas = []
    for k in range(len(t) - 1):
        p0, p1 = logistic_cdf(sdf[k], s), logistic_cdf(sdf[k + 1], s)
        alphas.append(max((p0 - p1) / p0, 0.0) if p0 > 0 else 0.0)
    env = envmap_small(decoder, codes.environment[0])
    dirs, dw = texel_grid(16, 32)
    L = env.reshape(-1, 3)
    with torch.no_grad():
        tm = model.tone_mapper(codes.tone[0])
        A, b = tm.A.numpy(), tm.b.numpy()
    colors = []
    for k in range(len(t) - 1):
        x = torch.tensor(pts[k], dtype=torch.float64)[None]
        with torch.no_grad():
            a = model.appearance(x, feats[k])[0].numpy()
            sh = float(model.shadow(x, codes.shadow))
        cos = np.clip(dirs @ normals[k], 0.0, None)
        irr = (L * (cos * dw)[:, None]).sum(0)
        c = a * sh * irr
        colors.append(np.maximum(A @ c + b, 0.0))
    surface, opacity = sequential_composite(alphas, colors)
    with torch.no_grad():
        sky = model.sky(torch.tensor(direction)[None], codes.environment)[0].numpy()
    return surface + (1.0 - opacity) * sky
