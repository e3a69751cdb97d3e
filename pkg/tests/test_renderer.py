import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from reference import reference_pixel, sequential_composite
from renderctl.exceptions import DomainError, ValidationError
from renderctl.field import BOUND_RADIUS
from renderctl.renderer import (CameraSpec, RenderOptions, alpha_from_sdf, composite,
                                generate_rays, irradiance_transfer, render_image,
                                render_pixel_factored, render_rays, sample_points, shade_samples,
                                sphere_bounds, trace_geometry)

OPTS = RenderOptions(n_coarse=24, n_importance=8)


def random_rays(n, seed, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(n):
        eye = rng.normal(size=3)
        eye = 2.5 * eye / np.linalg.norm(eye)
        cams.append(CameraSpec.look_at(eye, rng.uniform(-0.3, 0.3, 3), 4, 4, 50))
    rays = [generate_rays(c, [[rng.uniform(0, 3), rng.uniform(0, 3)]], dtype) for c in cams]
    return rays


def test_camera_look_at_conventions():
    cam = CameraSpec.look_at([3, 0, 0], [0, 0, 0], 8, 6, 60)
    R = cam.pose[:3, :3]
    assert np.allclose(R.T @ R, np.eye(3))
    assert np.allclose(R[:, 2], [-1, 0, 0])   # +z forward
    assert R[2, 1] < 0                        # +y down in the world z-up frame
    uv, z = cam.project(np.zeros((1, 3)))
    assert np.allclose(uv, [[cam.cx - 0.5, cam.cy - 0.5]]) and z[0] == pytest.approx(3)
    assert math.degrees(cam.fov_x) == pytest.approx(60)


@given(st.integers(0, 7), st.integers(0, 5))
def test_rays_project_back_to_pixel(i, j):
    cam = CameraSpec.look_at([2, 1, 0.5], [0, 0, 0.1], 8, 6, 55)
    rays = generate_rays(cam, [[i, j]], torch.float64)
    p = rays.origins.numpy() + 1.7 * rays.directions.numpy()
    uv, _ = cam.project(p)
    assert np.allclose(uv[0], [i, j], atol=1e-9)
    assert int(rays.pixel_ids[0]) == j * 8 + i


def test_camera_validation():
    with pytest.raises(ValidationError):
        CameraSpec(np.eye(4), -1, 1, 1, 1, 4, 4)
    with pytest.raises(ValidationError):
        CameraSpec(np.eye(4), 1, 1, 5, 1, 4, 4)
    cam = CameraSpec.look_at([3, 0, 0], [0, 0, 0], 4, 4, 50)
    with pytest.raises(DomainError):
        generate_rays(cam, [[10, 0]])
    assert CameraSpec.from_dict(cam.to_dict()).to_dict() == cam.to_dict()


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_sphere_bounds_endpoints_on_sphere(x, y, z):
    o = torch.tensor([[x, y, z]], dtype=torch.float64)
    d = -o / o.norm().clamp_min(1e-9)
    if float(o.norm()) < 1e-3:
        return
    near, far, hit = sphere_bounds(o, d)
    if hit[0]:
        for t in (far, near if o.norm() > BOUND_RADIUS else None):
            if t is not None:
                assert abs(float((o + t[:, None] * d).norm()) - BOUND_RADIUS) < 1e-9


def test_alpha_matches_logistic_formula():
    rng = np.random.default_rng(0)
    sdf = rng.uniform(-1, 1, 20)
    s = 7.5
    a = alpha_from_sdf(torch.tensor(sdf), s).numpy()
    phi = 1 / (1 + np.exp(-s * sdf))
    assert np.allclose(a, np.maximum((phi[:-1] - phi[1:]) / phi[:-1], 0), atol=1e-14)


def test_alpha_stable_for_extreme_sharpness():
    a = alpha_from_sdf(torch.tensor([1.0, 0.5, -0.5, -1.0], dtype=torch.float64), 1e4)
    assert torch.all(torch.isfinite(a)) and torch.all((a >= 0) & (a <= 1))
    assert float(a[1]) == pytest.approx(1.0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(0, 100))
def test_composite_matches_loop_and_bounds(alphas, seed):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1, 2, (len(alphas), 3))
    color, op, trans = composite(torch.tensor(alphas, dtype=torch.float64), torch.tensor(vals))
    ref_c, ref_o = sequential_composite(alphas, vals)
    assert np.allclose(color.numpy(), ref_c, atol=1e-6)
    assert abs(float(op) - ref_o) < 1e-6
    assert -1e-12 <= float(op) <= 1 + 1e-12
    assert torch.all(trans[1:] <= trans[:-1] + 1e-15)


def test_sample_points_strictly_increasing_and_inside(toy_model):
    rays = generate_rays(CameraSpec.look_at([2.5, 0, 0.3], [0, 0, 0], 6, 6, 60), dtype=torch.float64)
    t = sample_points(rays, 16, 8, lambda x: toy_model.geometry(x)[0], toy_model.sharpness,
                      torch.Generator().manual_seed(0))
    assert t.shape == (36, 24)
    assert torch.all(t[:, 1:] > t[:, :-1])
    assert torch.all(t >= rays.near[:, None] - 1e-9) and torch.all(t <= rays.far[:, None] + 1e-4)


def test_factored_pixel_matches_sequential_reference(toy_model, toy_decoder, toy_codes):
    with torch.no_grad():
        toy_model.log_sharpness.fill_(math.log(20.0) / 10)
    for ray in random_rays(12, 0):
        out = render_pixel_factored(toy_model, ray, toy_codes, toy_decoder, OPTS)
        t = sample_points(ray, OPTS.n_coarse, OPTS.n_importance,
                          lambda x: toy_model.geometry(x)[0], toy_model.sharpness)
        ref = reference_pixel(toy_model, toy_decoder, toy_codes, ray.origins[0].numpy(),
                              ray.directions[0].numpy(), t[0].numpy())
        assert np.allclose(out.rgb[0].detach().numpy(), ref, atol=1e-5)


def test_render_image_shapes_and_chunk_invariance(toy_model, toy_decoder, toy_codes):
    cam = CameraSpec.look_at([2.5, 0.5, 0.3], [0, 0, 0], 5, 4, 50)
    a = render_image(toy_model, cam, toy_codes, toy_decoder, 7, OPTS, torch.float64)
    b = render_image(toy_model, cam, toy_codes, toy_decoder, 4096, OPTS, torch.float64)
    assert a["rgb"].shape == (4, 5, 3) and a["depth"].shape == (4, 5)
    for k in ("rgb", "opacity", "depth", "shadow"):
        assert np.allclose(a[k], b[k], atol=1e-12)
    assert np.all((a["opacity"] >= 0) & (a["opacity"] <= 1 + 1e-9))
    with pytest.raises(ValidationError):
        render_image(toy_model, cam, toy_codes, toy_decoder, 0)


def test_precomputed_transfer_matches_direct_shading(toy_model, toy_decoder, toy_codes):
    cam = CameraSpec.look_at([2.5, 0.5, 0.3], [0, 0, 0], 4, 3, 50)
    rays = generate_rays(cam, dtype=torch.float64)
    with torch.no_grad():
        geo = trace_geometry(toy_model, rays, OPTS)
        args = (toy_model, toy_decoder, geo.points, geo.feature, geo.normal, geo.weight,
                geo.opacity, rays.directions, toy_codes)
        direct = shade_samples(*args)[0]
        fast = shade_samples(*args, transfer=irradiance_transfer(geo.normal))[0]
    assert torch.allclose(direct, fast, atol=1e-12)


def test_pixel_gradient_matches_finite_differences(toy_model, toy_decoder, toy_codes):
    ray = random_rays(1, 3)[0]
    params = [toy_model.geometry.net[-1].bias, toy_model.appearance.net[-1].bias]

    codes = toy_codes
    codes.environment.requires_grad_(True)
    # stratified midpoints only: sample depths do not move with the parameters
    opts = RenderOptions(n_coarse=32, n_importance=0)

    def pixel():
        return render_rays(toy_model, ray, codes, toy_decoder, opts, create_graph=True).rgb.sum()

    loss = pixel()
    grads = torch.autograd.grad(loss, params + [codes.environment], allow_unused=True)
    h = 1e-6
    for p, g in zip(params + [codes.environment], grads):
        flat = p.data.view(-1)
        for i in range(min(3, flat.numel())):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                up = float(pixel())
                flat[i] = old - h
                down = float(pixel())
            flat[i] = old
            fd = (up - down) / (2 * h)
            ad = float(g.reshape(-1)[i])
            assert abs(ad - fd) <= 1e-3 * max(abs(fd), 1e-3)
