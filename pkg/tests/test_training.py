import math

import numpy as np
import pytest
import torch

from renderctl.exceptions import (ConfigurationError, GeometryMutationError, ValidationError)
from renderctl.field import GeometryField
from renderctl.lighting import SkyDecoder
from renderctl.synthdata import DatasetSpec, generate_dataset, make_scene
from renderctl.training import (Stage1Model, TrainConfig, build_ray_table, cache_geometry,
                                distill_occlusion_free, eikonal_loss, geometry_checksum,
                                rerender_losses, scene_model_from_geometry, sky_mask_loss,
                                stage1_losses, stage1_photometric_loss, train_geometry,
                                train_rerender, uniform_ball)
from renderctl.renderer import RenderOptions


@pytest.fixture(scope="module")
def tiny_data():
    scene = make_scene("minimal-sphere", 0)
    return generate_dataset(scene, DatasetSpec(n_views=10, n_test=2, width=8, height=8))


def tiny_config(**kw):
    base = dict(stage1_steps=3, stage1_rays=64, stage1_coarse=8, stage1_importance=4,
                eikonal_points=32, geometry_hidden=16, geometry_depth=2, stage2_steps=3,
                stage2_rays=64, cache_samples=4, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_photometric_loss_formula_cases():
    t = torch.rand(5, 3, dtype=torch.float64)
    zero = torch.zeros_like(t)
    assert float(stage1_photometric_loss(t, zero, torch.ones(5, dtype=torch.float64), t)) == 0.0
    pred = t + 0.1
    l1 = stage1_photometric_loss(pred, zero, torch.ones(5, dtype=torch.float64), t)
    l2 = stage1_photometric_loss(pred, zero, 2 * torch.ones(5, dtype=torch.float64), t)
    first = 3 * 0.01 / 2
    assert float(l1) == pytest.approx(first)
    assert float(l2) == pytest.approx(first / 4 + math.log(2) / 2)
    dens = torch.full((5, 4), 2.0, dtype=torch.float64)
    l3 = stage1_photometric_loss(t, zero, torch.ones(5, dtype=torch.float64), t, dens, 0.01)
    assert float(l3) == pytest.approx(0.02)


def test_sky_mask_loss_is_bce():
    op = torch.tensor([0.9, 0.2], dtype=torch.float64)
    m = torch.tensor([1.0, 0.0], dtype=torch.float64)
    ref = -(math.log(0.9) + math.log(0.8)) / 2
    assert float(sky_mask_loss(op, m)) == pytest.approx(ref)
    assert torch.isfinite(sky_mask_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])))


def test_eikonal_zero_for_exact_distance():
    g = GeometryField(hidden=8, depth=1).double()
    pts = uniform_ball(256, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert float(eikonal_loss(g, points=pts)) < 1e-12
    assert float(eikonal_loss(lambda x: 2 * x.norm(dim=-1), points=pts)) == pytest.approx(1.0)


def test_uniform_ball_inside_and_spread():
    p = uniform_ball(4000, radius=1.0, generator=torch.Generator().manual_seed(1))
    r = p.norm(dim=-1)
    assert float(r.max()) <= 1.0
    # uniform in volume: P(r < 0.5) = 1/8
    assert abs(float((r < 0.5).float().mean()) - 0.125) < 0.02


def test_config_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        TrainConfig(lambda_c=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig().lambda_cr == 2.0 and TrainConfig().lambda_m == 0.1


def test_stage1_total_is_weighted_sum(tiny_data):
    train, _ = tiny_data
    cfg = tiny_config()
    model = Stage1Model(train.frame_ids, geometry_hidden=16, geometry_depth=2)
    table = build_ray_table(train)
    table.frame = model.rows(train.frame_ids)[table.frame]
    gen = torch.Generator().manual_seed(0)
    total, parts = stage1_losses(model, table, torch.arange(40), cfg, RenderOptions(8, 4), gen)
    ref = cfg.lambda_c * parts["photometric"] + cfg.lambda_m * parts["sky_mask"] \
        + cfg.lambda_re * parts["eikonal"]
    assert total.item() == pytest.approx(ref.item(), rel=1e-12)
    assert float(parts["beta"]) >= cfg.beta_min


def test_train_geometry_runs_and_needs_views(tiny_data):
    train, _ = tiny_data
    records = []
    model = train_geometry(train, tiny_config(), records.append)
    assert records and all(np.isfinite(r["total"]) for r in records)
    with pytest.raises(ValidationError):
        train_geometry(train.subset(range(5)), tiny_config())
    with pytest.raises(ValidationError):
        model.rows(["unknown"])
    imgs = distill_occlusion_free(model, train, RenderOptions(8, 4))
    assert imgs.shape == train.images.shape


def test_stage2_keeps_geometry_and_sums_losses(tiny_data):
    train, _ = tiny_data
    cfg = tiny_config()
    stage1 = Stage1Model(train.frame_ids, geometry_hidden=16, geometry_depth=2)
    dec = SkyDecoder(16, hidden=(16,)).freeze()
    model = train_rerender(stage1, train.images, train, dec, cfg)
    assert geometry_checksum(model) == geometry_checksum(stage1)
    table = build_ray_table(train)
    cache = cache_geometry(model, table.batch(slice(0, 30)), 4, RenderOptions(8, 4))
    rows = model.codes.rows(train.frame_ids)[table.frame[:30]]
    total, parts = rerender_losses(model, dec, cache, table.rgb[:30], rows, cfg)
    ref = 2.0 * parts["rerender"] + 0.01 * parts["shadow_reg"] + 0.1 * parts["tone_reg"]
    assert total.item() == pytest.approx(ref.item(), rel=1e-12)
    assert torch.allclose(cache.weight.sum(-1), cache.opacity, atol=1e-6)
    with pytest.raises(ConfigurationError):
        train_rerender(stage1, train.images, train, SkyDecoder(16, hidden=(16,)), cfg)


def test_stage2_detects_geometry_mutation(tiny_data, monkeypatch):
    import renderctl.training as T
    train, _ = tiny_data
    stage1 = Stage1Model(train.frame_ids, geometry_hidden=16, geometry_depth=2)
    dec = SkyDecoder(16, hidden=(16,)).freeze()
    real = T.rerender_losses

    def tampering(model, *a):
        with torch.no_grad():
            model.geometry.net[0].bias.add_(1e-3)
        return real(model, *a)

    monkeypatch.setattr(T, "rerender_losses", tampering)
    with pytest.raises(GeometryMutationError):
        train_rerender(stage1, train.images, train, dec, tiny_config())


def test_ablation_toggles_change_model(tiny_data):
    train, _ = tiny_data
    stage1 = Stage1Model(train.frame_ids, geometry_hidden=16, geometry_depth=2)
    m = scene_model_from_geometry(stage1, train.frame_ids, tiny_config(use_shadow=False))
    assert not m.use_shadow and m.use_tone
