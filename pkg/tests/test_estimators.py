import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from renderctl.adaptation import RealismNet
from renderctl.estimators import FactorizedRerenderer, PhotoAdapter, RealismAugmenter, SkyPrior
from renderctl.lighting import procedural_sky, random_sky_params
from renderctl.renderer import CameraSpec, RenderOptions, render_image
from renderctl.synthdata import DatasetSpec, generate_dataset, make_scene
from renderctl.training import TrainConfig


def test_sky_prior_round_trip_shapes():
    prior = SkyPrior(n_samples=1000, steps=20, latent_dim=8, max_log_mae=10.0)
    assert clone(prior).get_params() == prior.get_params()
    with pytest.raises(NotFittedError):
        prior.transform(np.ones((1, 32, 64, 3)))
    prior.fit()
    maps = np.stack([procedural_sky(random_sky_params(np.random.default_rng(i))).radiance.numpy()
                     for i in range(3)])
    z = prior.transform(maps)
    assert z.shape == (3, 8)
    back = prior.inverse_transform(z)
    assert back.shape == (3, 16, 32, 3) and np.all(back > 0)


def test_factorized_rerenderer_fit_predict():
    scene = make_scene("minimal-sphere", 0)
    train, _ = generate_dataset(scene, DatasetSpec(n_views=10, n_test=1, width=6, height=6))
    from renderctl.lighting import SkyDecoder
    cfg = TrainConfig(stage1_steps=2, stage1_rays=32, stage1_coarse=8, stage1_importance=4,
                      eikonal_points=8, geometry_hidden=16, geometry_depth=2, stage2_steps=2,
                      stage2_rays=32, cache_samples=4)
    est = FactorizedRerenderer(SkyDecoder(16, hidden=(16,)).freeze(), cfg, RenderOptions(8, 4))
    with pytest.raises(NotFittedError):
        est.predict(train.cameras[:1], train.frame_ids[:1])
    est.fit(train)
    out = est.predict(train.cameras[:2], train.frame_ids[:2])
    assert out.shape == (2, 6, 6, 3) and np.all(np.isfinite(out))


def test_photo_adapter_and_realism_augmenter(toy_model, toy_decoder):
    model, dec = toy_model.float(), toy_decoder.float()
    cam = CameraSpec.look_at([2.6, 0.4, 0.5], [0, 0, 0], 8, 8, 50)
    from renderctl.field import LatentCodes
    photo = render_image(model, cam, LatentCodes(torch.full((1, 16), 0.3), torch.zeros(1, 8),
                                                 torch.zeros(1, 8)), dec,
                         options=RenderOptions(8, 4))["rgb"]
    ad = PhotoAdapter(model, dec, steps=30, lr=3e-2, render_options=RenderOptions(8, 4))
    ad.fit(photo, cam)
    assert ad.result_.reduction > 0
    assert ad.predict(cam).shape == (8, 8, 3)

    aug = RealismAugmenter(RealismNet(channels=8, blocks=1, hidden=16, depth=2), steps=3)
    aug.fit(photo, photo + 0.05)
    assert aug.transform(photo, (12, 12)).shape == (12, 12, 3)
    with pytest.raises(ValueError):
        RealismAugmenter().fit(photo, photo)
