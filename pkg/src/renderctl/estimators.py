"""scikit-learn style wrappers over the training and adaptation pipeline."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adaptation import adapt_photo, augment_realism, finetune_realism
from .lighting import SHADING_RES, area_downscale, decode_radiance, pretrain_sky_decoder
from .renderer import RenderOptions, render_image
from .training import TrainConfig, distill_occlusion_free, train_geometry, train_rerender
from .validation import check_image


class SkyPrior(BaseEstimator, TransformerMixin):
    """HDR sky autoencoder: ``transform`` maps radiance maps to codes, ``inverse_transform`` back."""

    def __init__(self, n_samples=2000, steps=3000, latent_dim=16, seed=0, max_log_mae=0.15):
        self.n_samples = n_samples
        self.steps = steps
        self.latent_dim = latent_dim
        self.seed = seed
        self.max_log_mae = max_log_mae

    def fit(self, X=None, y=None):
        self.decoder_, self.encoder_ = pretrain_sky_decoder(
            self.n_samples, self.seed, self.latent_dim, self.steps,
            max_log_mae=self.max_log_mae, return_encoder=True)
        self.report_ = self.decoder_.report
        return self

    def transform(self, X):
        """Radiance maps ``(N, H, W, 3)`` (native or shading resolution) -> codes ``(N, d)``."""
        check_is_fitted(self, "encoder_")
        maps = torch.as_tensor(np.asarray(X, dtype=np.float32))
        if maps.shape[1:3] != SHADING_RES:
            maps = area_downscale(maps, maps.shape[1] // SHADING_RES[0])
        with torch.no_grad():
            return self.encoder_(torch.log(maps.clamp_min(1e-8))).numpy()

    def inverse_transform(self, X):
        check_is_fitted(self, "decoder_")
        with torch.no_grad():
            return decode_radiance(self.decoder_, torch.as_tensor(X, dtype=torch.float32)).numpy()


class FactorizedRerenderer(BaseEstimator):
    """Both training stages on a posed dataset; ``predict`` renders frames by id."""

    def __init__(self, decoder=None, config=None, render_options=None):
        self.decoder = decoder
        self.config = config
        self.render_options = render_options

    def fit(self, dataset, y=None, logger=None):
        cfg = self.config or TrainConfig()
        if self.decoder is None:
            raise ValueError("FactorizedRerenderer needs a frozen sky decoder")
        self.stage1_ = train_geometry(dataset, cfg, logger)
        self.distilled_ = distill_occlusion_free(self.stage1_, dataset)
        self.model_ = train_rerender(self.stage1_, self.distilled_, dataset, self.decoder, cfg,
                                     logger)
        self.frame_ids_ = list(dataset.frame_ids)
        return self

    def predict(self, cameras, frame_ids=None, codes=None):
        """Render one image per camera with training-frame codes or explicit codes."""
        check_is_fitted(self, "model_")
        opts = self.render_options or RenderOptions()
        if codes is None:
            codes = [self.model_.codes.codes([f]).detach() for f in frame_ids]
        return np.stack([render_image(self.model_, cam, c, self.decoder, options=opts)["rgb"]
                         for cam, c in zip(cameras, codes)])


class PhotoAdapter(BaseEstimator):
    """Latent-code fit of a trained model to one photo."""

    def __init__(self, model=None, decoder=None, steps=500, lr=1e-2, render_options=None):
        self.model = model
        self.decoder = decoder
        self.steps = steps
        self.lr = lr
        self.render_options = render_options

    def fit(self, photo, camera, mask=None):
        self.result_ = adapt_photo(self.model, self.decoder, photo, camera, mask, self.steps,
                                   self.lr, options=self.render_options or RenderOptions())
        self.codes_ = self.result_.codes
        return self

    def predict(self, camera):
        check_is_fitted(self, "codes_")
        return render_image(self.model, camera, self.codes_, self.decoder,
                            options=self.render_options or RenderOptions())["rgb"]


class RealismAugmenter(BaseEstimator, TransformerMixin):
    """Per-photo fine-tune of a pre-trained realism network."""

    def __init__(self, base_net=None, steps=300, lr=2e-4, seed=0):
        self.base_net = base_net
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def fit(self, rendered, photo, mask=None):
        if self.base_net is None:
            raise ValueError("RealismAugmenter needs a pre-trained base network")
        self.net_, self.trace_ = finetune_realism(self.base_net, check_image(rendered, "rendered"),
                                                  photo, mask, self.steps, self.lr, self.seed)
        return self

    def transform(self, rendered, out_size=None):
        check_is_fitted(self, "net_")
        return augment_realism(self.net_, rendered, out_size)
