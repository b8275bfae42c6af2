"""scikit-learn style estimators for region-level and spot-level prediction."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from ._validation import check_grids, check_images, check_spot_targets
from .losses import LossConfig
from .metrics import ssim_st
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    init_spot_params,
    pretrain_expression_encoder,
    spot_forward,
)
from .training import TrainConfig, train_arrays, train_spots

__all__ = ["Img2STRegressor", "SpotRegressor", "init_output_head"]


def init_output_head(params: ModelParams, grids: np.ndarray, masks: np.ndarray, seed: int = 0) -> None:
    """Data-dependent start for the two heads.

    The output conv is zeroed and its bias set to the per-gene mean of the
    targets. Without this the randomly initialised head emits noise with
    roughly unit variance, and plain SGD removes it by shrinking the whole
    trunk into dead ReLUs before any spatial signal is learned.

    The projection bias gets small seeded values so that a cell whose
    features are all zero (every ReLU dead) still has a nonzero embedding;
    cosine similarity is undefined otherwise.
    """
    cells = grids.transpose(0, 2, 3, 1)[masks]
    params.tensors["out.w"][:] = 0
    if len(cells):
        params.tensors["out.b"] = cells.mean(axis=0).astype(params["out.b"].dtype)
    rng = np.random.default_rng(seed)
    b = params["proj.b"]
    params.tensors["proj.b"] = rng.normal(0.0, 0.1, size=b.shape).astype(b.dtype)


class Img2STRegressor(RegressorMixin, BaseEstimator):
    """Image-to-image expression regressor (asymmetric UNet + hybrid loss).

    Parameters
    ----------
    base_width : int, default=8
        Channels of the first encoder level; doubled per level, capped at 8x.
    enc_depth, dec_depth : int, default=5, 1
        Encoder and decoder levels. Output grids have side
        ``input_px / 2**(enc_depth - dec_depth)``.
    embed_dim, exp_hidden : int
        Contrastive embedding size and hidden width of the expression encoder.
    lam : float, default=0.25
        Weight of the contrastive term.
    tau : float, default=0.07
        InfoNCE temperature.
    negative_scope : {"region", "batch"}
        Where InfoNCE negatives come from.
    contrastive : bool, default=True
        ``False`` trains on the regression loss alone.
    lr, momentum, weight_decay, lr_final_fraction, batch_size, epochs
        SGD settings; the learning rate follows a per-step cosine schedule.
    pretrain_epochs : int, default=300
        Autoencoder epochs for the frozen expression encoder.
    precision : {"f32", "f64"}
    random_state : int, default=0
    n_jobs : int, default=1
        Threads used by :meth:`predict` (training is always single-threaded).

    Attributes
    ----------
    params_ : ModelParams
    log_ : TrainLog
    n_genes_, input_px_, output_px_ : int
    """

    def __init__(
        self,
        base_width=8,
        enc_depth=5,
        dec_depth=1,
        embed_dim=16,
        exp_hidden=32,
        lam=0.25,
        tau=0.07,
        negative_scope="region",
        contrastive=True,
        lr=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        lr_final_fraction=0.01,
        batch_size=8,
        epochs=40,
        pretrain_epochs=300,
        precision="f32",
        random_state=0,
        n_jobs=1,
    ):
        self.base_width = base_width
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.embed_dim = embed_dim
        self.exp_hidden = exp_hidden
        self.lam = lam
        self.tau = tau
        self.negative_scope = negative_scope
        self.contrastive = contrastive
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_final_fraction = lr_final_fraction
        self.batch_size = batch_size
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.precision = precision
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_final_fraction=self.lr_final_fraction,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.random_state,
            loss=LossConfig(self.lam, self.tau, self.negative_scope),
        )

    def _model_config(self, n_genes: int, input_px: int) -> ModelConfig:
        return ModelConfig(
            gene_count=n_genes,
            input_px=input_px,
            base_width=self.base_width,
            enc_depth=self.enc_depth,
            dec_depth=self.dec_depth,
            embed_dim=self.embed_dim,
            exp_hidden=self.exp_hidden,
        )

    def init(self, X, y, mask=None):
        """Build ``params_`` without training: random trunk, pretrained frozen
        expression encoder, data-initialised output head."""
        X = check_images(X)
        n, input_px = X.shape[0], X.shape[2]
        y, mask = check_grids(y, mask, n_samples=n)
        cfg = self._model_config(y.shape[1], input_px)
        if y.shape[2] != cfg.output_px:
            raise ValueError(
                f"grids of side {y.shape[2]} do not match the model output side {cfg.output_px} "
                f"for {input_px} px inputs"
            )
        with ag.precision(self.precision):
            params = init_params(cfg, self.random_state)
            pretrain_expression_encoder(
                params, y.transpose(0, 2, 3, 1)[mask], self.pretrain_epochs, self.random_state
            )
            init_output_head(params, y, mask, self.random_state)
        self.params_ = params
        self.n_genes_ = cfg.gene_count
        self.input_px_ = input_px
        self.output_px_ = cfg.output_px
        return self

    def fit(self, X, y, mask=None, eval_set=None):
        """Fit on (N, 3, H, W) images in [0, 1] and (N, C, H', W') grids.

        ``mask`` is an (N, H', W') boolean array of measured cells (all valid
        by default). ``eval_set=(X, y, mask)`` tracks held-out MSE per epoch.
        """
        self.init(X, y, mask)
        X = check_images(X)
        y, mask = check_grids(y, mask, n_samples=X.shape[0])
        if eval_set is not None:
            ex = check_images(eval_set[0], input_px=self.input_px_)
            ey, em = check_grids(eval_set[1], eval_set[2] if len(eval_set) > 2 else None,
                                 n_samples=ex.shape[0])
            eval_set = (ex, ey, em)
        with ag.precision(self.precision):
            self.params_, self.log_ = train_arrays(
                self.params_, X, y, mask, self._train_config(), eval_set, self.contrastive
            )
        return self

    def predict(self, X):
        """Predicted (N, C, H', W') expression grids."""
        check_is_fitted(self, "params_")
        X = check_images(X, input_px=self.input_px_)
        dtype = self.params_["out.w"].dtype
        chunks = [X[i:i + self.batch_size] for i in range(0, len(X), self.batch_size)]
        if not chunks:
            return np.zeros((0, self.n_genes_, self.output_px_, self.output_px_), dtype=dtype)

        def run(chunk):
            return forward(self.params_, chunk.astype(dtype, copy=False)).pred

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        return np.concatenate(parts)

    def score(self, X, y, mask=None, sample_weight=None):
        """Aggregate SSIM-ST of the predictions (higher is better)."""
        y, mask = check_grids(y, mask, n_samples=len(X))
        return ssim_st(self.predict(X), y, mask)[1]


class SpotRegressor(RegressorMixin, BaseEstimator):
    """One-to-one baseline: encoder trunk on a patch, global pooling, linear head."""

    def __init__(
        self,
        base_width=8,
        enc_depth=5,
        lr=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        lr_final_fraction=0.01,
        batch_size=8,
        epochs=40,
        precision="f32",
        random_state=0,
    ):
        self.base_width = base_width
        self.enc_depth = enc_depth
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_final_fraction = lr_final_fraction
        self.batch_size = batch_size
        self.epochs = epochs
        self.precision = precision
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, require_pow2=False)
        y = check_spot_targets(y, n_samples=X.shape[0])
        patch = X.shape[2]
        # input_px only has to satisfy the config's divisibility rule here
        cfg = ModelConfig(
            gene_count=y.shape[1],
            input_px=2 ** self.enc_depth,
            base_width=self.base_width,
            enc_depth=self.enc_depth,
            dec_depth=0,
        )
        train_cfg = TrainConfig(
            lr0=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_final_fraction=self.lr_final_fraction, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.random_state,
        )
        with ag.precision(self.precision):
            params = init_spot_params(cfg, patch, self.random_state)
            params.tensors["spot.w"][:] = 0
            params.tensors["spot.b"] = y.mean(axis=0).astype(params["spot.b"].dtype)
            self.params_, self.log_ = train_spots(params, X, y, train_cfg)
        self.patch_px_ = patch
        self.n_genes_ = y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, input_px=self.patch_px_, require_pow2=False)
        out = [spot_forward(self.params_, X[i:i + self.batch_size])[0]
               for i in range(0, len(X), self.batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_genes_))
