"""scikit-learn compatible front end for the grid transformer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import central_sample
from .evaluation import stratified_holdout
from .interpret import explain_stack
from .model import ModelConfig, forward_classify, predict_proba
from .training import TrainConfig, fit
from .validation import as_records


class GridViTClassifier(ClassifierMixin, BaseEstimator):
    """Three-grade classifier over paired T1/T2 volumes.

    ``X`` is either an array of shape (n_cases, 2, depth, H, W), T1 first, or a
    list of :class:`~gridvit.data.ScanRecord`. Volumes are min-max normalised
    per case. Training uses every k-slice window; prediction uses the central
    window.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`; slice
    extents are taken from the data at fit time.
    """

    def __init__(self, mode="early", k=9, patch_size=16, embed_dim=192, layers=6, heads=3,
                 mlp_ratio=4, lr=0.003, batch_size=8, epochs=100, augment=True,
                 val_fraction=0.2, stride=1, random_state=0):
        self.mode = mode
        self.k = k
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.layers = layers
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment = augment
        self.val_fraction = val_fraction
        self.stride = stride
        self.random_state = random_state

    def _configs(self, records):
        _, h, w = records[0].t1.extents
        model_cfg = ModelConfig.for_mode(
            self.mode, k=self.k, slice_h=h, slice_w=w, patch_size=self.patch_size,
            embed_dim=self.embed_dim, layers=self.layers, heads=self.heads,
            mlp_ratio=self.mlp_ratio,
        )
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                                seed=self.random_state, augment=self.augment,
                                val_fraction=self.val_fraction, stride=self.stride)
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        records = as_records(X, y)
        model_cfg, train_cfg = self._configs(records)
        train, val = stratified_holdout(records, train_cfg.val_fraction, seed=train_cfg.seed)
        self.params_, self.train_log_ = fit(train, val, model_cfg, train_cfg)
        self.config_ = model_cfg
        self.classes_ = np.arange(model_cfg.num_classes)
        return self

    def _images(self, X):
        check_is_fitted(self, "params_")
        records = as_records(X)
        return np.stack([central_sample(r, self.config_.k, self.config_.modalities).image
                         for r in records])

    def predict_proba(self, X):
        return predict_proba(self._images(X), self.params_, self.config_)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def explain(self, X):
        """Attention-rollout class maps, one :class:`ClassMap` per case."""
        cfg = self.config_
        maps = []
        for image in self._images(X):
            _, stack = forward_classify(image, self.params_, cfg, record=True)
            maps.append(explain_stack(stack, cfg.grid_h, cfg.grid_w, cfg.patch_size))
        return maps

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.config_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "GridViTClassifier":
        params, cfg = load_checkpoint(path)
        est = cls(mode=cfg.mode, k=cfg.k, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim,
                  layers=cfg.layers, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
        est.params_, est.config_ = params, cfg
        est.classes_ = np.arange(cfg.num_classes)
        return est
