"""Estimator wrapper around the fusion model for scikit-learn style use."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import TrainConfig, load_checkpoint, save_checkpoint
from .synthetic import SceneDataset
from .training import decode_all, evaluate, predict_heatmaps, train, triangulate_all

_CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


def _check_dataset(X) -> SceneDataset:
    if not isinstance(X, SceneDataset):
        raise TypeError(f"expected a SceneDataset, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("dataset has no frames")
    if X.rig.n_views < 2:
        raise ValueError("fusion needs at least two views")
    return X


class TransFusionEstimator(BaseEstimator):
    """Two-view fusion pose estimator.

    Every :class:`TrainConfig` field is a constructor parameter, so
    ``get_params``/``set_params``/``clone`` work as usual. ``fit`` takes a
    :class:`SceneDataset`; ``predict`` returns triangulated 3D joints.

    Attributes
    ----------
    model_ : TransFusionNet
    history_ : list of dict
        Per-epoch training log; row 0 is the initial probe loss.
    """

    def __init__(
        self,
        d=32,
        heads=4,
        layers=3,
        d_ff=64,
        d_head=32,
        joints=8,
        channels=3,
        image_size=128,
        patch=8,
        epochs=6,
        lr=1e-3,
        milestones=(4, 5),
        lr_decay=0.1,
        batch_size=8,
        gamma=10.0,
        seed=0,
        pe_mode="full",
        cross_view=True,
        lpos_weight=1.0,
        decode="gaussian",
    ):
        self.d = d
        self.heads = heads
        self.layers = layers
        self.d_ff = d_ff
        self.d_head = d_head
        self.joints = joints
        self.channels = channels
        self.image_size = image_size
        self.patch = patch
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.gamma = gamma
        self.seed = seed
        self.pe_mode = pe_mode
        self.cross_view = cross_view
        self.lpos_weight = lpos_weight
        self.decode = decode

    @classmethod
    def from_config(cls, config: TrainConfig, **kw) -> "TransFusionEstimator":
        return cls(**{k: getattr(config, k) for k in _CONFIG_KEYS}, **kw)

    def to_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_KEYS})

    def fit(self, X, y=None, csv_path=None):
        """Train on every frame of ``X``; ``y`` is ignored (targets live in the dataset)."""
        X = _check_dataset(X)
        self.model_, self.history_ = train(self.to_config(), X, csv_path=csv_path)
        return self

    def predict_heatmaps(self, X) -> np.ndarray:
        """Heatmaps of shape (F, V, k, H/4, W/4)."""
        check_is_fitted(self, "model_")
        return predict_heatmaps(self.model_, _check_dataset(X))

    def predict_2d(self, X) -> np.ndarray:
        """Decoded joints of shape (F, V, k, 2)."""
        return decode_all(self.predict_heatmaps(X), self.decode)

    def predict(self, X) -> np.ndarray:
        """Triangulated joints of shape (F, k, 3) in world units."""
        X = _check_dataset(X)
        return triangulate_all(X.rig.cameras, self.predict_2d(X))

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, _check_dataset(X), self.decode)

    def score(self, X, y=None) -> float:
        """Negative MPJPE, so that larger is better."""
        return -self.evaluate(X).mpjpe_mean

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)

    @classmethod
    def load(cls, path, **kw) -> "TransFusionEstimator":
        model = load_checkpoint(path)
        est = cls.from_config(model.config, **kw)
        est.model_ = model
        est.history_ = []
        return est
