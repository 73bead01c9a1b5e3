"""scikit-learn style wrapper around the TEGDetector model."""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, ModelParams, forward, load_checkpoint, save_checkpoint
from .teg import Teg
from .train import TrainConfig, fit_params

logger = logging.getLogger(__name__)

VARIANTS = {
    "TEGDetector": {},
    "TEGDetector_S": {"readout": "sum"},
    "TEGD-ave": {"pooling": "mean"},
    "TEGD-max": {"pooling": "max"},
}


def check_tegs(X, t_slices: Optional[int] = None) -> List[Teg]:
    """Validate a sequence of TEGs sharing one slice count."""
    if isinstance(X, Teg):
        raise TypeError("expected a sequence of Teg objects, got a single Teg")
    tegs = list(X)
    if not tegs:
        raise ValueError("expected at least one TEG")
    for i, t in enumerate(tegs):
        if not isinstance(t, Teg):
            raise TypeError(f"item {i} is {type(t).__name__}, expected Teg")
    counts = {t.t_slices for t in tegs}
    if len(counts) != 1:
        raise ValueError(f"TEGs disagree on slice count: {sorted(counts)}")
    if t_slices is not None and counts != {t_slices}:
        raise ValueError(f"TEGs have {counts.pop()} slices, estimator was fit on {t_slices}")
    return tegs


def check_labels(y, tegs: Sequence[Teg]) -> np.ndarray:
    """Binary labels as an int array; ``None`` reads ``teg.label``."""
    if y is None:
        missing = [i for i, t in enumerate(tegs) if t.label is None]
        if missing:
            raise ValueError(f"no labels given and TEG(s) {missing[:5]} are unlabeled")
        y = [t.label for t in tegs]
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != len(tegs):
        raise ValueError(f"expected {len(tegs)} labels, got shape {y.shape}")
    if not np.isin(y, [0, 1]).all():
        raise ValueError("labels must be 0 (normal) or 1 (phishing)")
    return y.astype(int)


class TEGDetector(ClassifierMixin, BaseEstimator):
    """Dynamic graph classifier over Transaction Evolution Graphs.

    Parameters mirror :class:`~tegdetector.model.ModelConfig` and
    :class:`~tegdetector.train.TrainConfig`. ``max_nodes=None`` sizes the
    pooling layers from the largest training graph.

    Attributes
    ----------
    params_ : ModelParams
    model_config_ : ModelConfig
    loss_curve_ : list of float
    classes_ : ndarray, ``[0, 1]`` (1 = phishing)
    """

    def __init__(
        self,
        hidden_dim: int = 64,
        repr_dim: int = 32,
        pool_levels: int = 2,
        assign_ratio: float = 0.25,
        pooling: str = "cluster",
        readout: str = "time_coeff",
        mlp_hidden: int = 32,
        max_nodes: Optional[int] = None,
        epochs: int = 100,
        learning_rate: float = 1e-3,
        batch_size: int = 16,
        optimizer: str = "adam",
        random_state: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.repr_dim = repr_dim
        self.pool_levels = pool_levels
        self.assign_ratio = assign_ratio
        self.pooling = pooling
        self.readout = readout
        self.mlp_hidden = mlp_hidden
        self.max_nodes = max_nodes
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    @classmethod
    def variant(cls, name: str, **kwargs) -> "TEGDetector":
        """Build a named ablation variant (see ``VARIANTS``)."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**kwargs, **VARIANTS[name]})

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.random_state,
            optimizer=self.optimizer,
        )

    def fit(self, X, y=None):
        tegs = check_tegs(X)
        y = check_labels(y, tegs)
        max_nodes = self.max_nodes or max(t.n for t in tegs)
        self.model_config_ = ModelConfig(
            hidden_dim=self.hidden_dim,
            repr_dim=self.repr_dim,
            pool_levels=self.pool_levels,
            assign_ratio=self.assign_ratio,
            pooling=self.pooling,
            readout=self.readout,
            mlp_hidden=self.mlp_hidden,
            t_slices=tegs[0].t_slices,
            max_nodes=max_nodes,
        )
        self.params_, self.loss_curve_ = fit_params(
            tegs, y, self.model_config_, self._train_config()
        )
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        tegs = check_tegs(X, self.model_config_.t_slices)
        P = self.params_.tensors()
        return np.vstack([forward(t, P, self.model_config_)[0].data for t in tegs])

    def predict(self, X) -> np.ndarray:
        # phishing iff its probability exceeds 0.5
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def score(self, X, y=None, sample_weight=None):
        tegs = check_tegs(X)
        return super().score(tegs, check_labels(y, tegs), sample_weight)

    def time_coefficients(self) -> np.ndarray:
        from .model import time_coefficients

        check_is_fitted(self, "params_")
        return time_coefficients(self.params_, self.model_config_)

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.model_config_,
                        {"estimator": self.get_params(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "TEGDetector":
        params, config, extra = load_checkpoint(path)
        est = cls(**extra.get("estimator", {}))
        est.params_ = params
        est.model_config_ = config
        est.loss_curve_ = []
        est.classes_ = np.array([0, 1])
        return est

    @classmethod
    def from_params(cls, params: ModelParams, config: ModelConfig) -> "TEGDetector":
        est = cls(
            hidden_dim=config.hidden_dim, repr_dim=config.repr_dim,
            pool_levels=config.pool_levels, assign_ratio=config.assign_ratio,
            pooling=config.pooling, readout=config.readout,
            mlp_hidden=config.mlp_hidden, max_nodes=config.max_nodes,
        )
        est.params_ = params
        est.model_config_ = config
        est.loss_curve_ = []
        est.classes_ = np.array([0, 1])
        return est
