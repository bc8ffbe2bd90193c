"""scikit-learn style front end: ``BuildingSegmenter().fit(X, y).predict(X)``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_masks
from .augmentation import AugmentationPolicy, LinearRamp
from .config import ModelConfig, TrainConfig
from .losses import LossConfig
from .metrics import MetricReport
from .models import load_checkpoint, save_checkpoint
from .trainer import evaluate_arrays, fit_arrays, model_from_config, predict_proba
from .tta import TtaPlan, preset


class BuildingSegmenter(BaseEstimator):
    """Binary building segmentation with U-Net++ or DeepLabV3+.

    ``X`` is a uint8 array of RGB tiles, shape (n, height, width, 3); ``y`` holds the
    matching 0/1 building masks, shape (n, height, width). Height and width must be
    multiples of 32.

    Parameters
    ----------
    encoder, variant, width_multiplier : encoder family ("vgg", "resnet",
        "efficientnet", "mobilenet"), its depth/index and a channel scale.
    decoder : "unetpp" or "deeplabv3plus".
    loss : "dice", "weighted_dice", "tversky" or "focal_tversky"; ``alpha``,
        ``beta``, ``gamma``, ``epsilon`` and ``class_weights`` configure it.
    augment : apply training-time augmentation with probability ``apply_probability``.
    validation_fraction : share of ``X`` held out for model selection when no
        explicit validation set is passed to :meth:`fit`.
    tta : None, a preset name ("method1", "method2", "method3", "multiscale") or a
        :class:`~bldseg.tta.TtaPlan` used by :meth:`predict_proba`.
    """

    def __init__(
        self,
        encoder="vgg",
        variant="16",
        width_multiplier=1.0,
        decoder="unetpp",
        loss="weighted_dice",
        alpha=0.5,
        beta=0.5,
        gamma=4.0 / 3.0,
        epsilon=1.0,
        class_weights=(0.3, 0.7),
        batch_size=8,
        learning_rate=1e-4,
        max_epochs=20,
        augment=True,
        apply_probability=0.5,
        validation_fraction=0.1,
        threshold=0.5,
        tta=None,
        random_state=0,
    ):
        self.encoder = encoder
        self.variant = variant
        self.width_multiplier = width_multiplier
        self.decoder = decoder
        self.loss = loss
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.epsilon = epsilon
        self.class_weights = class_weights
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.augment = augment
        self.apply_probability = apply_probability
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.tta = tta
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        loss = LossConfig(
            kind=self.loss,
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            epsilon=self.epsilon,
            class_weights=tuple(self.class_weights),
        )
        policy = None
        if self.augment:
            policy = AugmentationPolicy(
                apply_probability=self.apply_probability, schedule=LinearRamp(epoch_max=self.max_epochs)
            )
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            seed=int(self.random_state or 0),
            threshold=self.threshold,
            loss=loss,
            augmentation=policy,
        )

    def _tta_plan(self) -> TtaPlan | None:
        if self.tta is None or isinstance(self.tta, TtaPlan):
            return self.tta
        return preset(self.tta)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, multiple=32)
        y = check_masks(y, X)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X)))) if len(X) > 1 else 0
            val_idx, train_idx = order[:n_val], order[n_val:]
            if n_val == 0:
                val_idx = train_idx
            X_val, y_val, X, y = X[val_idx], y[val_idx], X[train_idx], y[train_idx]
        else:
            X_val = check_images(X_val, multiple=32)
            y_val = check_masks(y_val, X_val)

        config = self._train_config()
        model_cfg = ModelConfig(
            encoder=self.encoder, variant=str(self.variant), width_multiplier=self.width_multiplier, decoder=self.decoder
        )
        self.model_ = model_from_config(model_cfg, seed=config.seed)
        self.history_ = fit_arrays(self.model_, X, y, X_val, y_val, config)
        self.tile_shape_ = X.shape[1:3]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Building probability per pixel, shape (n, height, width)."""
        check_is_fitted(self, "model_")
        X = check_images(X, multiple=self.model_.required_multiple)
        return predict_proba(self.model_, X, self.batch_size, self._tta_plan())

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def evaluate(self, X, y, aggregation: str = "micro") -> MetricReport:
        check_is_fitted(self, "model_")
        X = check_images(X, multiple=self.model_.required_multiple)
        y = check_masks(y, X)
        return evaluate_arrays(self.model_, X, y, self._tta_plan(), self.threshold, aggregation, self.batch_size)

    def score(self, X, y) -> float:
        """Mean IoU over the building and background classes."""
        return self.evaluate(X, y).miou

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path, {"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "BuildingSegmenter":
        model, meta = load_checkpoint(path)
        params = meta.get("estimator_params", {})
        if "class_weights" in params:
            params["class_weights"] = tuple(params["class_weights"])
        est = cls(**params)
        est.model_ = model
        return est
