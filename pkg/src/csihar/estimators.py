"""scikit-learn compatible wrappers around the preprocessing pipeline and models.

Inputs are 3-D arrays ``[n_samples, channels, time]``.  The classifiers
accept an explicit validation set for early stopping; without one, a
stratified fraction of the training data is held out.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from csihar.data import CsiSample, Dataset, stratified_split
from csihar.errors import ConfigError, ShapeError
from csihar.models.core import BiLstmSpec, CnnGruSpec, ConvBlock, ModelConfig, build_model
from csihar.pipeline import DATASET_STEPS, Pipeline
from csihar.training import TrainConfig, train


def check_csi_array(X, name: str = "X", shape: Optional[tuple] = None) -> np.ndarray:
    """Validate a finite ``[n, channels, time]`` array and return it as float64."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 3-D [samples, channels, time], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} holds no samples")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ShapeError(f"{name} samples have shape {arr.shape[1:]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_labels(y, n: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ShapeError(f"y must be 1-D with {n} entries, got shape {arr.shape}")
    return arr


class CsiPreprocessor(TransformerMixin, BaseEstimator):
    """Per-sample preprocessing steps as a stateless transformer.

    ``steps`` is a list of step objects such as ``{"step": "highpass"}``.
    Steps that change the number of samples (sliding windows) are not
    allowed here because a transformer must keep rows aligned with labels.
    """

    def __init__(self, steps=None):
        self.steps = steps

    def fit(self, X, y=None):
        X = check_csi_array(X)
        pipe = Pipeline(self.steps or [])
        if pipe.expands:
            names = [s.name for s in pipe.steps if s.name in DATASET_STEPS]
            raise ConfigError(f"{names} change the sample count; use Pipeline.apply_dataset",
                              "steps")
        self.pipeline_ = pipe
        self.n_features_in_ = X.shape[1]
        self.input_shape_ = X.shape[1:]
        self.output_shape_ = pipe.output_shape(self.input_shape_)
        return self

    def transform(self, X):
        check_is_fitted(self, "pipeline_")
        X = check_csi_array(X, shape=self.input_shape_)
        return np.stack([self.pipeline_.apply_sample(x) for x in X]).astype(np.float64)


class _RecurrentClassifier(ClassifierMixin, BaseEstimator):
    _kind = ""

    def _model_specs(self) -> dict:
        raise NotImplementedError

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, early_stop_patience=self.patience,
                           min_delta=self.min_delta, seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_csi_array(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        index = {c: i for i, c in enumerate(self.classes_)}
        codes = np.array([index[c] for c in y])
        train_samples = [CsiSample(x.astype(np.float32), int(c), f"train-{i}")
                         for i, (x, c) in enumerate(zip(X, codes))]
        if X_val is not None:
            X_val = check_csi_array(X_val, "X_val", X.shape[1:])
            y_val = check_labels(y_val, X_val.shape[0])
            unknown = set(np.unique(y_val)) - set(self.classes_)
            if unknown:
                raise ValueError(f"y_val has labels {sorted(unknown)} absent from y")
            val_samples = [CsiSample(x.astype(np.float32), index[c], f"val-{i}")
                           for i, (x, c) in enumerate(zip(X_val, y_val))]
        else:
            parts = stratified_split(train_samples, {"train": 1.0 - self.validation_fraction,
                                                     "val": self.validation_fraction},
                                     self.random_state)
            train_samples, val_samples = parts["train"], parts["val"]
        dataset = Dataset(name="estimator", classes=tuple(str(c) for c in self.classes_),
                          splits={"train": train_samples, "val": val_samples}, shape=X.shape[1:])
        config = ModelConfig(kind=self._kind, input_shape=X.shape[1:],
                             n_classes=len(self.classes_), seed=self.random_state,
                             **self._model_specs())
        self.model_ = build_model(config)
        _, self.history_ = train(self.model_, dataset, self._train_config())
        self.n_features_in_ = X.shape[1]
        self.input_shape_ = X.shape[1:]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_csi_array(X, shape=self.input_shape_)
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class BiLSTMClassifier(_RecurrentClassifier):
    """Stacked bidirectional LSTM classifier."""

    _kind = "bilstm"

    def __init__(self, layers=3, hidden=128, learning_rate=0.001, batch_size=32,
                 max_epochs=50, patience=10, min_delta=1e-6, validation_fraction=0.2,
                 random_state=0):
        self.layers = layers
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_specs(self) -> dict:
        return {"bilstm": BiLstmSpec(layers=self.layers, hidden=self.hidden)}


class CnnGruClassifier(_RecurrentClassifier):
    """1-D convolution blocks followed by a GRU."""

    _kind = "cnn_gru"

    def __init__(self, blocks=None, padding="same", gru_hidden=128, gru_layers=1,
                 learning_rate=0.001, batch_size=32, max_epochs=50, patience=10,
                 min_delta=1e-6, validation_fraction=0.2, random_state=0):
        self.blocks = blocks
        self.padding = padding
        self.gru_hidden = gru_hidden
        self.gru_layers = gru_layers
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_specs(self) -> dict:
        kw = {"padding": self.padding, "gru_hidden": self.gru_hidden,
              "gru_layers": self.gru_layers}
        if self.blocks is not None:
            kw["blocks"] = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b)
                                 for b in self.blocks)
        return {"cnn_gru": CnnGruSpec(**kw)}
