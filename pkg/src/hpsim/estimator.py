"""scikit-learn compatible classifier trained by the simulated hybrid-parallel cluster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelBinarizer
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from hpsim import tensor as T
from hpsim.cluster import Cluster, ClusterConfig
from hpsim.data import epoch_batches
from hpsim.exceptions import ConfigurationError
from hpsim.model import ConvLayer, FCLayer, ModelSpec, forward, init_model
from hpsim.optimizer import HyperParams, lr_at


def _as_images(X: np.ndarray, input_shape) -> np.ndarray:
    if X.ndim == 2:
        if input_shape is None:
            raise ConfigurationError("2-D input needs input_shape=(C, H, W)")
        if X.shape[1] != int(np.prod(input_shape)):
            raise ConfigurationError(f"{X.shape[1]} features do not reshape to {tuple(input_shape)}")
        return X.reshape((X.shape[0], *input_shape))
    if X.ndim != 4:
        raise ConfigurationError(f"expected N x C x H x W or N x features input, got {X.ndim}-D")
    return X


class HybridParallelClassifier(ClassifierMixin, BaseEstimator):
    """Conv net classifier trained with simulated hybrid data/model-parallel SGD.

    Parameters
    ----------
    model_spec : ModelSpec or dict, optional
        Architecture; its last FC layer must have one unit per class.  By
        default a single 3x3 conv layer (``conv_channels`` filters, padding 1)
        feeds one output layer.
    input_shape : tuple of int, optional
        ``(C, H, W)``; required when ``X`` is passed flattened.
    n_workers, per_worker_batch, scheme, variable_batch
        Simulated cluster layout, see :class:`hpsim.cluster.ClusterConfig`.
    learning_rate, momentum, weight_decay
        Momentum SGD settings.
    n_steps : int
        Optimizer steps; the learning rate follows the stepwise schedule
        over this horizon.
    precision : {"single", "double"}
    random_state : int
        Seeds both the weights and the minibatch order.
    """

    def __init__(
        self,
        model_spec=None,
        input_shape=None,
        conv_channels=4,
        n_workers=2,
        per_worker_batch=8,
        scheme="B",
        variable_batch=False,
        learning_rate=0.05,
        momentum=0.9,
        weight_decay=0.0005,
        n_steps=200,
        precision="double",
        init_std=0.01,
        random_state=0,
    ):
        self.model_spec = model_spec
        self.input_shape = input_shape
        self.conv_channels = conv_channels
        self.n_workers = n_workers
        self.per_worker_batch = per_worker_batch
        self.scheme = scheme
        self.variable_batch = variable_batch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.precision = precision
        self.init_std = init_std
        self.random_state = random_state

    def _build_spec(self, image_shape, n_classes) -> ModelSpec:
        if isinstance(self.model_spec, ModelSpec):
            spec = self.model_spec
        elif isinstance(self.model_spec, dict):
            spec = ModelSpec.from_dict(self.model_spec)
        else:
            c, h, w = image_shape
            spec = ModelSpec(
                input_shape=image_shape,
                conv_layers=(ConvLayer(c, self.conv_channels, 3, stride=1, pad=1, relu=True),),
                fc_layers=(FCLayer(self.conv_channels * h * w, n_classes),),
            )
        if spec.input_shape != tuple(image_shape):
            raise ConfigurationError(f"model input {spec.input_shape} != data shape {tuple(image_shape)}")
        if spec.num_classes != n_classes:
            raise ConfigurationError(f"model has {spec.num_classes} outputs for {n_classes} classes")
        return spec

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _as_images(X, self.input_shape)
        self._binarizer = LabelBinarizer()
        Y = self._binarizer.fit_transform(y)
        if Y.shape[1] == 1:
            Y = np.hstack([1 - Y, Y])
        self.classes_ = self._binarizer.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        dtype = T.dtype_for(self.precision)
        self.spec_ = self._build_spec(tuple(X.shape[1:]), len(self.classes_))
        config = ClusterConfig(
            self.n_workers, self.per_worker_batch, self.scheme, self.variable_batch, self.precision, self.random_state
        )
        hp = HyperParams(lr=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay)
        step_size = self.n_workers * self.per_worker_batch
        if X.shape[0] < step_size:
            raise ValueError(f"need at least n_workers * per_worker_batch = {step_size} samples, got {X.shape[0]}")
        model = init_model(self.spec_, self.random_state, self.precision, std=self.init_std)
        cluster = Cluster(model, config, hp)
        X = X.astype(dtype)
        Y = Y.astype(dtype)
        self.loss_curve_ = []
        self.bytes_sent_ = {}
        step, epoch = 0, 0
        while step < self.n_steps:
            for idx in epoch_batches(X.shape[0], step_size, self.random_state, epoch):
                if step >= self.n_steps:
                    break
                lr = lr_at(step / self.n_steps, self.learning_rate)
                result = cluster.run_step(X[idx], Y[idx], lr)
                self.loss_curve_.append(result.loss)
                step += 1
            epoch += 1
        self.model_ = cluster.gather_model()
        self.bytes_sent_ = {k: sum(w[k] for w in cluster.bytes_sent()) for k in cluster.bytes_sent()[0]}
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        X = _as_images(X, self.input_shape).astype(T.dtype_for(self.precision))
        return forward(self.model_, X).logits

    def predict_proba(self, X):
        """Independent per-class sigmoid outputs, renormalized to sum to one per row."""
        p = T.sigmoid(self.decision_function(X))
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
