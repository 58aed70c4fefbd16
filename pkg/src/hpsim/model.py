"""Two-part network description: a convolutional stack followed by a fully connected stack.

Parameters are kept as flat lists ``[W0, b0, W1, b1, ...]`` per part.
Convolution kernels have shape ``F x C x R x S``; fully connected weights
have shape ``in_dim x out_dim`` so a layer computes ``x @ W + b``.

The last convolutional output (``B x F x H x W``) is flattened channel-major,
row-major (``reshape(B, -1)``).  That flattened tensor is what workers
exchange at the boundary between the data-parallel and model-parallel parts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from hpsim import tensor as T
from hpsim.exceptions import ConfigurationError, DimensionError, UsageError


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    relu: bool = True


@dataclass(frozen=True)
class FCLayer:
    in_dim: int
    out_dim: int
    relu: bool = False


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    conv_layers: tuple[ConvLayer, ...]
    fc_layers: tuple[FCLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        object.__setattr__(self, "fc_layers", tuple(self.fc_layers))
        self.validate()

    @property
    def num_classes(self) -> int:
        return self.fc_layers[-1].out_dim

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Activation shape (C, H, W) entering each conv layer, plus the final output."""
        shapes = [self.input_shape]
        c, h, w = self.input_shape
        for i, layer in enumerate(self.conv_layers):
            if layer.in_channels != c:
                raise ConfigurationError(
                    f"conv_layers[{i}].in_channels={layer.in_channels}, expected {c}"
                )
            h = T.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
            w = T.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
            c = layer.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, h, w = self.conv_shapes()[-1]
        return c * h * w

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be 3 positive ints, got {self.input_shape}")
        if not self.conv_layers or not self.fc_layers:
            raise ConfigurationError("need at least one conv layer and one fc layer")
        for i, layer in enumerate(self.conv_layers):
            if min(layer.in_channels, layer.out_channels, layer.kernel, layer.stride) < 1 or layer.pad < 0:
                raise ConfigurationError(f"conv_layers[{i}] has non-positive geometry: {layer}")
        dim = self.flat_dim
        for i, layer in enumerate(self.fc_layers):
            if layer.in_dim != dim:
                raise ConfigurationError(f"fc_layers[{i}].in_dim={layer.in_dim}, expected {dim}")
            if layer.out_dim < 1:
                raise ConfigurationError(f"fc_layers[{i}].out_dim must be positive")
            dim = layer.out_dim
        if self.fc_layers[-1].relu:
            raise ConfigurationError("the output fc layer feeds logistic units and cannot use relu")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_layers": [asdict(layer) for layer in self.conv_layers],
            "fc_layers": [asdict(layer) for layer in self.fc_layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            spec = cls(
                input_shape=tuple(d["input_shape"]),
                conv_layers=tuple(ConvLayer(**layer) for layer in d["conv_layers"]),
                fc_layers=tuple(FCLayer(**layer) for layer in d["fc_layers"]),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model spec: {exc}") from exc
        if "num_classes" in d and d["num_classes"] != spec.num_classes:
            raise ConfigurationError(
                f"num_classes={d['num_classes']} but last fc out_dim={spec.num_classes}"
            )
        return spec


def toy_spec() -> ModelSpec:
    """One 3->4 conv (3x3, pad 1) on 3x8x8 inputs and a 256->10 output layer: 2682 parameters."""
    return ModelSpec(
        input_shape=(3, 8, 8),
        conv_layers=(ConvLayer(3, 4, 3, stride=1, pad=1, relu=True),),
        fc_layers=(FCLayer(256, 10),),
    )


def alexnet_like_spec() -> ModelSpec:
    """Stand-in for the single-column ImageNet model.

    Filter counts 64/192/384/384/256 and FC widths 4096/4096/1000 match the
    classic network; the geometry (227x227 input, strides instead of
    pooling) is chosen here so the conv stack ends at 256x6x6.
    """
    return ModelSpec(
        input_shape=(3, 227, 227),
        conv_layers=(
            ConvLayer(3, 64, 11, stride=4, pad=0),
            ConvLayer(64, 192, 5, stride=2, pad=1),
            ConvLayer(192, 384, 3, stride=2, pad=0),
            ConvLayer(384, 384, 3, stride=1, pad=1),
            ConvLayer(384, 256, 3, stride=2, pad=0),
        ),
        fc_layers=(
            FCLayer(9216, 4096, relu=True),
            FCLayer(4096, 4096, relu=True),
            FCLayer(4096, 1000),
        ),
    )


@dataclass
class Model:
    spec: ModelSpec
    conv_params: list[np.ndarray]
    fc_params: list[np.ndarray]
    rng_seed: int = 0

    @property
    def precision(self) -> str:
        return T.precision_of(self.conv_params[0])

    @property
    def params(self) -> list[np.ndarray]:
        return self.conv_params + self.fc_params

    def param_names(self) -> list[str]:
        names = []
        for part, layers in (("conv", self.spec.conv_layers), ("fc", self.spec.fc_layers)):
            for i in range(len(layers)):
                names += [f"{part}{i}.weight", f"{part}{i}.bias"]
        return names

    def copy(self) -> "Model":
        return Model(
            self.spec,
            [p.copy() for p in self.conv_params],
            [p.copy() for p in self.fc_params],
            self.rng_seed,
        )


def param_shapes(spec: ModelSpec) -> tuple[list[tuple], list[tuple]]:
    conv = []
    for layer in spec.conv_layers:
        conv += [(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), (layer.out_channels,)]
    fc = []
    for layer in spec.fc_layers:
        fc += [(layer.in_dim, layer.out_dim), (layer.out_dim,)]
    return conv, fc


def init_model(spec: ModelSpec, seed: int = 0, precision: str = "double", std: float = 0.01) -> Model:
    """Gaussian(0, std) weights and zero biases, drawn in layer order from ``seed``."""
    spec.validate()
    dtype = T.dtype_for(precision)
    rng = np.random.default_rng(seed)
    conv_shapes, fc_shapes = param_shapes(spec)

    def draw(shapes):
        out = []
        for i, shape in enumerate(shapes):
            if i % 2 == 0:
                out.append((rng.standard_normal(shape) * std).astype(dtype))
            else:
                out.append(np.zeros(shape, dtype=dtype))
        return out

    conv = draw(conv_shapes)
    fc = draw(fc_shapes)
    return Model(spec, conv, fc, seed)


@dataclass
class ActivationCache:
    spec: ModelSpec
    conv_inputs: list[np.ndarray]
    conv_pre: list[np.ndarray]
    flat: np.ndarray
    fc_inputs: list[np.ndarray]
    fc_pre: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.fc_pre[-1]


@dataclass
class Gradients:
    conv: list[np.ndarray]
    fc: list[np.ndarray]
    loss: float = float("nan")
    grad_flat: np.ndarray | None = field(default=None, repr=False)

    @property
    def all(self) -> list[np.ndarray]:
        return self.conv + self.fc


def conv_stack_forward(spec: ModelSpec, conv_params: list[np.ndarray], x: np.ndarray):
    """Run the conv stack; returns ``(flat, inputs, pre_activations)``."""
    inputs, pres = [], []
    a = x
    for i, layer in enumerate(spec.conv_layers):
        w, b = conv_params[2 * i], conv_params[2 * i + 1]
        inputs.append(a)
        z = T.conv2d_forward(a, w, layer.stride, layer.pad) + b[None, :, None, None]
        pres.append(z)
        a = T.relu(z) if layer.relu else z
    return a.reshape(a.shape[0], -1), inputs, pres


def conv_stack_backward(
    spec: ModelSpec,
    conv_params: list[np.ndarray],
    inputs: list[np.ndarray],
    pres: list[np.ndarray],
    grad_flat: np.ndarray,
) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * len(conv_params)
    g = grad_flat.reshape(pres[-1].shape)
    for i in reversed(range(len(spec.conv_layers))):
        layer = spec.conv_layers[i]
        if layer.relu:
            g = T.relu_backward(pres[i], g)
        grads[2 * i + 1] = g.sum(axis=(0, 2, 3))
        g, grads[2 * i] = T.conv2d_backward(inputs[i], conv_params[2 * i], g, layer.stride, layer.pad)
    return grads


def fc_stack_forward(spec: ModelSpec, fc_params: list[np.ndarray], flat: np.ndarray):
    inputs, pres = [], []
    a = flat
    for i, layer in enumerate(spec.fc_layers):
        inputs.append(a)
        z = T.matmul(a, fc_params[2 * i]) + fc_params[2 * i + 1]
        pres.append(z)
        a = T.relu(z) if layer.relu else z
    return inputs, pres


def fc_stack_backward(
    spec: ModelSpec,
    fc_params: list[np.ndarray],
    inputs: list[np.ndarray],
    pres: list[np.ndarray],
    grad_logits: np.ndarray,
) -> tuple[list[np.ndarray], np.ndarray]:
    grads: list[np.ndarray] = [None] * len(fc_params)
    g = grad_logits
    for i in reversed(range(len(spec.fc_layers))):
        if spec.fc_layers[i].relu:
            g = T.relu_backward(pres[i], g)
        grads[2 * i] = T.matmul(inputs[i].T, g)
        grads[2 * i + 1] = g.sum(axis=0)
        g = T.matmul(g, fc_params[2 * i].T)
    return grads, g


def forward(model: Model, batch: np.ndarray) -> ActivationCache:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.spec.input_shape:
        raise DimensionError(f"batch shape {batch.shape} does not match input {model.spec.input_shape}")
    flat, conv_in, conv_pre = conv_stack_forward(model.spec, model.conv_params, batch)
    fc_in, fc_pre = fc_stack_forward(model.spec, model.fc_params, flat)
    return ActivationCache(model.spec, conv_in, conv_pre, flat, fc_in, fc_pre)


def backward(model: Model, cache: ActivationCache, targets: np.ndarray) -> Gradients:
    """Batch-mean gradients of the logistic cross-entropy for every parameter."""
    if cache.spec != model.spec or cache.conv_inputs[0].dtype != model.conv_params[0].dtype:
        raise UsageError("activation cache was not produced by this model")
    loss, grad_logits = T.logistic_xent(cache.logits, targets)
    fc_grads, grad_flat = fc_stack_backward(model.spec, model.fc_params, cache.fc_inputs, cache.fc_pre, grad_logits)
    conv_grads = conv_stack_backward(model.spec, model.conv_params, cache.conv_inputs, cache.conv_pre, grad_flat)
    return Gradients(conv_grads, fc_grads, loss, grad_flat)


def loss(model: Model, batch: np.ndarray, targets: np.ndarray) -> float:
    return T.logistic_xent(forward(model, batch).logits, targets)[0]


@dataclass(frozen=True)
class ModelStats:
    conv_params: int
    fc_params: int
    conv_flops: int
    fc_flops: int
    last_conv_activation_size: int
    conv_layer_flops: tuple[int, ...] = ()
    fc_layer_flops: tuple[int, ...] = ()

    @property
    def total_params(self) -> int:
        return self.conv_params + self.fc_params

    @property
    def total_flops(self) -> int:
        return self.conv_flops + self.fc_flops


def count_stats(spec: ModelSpec) -> ModelStats:
    """Parameter counts and forward FLOPs per example (2 FLOPs per multiply-accumulate)."""
    spec.validate()
    shapes = spec.conv_shapes()
    conv_params = conv_flops = 0
    conv_layer_flops = []
    for layer, (_, h, w) in zip(spec.conv_layers, shapes[1:]):
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        conv_params += layer.out_channels * fan_in + layer.out_channels
        flops = 2 * h * w * layer.out_channels * fan_in
        conv_layer_flops.append(flops)
        conv_flops += flops
    fc_params = fc_flops = 0
    fc_layer_flops = []
    for layer in spec.fc_layers:
        fc_params += layer.in_dim * layer.out_dim + layer.out_dim
        fc_layer_flops.append(2 * layer.in_dim * layer.out_dim)
        fc_flops += fc_layer_flops[-1]
    return ModelStats(
        conv_params,
        fc_params,
        conv_flops,
        fc_flops,
        spec.flat_dim,
        tuple(conv_layer_flops),
        tuple(fc_layer_flops),
    )
