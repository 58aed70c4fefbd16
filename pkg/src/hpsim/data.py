"""Seeded synthetic classification data (Gaussian blobs shaped like images)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from hpsim.exceptions import ConfigurationError

GENERATORS = ("gaussian_blobs",)


@dataclass(frozen=True)
class DatasetSpec:
    """``separation`` is the expected distance between two class means, in units of the noise std."""

    num_examples: int = 512
    input_shape: tuple[int, int, int] = (3, 8, 8)
    num_classes: int = 10
    seed: int = 0
    generator: str = "gaussian_blobs"
    separation: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_examples < 0:
            raise ConfigurationError("num_examples must be non-negative")
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"unknown generator {self.generator!r}")
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must have 3 entries, got {self.input_shape}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"malformed dataset spec: {exc}") from exc


def generate(spec: DatasetSpec, precision: str = "double") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(inputs, one_hot_targets)``; classes are balanced to within one example.

    Each class mean is a Gaussian direction rescaled to norm
    ``separation / sqrt(2)``; examples add unit-variance noise.
    """
    rng = np.random.default_rng(spec.seed)
    dim = int(np.prod(spec.input_shape))
    means = rng.standard_normal((spec.num_classes, dim))
    means *= (spec.separation / np.sqrt(2.0)) / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(spec.num_examples) % spec.num_classes)
    inputs = means[labels] + rng.standard_normal((spec.num_examples, dim))
    targets = np.zeros((spec.num_examples, spec.num_classes))
    targets[np.arange(spec.num_examples), labels] = 1.0
    dtype = np.float32 if precision == "single" else np.float64
    return inputs.reshape((spec.num_examples, *spec.input_shape)).astype(dtype), targets.astype(dtype)


def epoch_batches(num_examples: int, step_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield disjoint index blocks of ``step_size`` covering a fresh permutation.

    Every example appears at most once per epoch; when ``num_examples`` is
    not a multiple of ``step_size`` the trailing remainder of the
    permutation is skipped for that epoch.
    """
    if step_size < 1 or step_size > num_examples:
        raise ConfigurationError(f"step size {step_size} does not fit {num_examples} examples")
    order = np.random.default_rng([seed, epoch]).permutation(num_examples)
    for start in range(0, num_examples - step_size + 1, step_size):
        yield order[start : start + step_size]
