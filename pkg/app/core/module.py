from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.core import ops
from app.core.exceptions import CheckpointError
from app.core.tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data: Any):
        super().__init__(data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


def _walk(prefix: str, value: Any) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{prefix}.")
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(f"{prefix}.{index}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(f"{prefix}.{key}", item)


class Module:
    """Container whose public attributes hold parameters and sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"Parameter mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise CheckpointError(f"{name}: stored shape {state[name].shape} != model shape {p.shape}")
            p.assign(state[name])


def component_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator per model component, stable under adding components."""
    return np.random.default_rng([seed, *path])


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: Optional[np.random.Generator] = None,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
        zero_init: bool = False
    ):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init or rng is None:
            weight = np.zeros(shape)
        else:
            weight = he_normal(rng, shape)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias,
            stride=self.stride, padding=self.padding, dilation=self.dilation
        )
