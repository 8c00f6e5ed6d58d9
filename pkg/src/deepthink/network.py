"""Deep-thinking network: input transform, weight-tied recurrence, two readouts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .cells import CELLS
from .errors import ConfigError, ShapeError
from .ndtensor import (
    ConvParams,
    Module,
    Tensor,
    as_tensor,
    conv2d,
    global_avg_pool,
    glorot_uniform,
    linear,
    relu,
    softmax_cross_entropy,
)

NUM_ROTATIONS = 4
CELL_KINDS = ("ligru", "gru", "recall", "feedforward")


@dataclass
class NetConfig:
    channels: int = 128
    t_train: int = 30
    t_test: int = 100
    cell_kind: str = "ligru"
    num_classes: int = 10
    downsample: str = "none"
    input_channels: int = 3
    recall_depth: int = 2
    ff_depth: int = 4
    act: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        if self.downsample not in ("none", "stride2"):
            raise ConfigError(f"downsample must be 'none' or 'stride2', got {self.downsample!r}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if not 1 <= self.t_train <= self.t_test:
            raise ConfigError(f"need 1 <= t_train <= t_test, got {self.t_train}, {self.t_test}")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ConfigError("num_classes and input_channels must be >= 1")
        if self.ff_depth < 0 or self.recall_depth < 1:
            raise ConfigError("ff_depth must be >= 0 and recall_depth >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationOutputs:
    hidden: list = field(default_factory=list)
    logits_main: list = field(default_factory=list)
    logits_aux: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.logits_main)


class ResidualBlock(Module):
    """relu(h + conv(relu(conv(h)))) with shape-preserving 3x3 convolutions."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = ConvParams.create(channels, channels, 3, rng)
        self.conv2 = ConvParams.create(channels, channels, 3, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return relu(h + conv2d(relu(conv2d(h, self.conv1)), self.conv2))


class Head(Module):
    """Global average pool followed by one affine layer."""

    def __init__(self, channels: int, outputs: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform((outputs, channels), rng), requires_grad=True)
        self.bias = Tensor(np.zeros(outputs), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        return linear(global_avg_pool(h), self.weight, self.bias)


class DeepThinkNet(Module):
    def __init__(self, config: NetConfig, seed: int | np.random.Generator = 0):
        from .act import HaltingUnit

        config.validate()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.config = config
        c = config.channels
        # 4x4/stride 2/pad 1 halves any even size exactly; 3x3 would not
        kernel, stride = (4, 2) if config.downsample == "stride2" else (3, 1)
        self.input_conv = ConvParams.create(config.input_channels, c, kernel, rng, stride=stride, padding=1)
        if config.cell_kind == "feedforward":
            self.cell = None
            self.blocks = [ResidualBlock(c, rng) for _ in range(config.ff_depth)]
        else:
            kwargs = {"depth": config.recall_depth} if config.cell_kind == "recall" else {}
            self.cell = CELLS[config.cell_kind](c, rng, **kwargs)
            self.blocks = []
        self.head_main = Head(c, config.num_classes, rng)
        self.head_aux = Head(c, NUM_ROTATIONS, rng)
        self.halt = HaltingUnit(c, rng) if config.act else None

    @property
    def recurrent(self) -> bool:
        return self.cell is not None

    def input_transform(self, X) -> Tensor:
        return input_transform(self, X)

    def heads(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return self.head_main(h), self.head_aux(h)

    def iterate(self, X, T: int) -> Iterator[Tensor]:
        """Yield h_1 .. h_T without holding earlier states."""
        if not self.recurrent:
            raise ConfigError("a feedforward network has no thinking iterations")
        if T < 1:
            raise ConfigError(f"T must be >= 1, got {T}")
        h0 = self.input_transform(X)
        ctx = self.cell.prepare(h0)
        h = h0
        for _ in range(T):
            h = self.cell.step(h, ctx)
            yield h

    def forward_last(self, X, T: Optional[int] = None) -> tuple[Tensor, Tensor]:
        """Logits after the final iteration (or the feedforward stack)."""
        if not self.recurrent:
            return feedforward_baseline(self, X)
        T = self.config.t_train if T is None else T
        for h in self.iterate(X, T):
            pass
        return self.heads(h)


def input_transform(net: DeepThinkNet, X) -> Tensor:
    X = as_tensor(X)
    if X.ndim != 4 or X.shape[1] != net.config.input_channels:
        raise ShapeError(
            f"input_transform: expected [N, {net.config.input_channels}, H, W], got {X.shape}"
        )
    return relu(conv2d(X, net.input_conv))


def forward_iterate(net: DeepThinkNet, X, T: int, keep_hidden: bool = True) -> IterationOutputs:
    out = IterationOutputs()
    for h in net.iterate(X, T):
        main, aux = net.heads(h)
        if keep_hidden:
            out.hidden.append(h)
        out.logits_main.append(main)
        out.logits_aux.append(aux)
    return out


def total_loss(net: DeepThinkNet, X, y_main, y_aux, T: Optional[int] = None) -> Tensor:
    """Cross-entropy of both heads at the last training iteration."""
    main, aux = net.forward_last(X, T)
    return softmax_cross_entropy(main, y_main) + softmax_cross_entropy(aux, y_aux)


def feedforward_baseline(net: DeepThinkNet, X, depth: Optional[int] = None) -> tuple[Tensor, Tensor]:
    """Non-recurrent readout through ``depth`` residual blocks."""
    depth = len(net.blocks) if depth is None else depth
    if depth > len(net.blocks):
        raise ConfigError(f"network has {len(net.blocks)} residual blocks, asked for {depth}")
    h = net.input_transform(X)
    for block in net.blocks[:depth]:
        h = block(h)
    return net.heads(h)
