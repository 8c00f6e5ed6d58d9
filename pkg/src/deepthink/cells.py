"""Recurrent "thinking" steps: h_t = f(h_{t-1}, h_0).

All recurrent convolutions are 3x3, stride 1, padding 1 and bias-free, so a
cell maps a state of shape [N, C, H, W] to the same shape and can be iterated
any number of times.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ndtensor import (
    BatchNormState,
    ConvParams,
    Module,
    Tensor,
    batchnorm,
    concat,
    conv2d,
    relu,
    sigmoid,
    split,
    tanh,
)


def _recurrent_conv(c_in: int, c_out: int, rng: np.random.Generator, init: str) -> ConvParams:
    return ConvParams.create(c_in, c_out, 3, rng, bias=False, init=init)


def _check_state(h: Tensor, channels: int, what: str) -> None:
    if h.ndim != 4 or h.shape[1] != channels:
        raise ShapeError(f"{what}: expected [N, {channels}, H, W], got {h.shape}")


@dataclass
class InputDrive:
    """BN(W_z * h0) and BN(W_h * h0); constant over iterations."""

    drive_z: Tensor
    drive_h: Tensor


class ConvLiGRUCell(Module):
    """Light GRU with convolutional transitions, no reset gate, ReLU candidate."""

    kind = "ligru"

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.U_z = _recurrent_conv(channels, channels, rng, "glorot")
        self.U_h = _recurrent_conv(channels, channels, rng, "he")
        self.W_z = _recurrent_conv(channels, channels, rng, "glorot")
        self.W_h = _recurrent_conv(channels, channels, rng, "he")
        self.bn_z = BatchNormState.create(channels)
        self.bn_h = BatchNormState.create(channels)

    def prepare(self, h0: Tensor) -> InputDrive:
        return precompute_input_drive(self, h0)

    def step(self, h_prev: Tensor, drive: InputDrive) -> Tensor:
        return ligru_step(self, h_prev, drive)


def precompute_input_drive(cell: ConvLiGRUCell, h0: Tensor) -> InputDrive:
    _check_state(h0, cell.channels, "precompute_input_drive")
    return InputDrive(
        drive_z=batchnorm(conv2d(h0, cell.W_z), cell.bn_z),
        drive_h=batchnorm(conv2d(h0, cell.W_h), cell.bn_h),
    )


def ligru_step(cell: ConvLiGRUCell, h_prev: Tensor, drive: InputDrive) -> Tensor:
    _check_state(h_prev, cell.channels, "ligru_step")
    if drive.drive_z.shape != h_prev.shape or drive.drive_h.shape != h_prev.shape:
        raise ShapeError(
            f"ligru_step: state {h_prev.shape} vs drives {drive.drive_z.shape}/{drive.drive_h.shape}"
        )
    # U_z and U_h read the same input: run them as one convolution
    fused = ConvParams(concat([cell.U_z.weight, cell.U_h.weight], axis=0), None, 1, 1)
    uz, uh = split(conv2d(h_prev, fused), [cell.channels, cell.channels], axis=1)
    z = sigmoid(uz + drive.drive_z)
    cand = relu(drive.drive_h + uh)
    return z * cand + (1.0 - z) * h_prev


@dataclass
class GRUDrive:
    drive_r: Tensor
    drive_z: Tensor
    drive_h: Tensor


class ConvGRUCell(Module):
    """Convolutional GRU whose gates see both h_{t-1} and h_0.

    r = sigmoid(U_r*h + W_r*h0), z = sigmoid(U_z*h + W_z*h0),
    cand = tanh(U_h*(r . h) + W_h*h0), h' = z . cand + (1 - z) . h
    """

    kind = "gru"

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.U_r = _recurrent_conv(channels, channels, rng, "glorot")
        self.U_z = _recurrent_conv(channels, channels, rng, "glorot")
        self.U_h = _recurrent_conv(channels, channels, rng, "glorot")
        self.W_r = _recurrent_conv(channels, channels, rng, "glorot")
        self.W_z = _recurrent_conv(channels, channels, rng, "glorot")
        self.W_h = _recurrent_conv(channels, channels, rng, "glorot")

    def prepare(self, h0: Tensor) -> GRUDrive:
        _check_state(h0, self.channels, "gru prepare")
        return GRUDrive(conv2d(h0, self.W_r), conv2d(h0, self.W_z), conv2d(h0, self.W_h))

    def step(self, h_prev: Tensor, drive: GRUDrive) -> Tensor:
        return gru_step(self, h_prev, drive=drive)


def gru_step(cell: ConvGRUCell, h_prev: Tensor, h0: Tensor | None = None, *, drive: GRUDrive | None = None) -> Tensor:
    """One Conv-GRU step. Pass ``h0`` or a precomputed ``drive``."""
    _check_state(h_prev, cell.channels, "gru_step")
    if drive is None:
        if h0 is None:
            raise ShapeError("gru_step needs h0 or a precomputed drive")
        if h0.shape != h_prev.shape:
            raise ShapeError(f"gru_step: state {h_prev.shape} vs h0 {h0.shape}")
        drive = cell.prepare(h0)
    r = sigmoid(conv2d(h_prev, cell.U_r) + drive.drive_r)
    z = sigmoid(conv2d(h_prev, cell.U_z) + drive.drive_z)
    cand = tanh(conv2d(r * h_prev, cell.U_h) + drive.drive_h)
    return z * cand + (1.0 - z) * h_prev


class RecallCell(Module):
    """Stack of conv+ReLU layers over the channel concatenation [h_{t-1}; h_0]."""

    kind = "recall"

    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 2):
        if depth < 1:
            raise ValueError("RecallCell needs at least one layer")
        self.channels = channels
        self.layers = [_recurrent_conv(2 * channels, channels, rng, "he")]
        self.layers += [_recurrent_conv(channels, channels, rng, "he") for _ in range(depth - 1)]

    def prepare(self, h0: Tensor) -> Tensor:
        _check_state(h0, self.channels, "recall prepare")
        return h0

    def step(self, h_prev: Tensor, h0: Tensor) -> Tensor:
        return recall_step(self, h_prev, h0)


def recall_step(cell: RecallCell, h_prev: Tensor, h0: Tensor) -> Tensor:
    _check_state(h_prev, cell.channels, "recall_step")
    if h0.shape != h_prev.shape:
        raise ShapeError(f"recall_step: state {h_prev.shape} vs h0 {h0.shape}")
    h = concat([h_prev, h0], axis=1)
    for layer in cell.layers:
        h = relu(conv2d(h, layer))
    return h


CELLS = {"ligru": ConvLiGRUCell, "gru": ConvGRUCell, "recall": RecallCell}
