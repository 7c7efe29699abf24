"""Tensor operations with reverse-mode gradients, and checkpoint I/O.

The differentiable ops are thin wrappers around PyTorch (CPU, float32 by
default; float64 inputs propagate, which the finite-difference gradient
checks rely on). All wrappers validate shapes up front so failures name
the offending shapes instead of surfacing as framework internals.

Checkpoints use a small versioned binary format: magic, version, tensor
count, then per tensor a name, shape, and little-endian float32 data. A
JSON sidecar (``<path>.json``) stores the model config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GraphError, NumericError, ShapeMismatchError

Tensor = torch.Tensor

_CKPT_MAGIC = b"CSCKPT\x00\x00"
_CKPT_VERSION = 1


def tensor(data, requires_grad: bool = False, dtype=torch.float32) -> Tensor:
    return torch.as_tensor(np.asarray(data), dtype=dtype).requires_grad_(requires_grad)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution with 'same' padding. x: (N,C,H,W), kernel: (O,C,3,3)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeMismatchError(
            f"conv2d expects (N,C,H,W) input and (O,C,kh,kw) kernel, "
            f"got {tuple(x.shape)} and {tuple(kernel.shape)}")
    return F.conv2d(x, kernel, bias, padding="same")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects (N,C,H,W), got {tuple(x.shape)}")
    return F.max_pool2d(x, kernel_size=2)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatchError(
            f"linear: input shape {tuple(x.shape)} does not match weight shape "
            f"{tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    """Inverted dropout: identity in eval mode and for p=0."""
    if not training or p == 0.0:
        return x
    return F.dropout(x, p=p, training=True)


def concat(tensors, axis: int = -1) -> Tensor:
    return torch.cat(list(tensors), dim=axis)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a + b


def softmax_cross_entropy(logits: Tensor, class_index: Tensor) -> Tensor:
    """Mean-reduced cross entropy on raw logits (log-sum-exp stabilized)."""
    if not torch.isfinite(logits).all():
        raise NumericError("softmax_cross_entropy: non-finite logits")
    target = torch.as_tensor(class_index, dtype=torch.long)
    if logits.ndim == 1:
        logits, target = logits.unsqueeze(0), target.reshape(1)
    return F.cross_entropy(logits, target)


def binary_cross_entropy(concept_logits: Tensor, concept_bits: Tensor) -> Tensor:
    """Mean-reduced BCE computed on logits."""
    if not torch.isfinite(concept_logits).all():
        raise NumericError("binary_cross_entropy: non-finite logits")
    target = torch.as_tensor(concept_bits, dtype=concept_logits.dtype)
    return F.binary_cross_entropy_with_logits(concept_logits, target)


def backward(scalar_loss: Tensor) -> None:
    if scalar_loss.numel() != 1:
        raise ShapeMismatchError(
            f"backward expects a scalar, got shape {tuple(scalar_loss.shape)}")
    if scalar_loss.grad_fn is None:
        raise GraphError("backward called on a tensor with no gradient graph")
    scalar_loss.backward()


def input_gradient(scalar: Tensor, input_tensor: Tensor,
                   retain_graph: bool = False) -> Tensor:
    """d(scalar)/d(input) without touching parameter gradients."""
    if scalar.numel() != 1:
        raise ShapeMismatchError(
            f"input_gradient expects a scalar, got shape {tuple(scalar.shape)}")
    grads = torch.autograd.grad(scalar, input_tensor, retain_graph=retain_graph,
                                allow_unused=True)
    if grads[0] is None:
        raise GraphError("scalar is not connected to the given input tensor")
    return grads[0]


def sign(x: Tensor) -> Tensor:
    return torch.sign(x)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ShapeMismatchError(f"clamp: lo {lo} exceeds hi {hi}")
    return torch.clamp(x, lo, hi)


def project_linf(x_adv: Tensor, x_orig: Tensor, eps: float) -> Tensor:
    """Clip each element of x_adv into [x_orig - eps, x_orig + eps]."""
    if x_adv.shape != x_orig.shape:
        raise ShapeMismatchError(
            f"project_linf: shapes {tuple(x_adv.shape)} and {tuple(x_orig.shape)} differ")
    if eps < 0:
        raise ShapeMismatchError(f"project_linf: eps must be nonnegative, got {eps}")
    return torch.minimum(torch.maximum(x_adv, x_orig - eps), x_orig + eps)


def save_checkpoint(path, named_tensors: dict[str, Tensor], config: dict) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(named_tensors)))
        for name, value in named_tensors.items():
            data = value.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(config, indent=2) + "\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
    config = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return tensors, config
