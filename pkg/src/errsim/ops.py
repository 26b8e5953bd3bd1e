"""Reference implementations of the supported dataflow operators.

Everything computes in binary32. Reductions use a fixed accumulation
order (convolution filters iterate input-channel-major, then kernel rows,
then kernel columns; dense layers sum inputs in index order), so repeated
runs on the same platform produce bit-identical outputs. No BLAS-backed
matmul is used anywhere: `np.einsum(..., optimize=False)` evaluates with
a single-threaded fixed-order loop.

Division by zero follows IEEE semantics (inf / NaN propagate as values,
not errors).
"""

from __future__ import annotations

import numpy as np

from .errors import EngineError, ValidationError

F32 = np.float32

OPERATOR_KINDS = (
    "Conv2D",
    "BatchNorm",
    "BiasAdd",
    "Add",
    "Mul",
    "Div",
    "Exp",
    "LeakyReLU",
    "Sigmoid",
    "MaxPool",
    "Dense",
    "Flatten",
    "Softmax",
)

# kinds taking two tensor inputs; everything else takes exactly one
BINARY_KINDS = ("Add", "Mul", "Div")

_REQUIRED_WEIGHTS = {
    "Conv2D": ("filter",),
    "BatchNorm": ("mean", "variance", "gamma", "beta"),
    "BiasAdd": ("bias",),
    "Dense": ("weight",),
}


def _as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def _conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    return oh, ow


def validate_node_config(kind, hyperparams, weight_shapes, input_shapes):
    """Validate hyperparameters and weight shapes for one operator.

    Raises ValidationError with a message free of node context; the graph
    layer prefixes the node id.
    """
    if kind not in OPERATOR_KINDS:
        raise ValidationError(f"unknown operator kind {kind!r}")
    n_inputs = 2 if kind in BINARY_KINDS else 1
    if len(input_shapes) != n_inputs:
        raise ValidationError(
            f"{kind} takes {n_inputs} input(s), got {len(input_shapes)}"
        )
    for name in _REQUIRED_WEIGHTS.get(kind, ()):
        if name not in weight_shapes:
            raise ValidationError(f"{kind} requires weight {name!r}")

    if kind == "Conv2D":
        k = int(hyperparams.get("kernel", 0))
        s = int(hyperparams.get("stride", 0))
        p = int(hyperparams.get("padding", -1))
        c_out = int(hyperparams.get("out_channels", 0))
        if k < 1 or s < 1 or p < 0 or c_out < 1:
            raise ValidationError(
                f"Conv2D needs kernel >= 1, stride >= 1, padding >= 0, "
                f"out_channels >= 1 (got K={k}, S={s}, P={p}, C={c_out})"
            )
        (shape,) = input_shapes
        if len(shape) != 3:
            raise ValidationError(f"Conv2D input must be (C, H, W), got {shape}")
        c_in, h, w = shape
        expected = (c_out, c_in, k, k)
        if tuple(weight_shapes["filter"]) != expected:
            raise ValidationError(
                f"Conv2D filter shape {tuple(weight_shapes['filter'])} "
                f"!= expected {expected}"
            )
        oh, ow = _conv_out_hw(h, w, k, s, p)
        if oh < 1 or ow < 1:
            raise ValidationError(
                f"Conv2D output would be empty for input {shape} "
                f"with K={k}, S={s}, P={p}"
            )
    elif kind == "BatchNorm":
        (shape,) = input_shapes
        if len(shape) != 3:
            raise ValidationError(f"BatchNorm input must be (C, H, W), got {shape}")
        c = shape[0]
        for name in _REQUIRED_WEIGHTS["BatchNorm"]:
            if tuple(weight_shapes[name]) != (c,):
                raise ValidationError(
                    f"BatchNorm weight {name!r} must have shape ({c},), "
                    f"got {tuple(weight_shapes[name])}"
                )
    elif kind == "BiasAdd":
        (shape,) = input_shapes
        axis_len = shape[0] if len(shape) == 3 else shape[-1]
        if tuple(weight_shapes["bias"]) != (axis_len,):
            raise ValidationError(
                f"BiasAdd bias must have shape ({axis_len},), "
                f"got {tuple(weight_shapes['bias'])}"
            )
    elif kind in BINARY_KINDS:
        a, b = input_shapes
        if tuple(a) != tuple(b):
            raise ValidationError(f"{kind} inputs must share a shape, got {a} and {b}")
    elif kind == "LeakyReLU":
        slope = float(hyperparams.get("slope", -1.0))
        if not 0.0 < slope < 1.0:
            raise ValidationError(f"LeakyReLU slope must be in (0, 1), got {slope}")
    elif kind == "MaxPool":
        window = int(hyperparams.get("window", 0))
        stride = int(hyperparams.get("stride", 0))
        if window < 1 or stride < 1:
            raise ValidationError(
                f"MaxPool needs window >= 1 and stride >= 1, got {window}/{stride}"
            )
        (shape,) = input_shapes
        if len(shape) != 3:
            raise ValidationError(f"MaxPool input must be (C, H, W), got {shape}")
        _, h, w = shape
        if window > h or window > w:
            raise ValidationError(
                f"MaxPool window {window} larger than input plane {h}x{w}"
            )
    elif kind == "Dense":
        (shape,) = input_shapes
        if len(shape) != 2 or shape[0] != 1:
            raise ValidationError(f"Dense input must be (1, N), got {shape}")
        n_in = shape[1]
        wshape = tuple(weight_shapes["weight"])
        if len(wshape) != 2 or wshape[1] != n_in:
            raise ValidationError(
                f"Dense weight must be (N_out, {n_in}), got {wshape}"
            )
        if "bias" in weight_shapes and tuple(weight_shapes["bias"]) != (wshape[0],):
            raise ValidationError(
                f"Dense bias must have shape ({wshape[0]},), "
                f"got {tuple(weight_shapes['bias'])}"
            )


def infer_output_shape(kind, hyperparams, weight_shapes, input_shapes) -> tuple[int, ...]:
    """Statically determined output shape; assumes validate_node_config passed."""
    if kind == "Conv2D":
        c_in, h, w = input_shapes[0]
        oh, ow = _conv_out_hw(
            h, w,
            int(hyperparams["kernel"]),
            int(hyperparams["stride"]),
            int(hyperparams["padding"]),
        )
        return (int(hyperparams["out_channels"]), oh, ow)
    if kind == "MaxPool":
        c, h, w = input_shapes[0]
        window = int(hyperparams["window"])
        stride = int(hyperparams["stride"])
        return (c, (h - window) // stride + 1, (w - window) // stride + 1)
    if kind == "Dense":
        return (1, tuple(weight_shapes["weight"])[0])
    if kind == "Flatten":
        n = 1
        for d in input_shapes[0]:
            n *= d
        return (1, n)
    # everything else is shape-preserving
    return tuple(input_shapes[0])


def conv2d(x: np.ndarray, filt: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct convolution with a fixed reduction order.

    The im2col matrix is laid out input-channel-major, then kernel row,
    then kernel column, and the einsum contraction sums that axis in
    ascending order, which pins the accumulation order.
    """
    c_in, h, w = x.shape
    c_out, _, k, _ = filt.shape
    oh, ow = _conv_out_hw(h, w, k, stride, padding)
    if padding:
        padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=F32)
        padded[:, padding:padding + h, padding:padding + w] = x
    else:
        padded = x
    cols = np.empty((c_in * k * k, oh, ow), dtype=F32)
    i = 0
    for ci in range(c_in):
        for ky in range(k):
            for kx in range(k):
                cols[i] = padded[
                    ci,
                    ky:ky + stride * oh:stride,
                    kx:kx + stride * ow:stride,
                ]
                i += 1
    out = np.einsum(
        "of,fp->op",
        filt.reshape(c_out, -1),
        cols.reshape(c_in * k * k, -1),
        optimize=False,
    )
    return np.ascontiguousarray(out.reshape(c_out, oh, ow), dtype=F32)


def maxpool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = x[:, 0:stride * oh:stride, 0:stride * ow:stride].copy()
    for ky in range(window):
        for kx in range(window):
            if ky == 0 and kx == 0:
                continue
            np.maximum(
                out,
                x[:, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride],
                out=out,
            )
    return out


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    # einsum with optimize=False sums the input axis in ascending index order
    out = np.einsum("oi,i->o", weight, x[0], optimize=False)
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(1, -1), dtype=F32)


def softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(x - m)
        return (e / np.sum(e, axis=-1, keepdims=True)).astype(F32)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow; saturates to exact 0.0 / 1.0
    # beyond |x| ~ 17 because of binary32 rounding
    with np.errstate(over="ignore", invalid="ignore"):
        pos = 1.0 / (1.0 + np.exp(-np.abs(x), dtype=F32))
        out = np.where(x >= 0, pos, F32(1.0) - pos)
    return out.astype(F32)


def apply_kind(kind, hyperparams, weights, inputs) -> np.ndarray:
    """Evaluate one operator on already-validated inputs."""
    ins = [_as_f32(t) for t in inputs]
    if kind == "Conv2D":
        return conv2d(
            ins[0], weights["filter"],
            int(hyperparams["stride"]), int(hyperparams["padding"]),
        )
    if kind == "BatchNorm":
        eps = F32(hyperparams.get("epsilon", 1e-5))
        var = weights["variance"] + eps
        scale = (weights["gamma"] / np.sqrt(var)).astype(F32)
        x = ins[0]
        return ((x - weights["mean"][:, None, None]) * scale[:, None, None]
                + weights["beta"][:, None, None]).astype(F32)
    if kind == "BiasAdd":
        x = ins[0]
        bias = weights["bias"]
        if x.ndim == 3:
            return (x + bias[:, None, None]).astype(F32)
        return (x + bias).astype(F32)
    if kind == "Add":
        return (ins[0] + ins[1]).astype(F32)
    if kind == "Mul":
        return (ins[0] * ins[1]).astype(F32)
    if kind == "Div":
        with np.errstate(divide="ignore", invalid="ignore"):
            return (ins[0] / ins[1]).astype(F32)
    if kind == "Exp":
        with np.errstate(over="ignore"):
            return np.exp(ins[0]).astype(F32)
    if kind == "LeakyReLU":
        slope = F32(hyperparams["slope"])
        x = ins[0]
        return np.where(x > 0, x, x * slope).astype(F32)
    if kind == "Sigmoid":
        return sigmoid(ins[0])
    if kind == "MaxPool":
        return maxpool(ins[0], int(hyperparams["window"]), int(hyperparams["stride"]))
    if kind == "Dense":
        return dense(ins[0], weights["weight"], weights.get("bias"))
    if kind == "Flatten":
        return np.ascontiguousarray(ins[0].reshape(1, -1))
    if kind == "Softmax":
        return softmax(ins[0])
    raise EngineError(f"unknown operator kind {kind!r}")
