"""
Volumetric primitives of the segmentation network.

Volumes use the (N, C, D, H, W) layout. Every public function validates shapes,
then applies the corresponding `Function` so the result is differentiable.
"""
import itertools
from concurrent.futures import ThreadPoolExecutor
from typing             import Optional, Tuple, Union

import numpy as np

from cellini.csunet.tensor import Function, Tensor, Add
from cellini.csunet.utils  import AXIS_NAMES, ShapeError, thread_count, triple


def _require_volume(x: Tensor, name: str = "input"):
    if x.ndim != 5:
        raise ShapeError(f"{name} must be a (N,C,D,H,W) volume, got shape {x.shape}")


def _window(start: int, step: int, count: int) -> slice:
    return slice(start, start + step * (count - 1) + 1, step)


def _offsets(kernel: Tuple[int, int, int]):
    return itertools.product(range(kernel[0]), range(kernel[1]), range(kernel[2]))


class Conv3d(Function):
    """
    Direct 3D cross-correlation, accumulated one kernel offset at a time so that
    no im2col buffer is materialised.
    """

    def forward(self, x, weight, bias):
        stride, padding, dilation = self.options["stride"], self.options["padding"], self.options["dilation"]
        self.out_extent = self.options["out_extent"]
        self.kernel = weight.shape[2:]
        pad = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        self.xp = np.pad(x, pad) if any(padding) else x
        self.x_shape, self.weight, self.has_bias = x.shape, weight, bias is not None

        workers = thread_count()
        if workers > 0 and x.shape[0] > 1:
            chunks = np.array_split(np.arange(x.shape[0]), min(workers, x.shape[0]))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda idx: self._correlate(self.xp[idx]), chunks))
            out = np.concatenate(parts, axis=0)
        else:
            out = self._correlate(self.xp)

        out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1, 1)
        return out

    def _correlate(self, xp: np.ndarray) -> np.ndarray:
        (sd, sh, sw), (dd, dh, dw) = self.options["stride"], self.options["dilation"]
        od, oh, ow = self.out_extent
        out = np.zeros((xp.shape[0], od, oh, ow, self.weight.shape[0]), dtype=xp.dtype)
        for a, b, c in _offsets(self.kernel):
            patch = xp[:, :, _window(a * dd, sd, od), _window(b * dh, sh, oh), _window(c * dw, sw, ow)]
            out += np.tensordot(patch, self.weight[:, :, a, b, c], axes=([1], [1]))
        return out

    def backward(self, grad):
        (sd, sh, sw), (dd, dh, dw) = self.options["stride"], self.options["dilation"]
        padding = self.options["padding"]
        od, oh, ow = self.out_extent
        g = np.ascontiguousarray(grad.transpose(0, 2, 3, 4, 1))

        grad_weight = np.zeros_like(self.weight)
        grad_xp = np.zeros_like(self.xp)
        for a, b, c in _offsets(self.kernel):
            window = (slice(None), slice(None),
                      _window(a * dd, sd, od), _window(b * dh, sh, oh), _window(c * dw, sw, ow))
            grad_weight[:, :, a, b, c] = np.tensordot(g, self.xp[window], axes=([0, 1, 2, 3], [0, 2, 3, 4]))
            grad_xp[window] += np.tensordot(g, self.weight[:, :, a, b, c], axes=([4], [0])).transpose(0, 4, 1, 2, 3)

        _, _, D, H, W = self.x_shape
        pd, ph, pw = padding
        grad_x = grad_xp[:, :, pd:pd + D, ph:ph + H, pw:pw + W]
        grad_bias = grad.sum(axis=(0, 2, 3, 4)) if self.has_bias else None
        return grad_x, grad_weight, grad_bias


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv3d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0, dilation=1) -> Tensor:
    """conv3d

    3D cross-correlation (no kernel flip) with zero padding.
    """
    _require_volume(input)
    if weight.ndim != 5:
        raise ShapeError(f"weight must be (Cout,Cin,kd,kh,kw), got shape {weight.shape}")
    stride, padding, dilation = triple(stride, "stride"), triple(padding, "padding"), triple(dilation, "dilation")
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(f"channel mismatch: input has {input.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")

    out_extent = []
    for axis, name in enumerate(AXIS_NAMES):
        extent = conv_output_extent(input.shape[2 + axis], weight.shape[2 + axis],
                                    stride[axis], padding[axis], dilation[axis])
        if extent < 1:
            raise ShapeError(f"conv3d output {name} extent is {extent} (input {name} {input.shape[2 + axis]}, "
                             f"kernel {weight.shape[2 + axis]}, padding {padding[axis]})")
        out_extent.append(extent)

    return Conv3d.apply(input, weight, bias, stride=stride, padding=padding,
                        dilation=dilation, out_extent=tuple(out_extent))


class MaxPool3d(Function):

    def forward(self, x):
        kernel, stride, out_extent = self.options["kernel"], self.options["stride"], self.options["out_extent"]
        self.x_shape, self.dtype = x.shape, x.dtype
        best, self.argmax = None, np.zeros(x.shape[:2] + out_extent, dtype=np.int64)
        for index, (a, b, c) in enumerate(_offsets(kernel)):
            candidate = x[:, :, _window(a, stride[0], out_extent[0]),
                                _window(b, stride[1], out_extent[1]),
                                _window(c, stride[2], out_extent[2])]
            if best is None:
                best = candidate.copy()
                continue
            better = candidate > best
            best[better] = candidate[better]
            self.argmax[better] = index
        return best

    def backward(self, grad):
        kernel, stride, out_extent = self.options["kernel"], self.options["stride"], self.options["out_extent"]
        grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
        for index, (a, b, c) in enumerate(_offsets(kernel)):
            grad_x[:, :, _window(a, stride[0], out_extent[0]),
                         _window(b, stride[1], out_extent[1]),
                         _window(c, stride[2], out_extent[2])] += np.where(self.argmax == index, grad, 0)
        return (grad_x,)


def maxpool3d(input: Tensor, kernel=2, stride=None) -> Tensor:
    """maxpool3d

    per-window maximum, remainders dropped (floor); gradient flows to the first
    maximal voxel in scan order.
    """
    _require_volume(input)
    kernel = triple(kernel, "kernel")
    stride = triple(stride if stride is not None else kernel, "stride")
    out_extent = []
    for axis, name in enumerate(AXIS_NAMES):
        if kernel[axis] > input.shape[2 + axis]:
            raise ShapeError(f"maxpool3d kernel {kernel[axis]} larger than input {name} extent {input.shape[2 + axis]}")
        out_extent.append((input.shape[2 + axis] - kernel[axis]) // stride[axis] + 1)
    return MaxPool3d.apply(input, kernel=kernel, stride=stride, out_extent=tuple(out_extent))


def interpolation_matrix(extent: int, factor: int = 2, dtype=np.float64) -> np.ndarray:
    """ linear resampling matrix (factor·extent × extent), align_corners=False """
    matrix = np.zeros((extent * factor, extent), dtype=dtype)
    for i in range(extent * factor):
        source = max((i + 0.5) / factor - 0.5, 0.0)
        low = min(int(np.floor(source)), extent - 1)
        high = min(low + 1, extent - 1)
        weight = source - low
        matrix[i, low] += 1.0 - weight
        matrix[i, high] += weight
    return matrix


class Upsample3d(Function):

    def forward(self, x):
        self.x_shape = x.shape
        if self.options["mode"] == "nearest":
            return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
        self.matrices = [interpolation_matrix(x.shape[axis], dtype=x.dtype) for axis in (2, 3, 4)]
        out = x
        for axis, matrix in zip((2, 3, 4), self.matrices):
            out = np.moveaxis(np.tensordot(out, matrix, axes=([axis], [1])), -1, axis)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        N, C, D, H, W = self.x_shape
        if self.options["mode"] == "nearest":
            return (grad.reshape(N, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)
        out = grad
        for axis, matrix in zip((4, 3, 2), self.matrices[::-1]):
            out = np.moveaxis(np.tensordot(out, matrix, axes=([axis], [0])), -1, axis)
        return (np.ascontiguousarray(out),)


def upsample3d(input: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    """ double every spatial extent (nearest replication or trilinear, align_corners=False) """
    _require_volume(input)
    mode = getattr(mode, "value", mode)
    if factor != 2:
        raise ShapeError(f"upsample3d supports factor 2 only, got {factor}")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"Unknown upsample mode '{mode}'")
    return Upsample3d.apply(input, mode=mode)


class Normalize(Function):
    """
    y = gamma·(x − μ)/sqrt(σ² + eps) + beta, statistics over `axes`
    (batch norm: N,D,H,W; instance norm: D,H,W).
    """

    def forward(self, x, gamma, beta):
        axes, eps = self.options["axes"], self.options["eps"]
        self.mean = x.mean(axis=axes, keepdims=True)
        centered = x - self.mean
        self.var = (centered * centered).mean(axis=axes, keepdims=True)
        self.invstd = 1.0 / np.sqrt(self.var + eps)
        self.xhat = centered * self.invstd
        self.gamma = gamma.reshape(1, -1, 1, 1, 1)
        self.count = int(np.prod([x.shape[a] for a in axes]))
        return self.gamma * self.xhat + beta.reshape(1, -1, 1, 1, 1)

    def backward(self, grad):
        axes = self.options["axes"]
        dxhat = grad * self.gamma
        grad_x = (self.invstd / self.count) * (
            self.count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True))
        return grad_x, (grad * self.xhat).sum(axis=(0, 2, 3, 4)), grad.sum(axis=(0, 2, 3, 4))


class NormalizeFrozen(Function):
    """ affine normalisation with fixed (running) statistics """

    def forward(self, x, gamma, beta, mean, var):
        eps = self.options["eps"]
        self.invstd = (1.0 / np.sqrt(var + eps)).reshape(1, -1, 1, 1, 1)
        self.xhat = (x - mean.reshape(1, -1, 1, 1, 1)) * self.invstd
        self.gamma = gamma.reshape(1, -1, 1, 1, 1)
        return self.gamma * self.xhat + beta.reshape(1, -1, 1, 1, 1)

    def backward(self, grad):
        return (grad * self.gamma * self.invstd,
                (grad * self.xhat).sum(axis=(0, 2, 3, 4)),
                grad.sum(axis=(0, 2, 3, 4)),
                None, None)


def _check_affine(input: Tensor, gamma: Tensor, beta: Tensor):
    _require_volume(input)
    channels = input.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"normalisation expects gamma/beta of shape ({channels},), "
                         f"got {gamma.shape} and {beta.shape}")


def batchnorm3d(input: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: Tensor, running_var: Tensor,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """batchnorm3d

    per-channel statistics over (N,D,H,W) in training mode, updating the running
    statistics in place with `momentum` (unbiased variance); running statistics
    are used in eval mode.
    """
    _check_affine(input, gamma, beta)
    if not training:
        return NormalizeFrozen.apply(input, gamma, beta, running_mean, running_var, eps=eps)

    out = Normalize.apply(input, gamma, beta, axes=(0, 2, 3, 4), eps=eps)
    x = input.data
    count = x.size // x.shape[1]
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4)) * (count / (count - 1) if count > 1 else 1.0)
    running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
    running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    return out


def instancenorm3d(input: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """ per-sample, per-channel statistics over (D,H,W); identical in train and eval mode """
    _check_affine(input, gamma, beta)
    return Normalize.apply(input, gamma, beta, axes=(2, 3, 4), eps=eps)


class ReLU(Function):

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(input: Tensor) -> Tensor:
    return ReLU.apply(input)


class Sigmoid(Function):

    def forward(self, x):
        # outputs lie in [tiny, 1 - epsneg] of the input dtype
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        info = np.finfo(x.dtype)
        self.out = np.clip(out, info.tiny, 1.0 - info.epsneg).astype(x.dtype, copy=False)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def sigmoid(input: Tensor) -> Tensor:
    return Sigmoid.apply(input)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    return Add.apply(a, b)


class Concat(Function):

    def forward(self, a, b):
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, :self.split], grad[:, self.split:]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """ channel-axis concatenation, a's channels first """
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat_channels requires equal non-channel extents, got {a.shape} and {b.shape}")
    return Concat.apply(a, b)


class SoftmaxChannels(Function):

    def forward(self, x):
        shifted = np.exp(x - x.max(axis=1, keepdims=True))
        self.out = np.maximum(shifted / shifted.sum(axis=1, keepdims=True), np.finfo(x.dtype).tiny)
        return self.out

    def backward(self, grad):
        return (self.out * (grad - (grad * self.out).sum(axis=1, keepdims=True)),)


def softmax_channels(input: Tensor) -> Tensor:
    if input.ndim < 2 or input.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {input.shape}")
    return SoftmaxChannels.apply(input)


class GlobalAvgPool(Function):

    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, grad):
        count = int(np.prod(self.x_shape[2:]))
        return (np.broadcast_to(grad[:, :, None, None, None] / count, self.x_shape).copy(),)


def global_avg_pool(input: Tensor) -> Tensor:
    _require_volume(input)
    return GlobalAvgPool.apply(input)


class Linear(Function):

    def forward(self, x, weight, bias):
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        out = x @ weight.T
        return out + bias if bias is not None else out

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0) if self.has_bias else None


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """ y = x·Wᵀ + b """
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dimension mismatch: input {input.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
    return Linear.apply(input, weight, bias)


class ScaleChannels(Function):

    def forward(self, x, scale):
        self.x, self.scale = x, scale[:, :, None, None, None]
        return x * self.scale

    def backward(self, grad):
        return grad * self.scale, (grad * self.x).sum(axis=(2, 3, 4))


def scale_channels(input: Tensor, scale: Tensor) -> Tensor:
    """ multiply every channel of a volume by a per-(sample, channel) factor """
    _require_volume(input)
    if scale.shape != input.shape[:2]:
        raise ShapeError(f"scale must have shape {input.shape[:2]}, got {scale.shape}")
    return ScaleChannels.apply(input, scale)


class PadTo(Function):

    def forward(self, x):
        self.x_shape = x.shape
        extent = self.options["extent"]
        pad = ((0, 0), (0, 0)) + tuple((0, e - s) for e, s in zip(extent, x.shape[2:]))
        return np.pad(x, pad)

    def backward(self, grad):
        _, _, D, H, W = self.x_shape
        return (np.ascontiguousarray(grad[:, :, :D, :H, :W]),)


def pad_to(input: Tensor, extent: Union[Tuple[int, int, int], list]) -> Tensor:
    """ zero-pad the high end of every spatial axis up to `extent` """
    _require_volume(input)
    extent = triple(extent, "extent")
    for axis, name in enumerate(AXIS_NAMES):
        if extent[axis] < input.shape[2 + axis]:
            raise ShapeError(f"pad_to target {name} extent {extent[axis]} smaller than input {input.shape[2 + axis]}")
    if tuple(extent) == input.shape[2:]:
        return input
    return PadTo.apply(input, extent=extent)
