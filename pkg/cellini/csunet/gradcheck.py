"""
Central-difference gradient checks.

`grad_check` compares the reverse-mode gradient of a scalar function against
central differences coordinate by coordinate; `run_battery` applies it to every
primitive op, every block and a tiny full network, all at 64-bit precision.
"""
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from cellini.csunet        import ops
from cellini.csunet.blocks import CBR, CEU, CRSU, SIPU, ChannelResidual, SEGate
from cellini.csunet.losses import ce_loss, combined_loss, dice_loss, one_hot
from cellini.csunet.model  import build
from cellini.csunet.tensor import Parameter, Tensor, backward, no_grad, tape
from cellini.csunet.types  import (
    BlockConfig, BlockVariant, Bottleneck, GradCheckReport, LossConfig, NetworkConfig, NetworkVariant, NormMode,
)
from cellini.csunet.utils  import GradCheckError, precision

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[Tensor], Tensor]


def _coordinates(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, max_coords, replace=False))


def grad_check(f: ScalarFunction, point: Tensor, h: float = 1e-4, tol: float = 1e-4,
               wrt: Sequence[Parameter] = (), max_coords: Optional[int] = None,
               seed: int = 0, name: str = "", wrt_coords: Optional[int] = None) -> GradCheckReport:
    """grad_check

    relative error per coordinate |g_ad − g_fd| / max(1, |g_ad|, |g_fd|), where
    g_fd = (f(x + h·e) − f(x − h·e)) / 2h. `point` and every tensor in `wrt` are
    checked; `max_coords` samples that many coordinates per tensor, `wrt_coords`
    overrides it for the tensors in `wrt`.
    """
    targets = [point, *wrt]
    for tensor in targets:
        if tensor.dtype != np.float64:
            raise GradCheckError(f"grad_check needs 64-bit tensors, got {tensor.dtype}")

    point.requires_grad = True
    point.grad = None
    for parameter in wrt:
        parameter.zero_grad()
    tape.clear()
    loss = f(point)
    if loss.size != 1:
        raise GradCheckError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    with no_grad():
        for index, (tensor, grad) in enumerate(zip(targets, analytic)):
            flat, grad = tensor.data.reshape(-1), grad.reshape(-1)
            limit = max_coords if index == 0 or wrt_coords is None else wrt_coords
            for i in _coordinates(flat.size, limit, rng):
                original = flat[i]
                flat[i] = original + h
                upper = f(point).item()
                flat[i] = original - h
                lower = f(point).item()
                flat[i] = original
                numeric = (upper - lower) / (2 * h)
                error = abs(grad[i] - numeric) / max(1.0, abs(grad[i]), abs(numeric))
                worst = max(worst, error)
                checked += 1
    return GradCheckReport(name=name, max_rel_err=float(worst), tol=tol, checked=checked)


# battery

# a maker returns (f, point, wrt) or (f, point, wrt, coordinates per wrt tensor)
BatteryItem = Tuple[str, Callable[[np.random.Generator], tuple], float]


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """ a fixed random projection turning an output volume into a scalar """
    weights = Tensor(rng.normal(size=out.shape))
    return lambda y: (y * weights).sum()


def _projected(forward: Callable[[Tensor], Tensor], point: Tensor, rng: np.random.Generator) -> ScalarFunction:
    with no_grad():
        project = _weighted(forward(point), rng)
    return lambda x: project(forward(x))


def _param(rng, *shape) -> Parameter:
    return Parameter(rng.normal(size=shape))


def _volume(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _conv(rng):
    x, w, b = _volume(rng, 2, 2, 4, 4, 4), _param(rng, 3, 2, 3, 3, 3), _param(rng, 3)
    return _projected(lambda t: ops.conv3d(t, w, b, padding=1), x, rng), x, [w, b]


def _conv_strided(rng):
    x, w, b = _volume(rng, 1, 2, 5, 5, 5), _param(rng, 2, 2, 3, 3, 3), _param(rng, 2)
    return _projected(lambda t: ops.conv3d(t, w, b, stride=2, padding=1), x, rng), x, [w, b]


def _maxpool(rng):
    x = _volume(rng, 2, 2, 4, 4, 4)
    return _projected(lambda t: ops.maxpool3d(t, 2), x, rng), x, []


def _upsample(mode):
    def item(rng):
        x = _volume(rng, 1, 2, 2, 3, 2)
        return _projected(lambda t: ops.upsample3d(t, 2, mode), x, rng), x, []
    return item


def _batchnorm(rng):
    x, gamma, beta = _volume(rng, 2, 3, 3, 3, 3), _param(rng, 3), _param(rng, 3)
    mean, var = Parameter(np.zeros(3), requires_grad=False), Parameter(np.ones(3), requires_grad=False)
    return _projected(lambda t: ops.batchnorm3d(t, gamma, beta, mean, var, training=True), x, rng), x, [gamma, beta]


def _instancenorm(rng):
    x, gamma, beta = _volume(rng, 2, 3, 3, 3, 3), _param(rng, 3), _param(rng, 3)
    return _projected(lambda t: ops.instancenorm3d(t, gamma, beta), x, rng), x, [gamma, beta]


def _unary(function):
    def item(rng):
        x = _volume(rng, 2, 3, 3, 3, 3)
        return _projected(function, x, rng), x, []
    return item


def _linear(rng):
    x, w, b = _volume(rng, 3, 4), _param(rng, 2, 4), _param(rng, 2)
    return _projected(lambda t: ops.linear(t, w, b), x, rng), x, [w, b]


def _scale_channels(rng):
    x, scale = _volume(rng, 2, 3, 2, 2, 2), _param(rng, 2, 3)
    return _projected(lambda t: ops.scale_channels(t, scale), x, rng), x, [scale]


def _concat(rng):
    x, other = _volume(rng, 2, 2, 2, 2, 2), _param(rng, 2, 3, 2, 2, 2)
    return _projected(lambda t: ops.concat_channels(t, other), x, rng), x, [other]


def _add(rng):
    x, other = _volume(rng, 2, 2, 2, 2, 2), _param(rng, 2, 2, 2, 2, 2)
    return _projected(lambda t: ops.add(t, other), x, rng), x, [other]


def _pad_to(rng):
    x = _volume(rng, 1, 2, 2, 3, 2)
    return _projected(lambda t: ops.pad_to(t, (3, 3, 3)), x, rng), x, []


def _labels(rng, shape=(2, 3, 3, 3)) -> np.ndarray:
    return rng.integers(0, 2, size=shape)


def _ce(rng):
    x, labels = _volume(rng, 2, 2, 3, 3, 3), one_hot(_labels(rng), 2)
    return (lambda t: ce_loss(t, labels, LossConfig())), x, []


def _dice(rng):
    x, labels = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 3, 3))), _labels(rng).astype(np.float64)
    return (lambda t: dice_loss(t, labels, LossConfig())), x, []


def _combined(rng):
    x, labels = _volume(rng, 2, 2, 3, 3, 3), _labels(rng)
    return (lambda t: combined_loss(t, labels, LossConfig(ce_weight=0.5))), x, []


def _block(cls, in_channels=2, out_channels=4, mid_channels=2, **options):
    def item(rng):
        config = BlockConfig(in_channels=in_channels, out_channels=out_channels, mid_channels=mid_channels,
                             **options)
        block = cls(config, rng)
        x = _volume(rng, 2, in_channels, 4, 4, 4)
        return _projected(block, x, rng), x, list(block.parameters())
    return item


def _se_gate(rng):
    gate = SEGate(4, 2, rng)
    x = _volume(rng, 2, 4, 3, 3, 3)
    return _projected(gate, x, rng), x, list(gate.parameters())


TINY_NETWORK = NetworkConfig(input_extent=16, stage_channels=[4, 8, 16, 32], variant=NetworkVariant.base_cr,
                             bottleneck=Bottleneck.cr, seed=0)

# coordinates sampled per parameter tensor of the tiny network
NETWORK_WRT_COORDS = 2


def _network(rng):
    net = build(TINY_NETWORK)
    x = _volume(rng, 2, 1, 16, 16, 16)
    labels = _labels(rng, (2, 16, 16, 16))

    def loss(t: Tensor) -> Tensor:
        return combined_loss(net.forward(t, mode="train"), labels, LossConfig())

    return loss, x, list(net.parameters()), NETWORK_WRT_COORDS


ISOLATED_TOL = 1e-5
CE_TOL = 1e-6


def battery_items(tol: float) -> List[BatteryItem]:
    isolated = min(tol, ISOLATED_TOL)
    return [
        ("conv3d", _conv, isolated),
        ("conv3d_strided", _conv_strided, isolated),
        ("maxpool3d", _maxpool, isolated),
        ("upsample3d_nearest", _upsample("nearest"), tol),
        ("upsample3d_trilinear", _upsample("trilinear"), tol),
        ("batchnorm3d", _batchnorm, tol),
        ("instancenorm3d", _instancenorm, tol),
        ("relu", _unary(ops.relu), tol),
        ("sigmoid", _unary(ops.sigmoid), tol),
        ("softmax_channels", _unary(ops.softmax_channels), tol),
        ("global_avg_pool", _unary(ops.global_avg_pool), isolated),
        ("linear", _linear, isolated),
        ("scale_channels", _scale_channels, tol),
        ("concat_channels", _concat, tol),
        ("add", _add, tol),
        ("pad_to", _pad_to, tol),
        ("ce_loss", _ce, min(tol, CE_TOL)),
        ("dice_loss", _dice, tol),
        ("combined_loss", _combined, tol),
        ("block_cbr", _block(CBR), tol),
        ("block_se_gate", _se_gate, tol),
        ("block_cr_plain", _block(ChannelResidual, variant=BlockVariant.plain), tol),
        ("block_cr_residual", _block(ChannelResidual, variant=BlockVariant.residual), tol),
        ("block_cr_channel_residual", _block(ChannelResidual, variant=BlockVariant.channel_residual), tol),
        ("block_cr_instance", _block(ChannelResidual, norm_mode=NormMode.instance), tol),
        ("block_sipu", _block(SIPU, nested_depth=2), tol),
        ("block_crsu", _block(CRSU, nested_depth=1), tol),
        ("block_ceu", _block(CEU, in_channels=4, out_channels=4, mid_channels=2), tol),
        ("network_tiny", _network, tol),
    ]


def run_battery(tol: float = 1e-4, h: float = 1e-6, max_coords: int = 24, seed: int = 0,
                only: Optional[Iterable[str]] = None) -> List[GradCheckReport]:
    """run_battery

    one report per item, in a fixed order. Everything is built and evaluated at
    64-bit precision; the step `h` is small so ReLU kinks are rarely straddled.
    """
    only = set(only) if only is not None else None
    reports = []
    with precision("float64"):
        for index, (name, make, item_tol) in enumerate(battery_items(tol)):
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng(seed + index)
            f, point, wrt, *cap = make(rng)
            report = grad_check(f, point, h=h, tol=item_tol, wrt=wrt, max_coords=max_coords, seed=seed, name=name,
                                wrt_coords=cap[0] if cap else None)
            logger.info("%-28s max_rel_err=%.3e tol=%.0e %s", name, report.max_rel_err, report.tol,
                        "ok" if report.passed else "FAILED")
            reports.append(report)
    return reports
