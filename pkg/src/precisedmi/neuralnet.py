"""Fixed-architecture 1D CNN with hand-written gradients and Adam.

The network maps a two-channel (real/imaginary) FID to one amplitude per
metabolite: a stack of {conv(kernel 3, zero padding 1) -> PReLU -> maxpool}
blocks, a flatten, one hidden fully-connected layer with PReLU, and a
linear output head. The layer set is small and fixed, so forward and
backward passes are written directly against the kernel backends instead of
pulling in an autodiff runtime; every gradient is checked against central
finite differences in the test suite.

Raw network outputs are unbounded. Clamping to nonnegative amplitudes
happens only at the reporting boundary (`predict_amplitudes`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NumericalError
from .signal_model import Fid
from .synth import sample_training_batch

KERNEL_SIZE = 3


@dataclass(frozen=True)
class ConvBlock:
    in_channels: int
    out_channels: int
    pool: int = 2


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape plan of the network; the default trains on a desk CPU."""

    n_points: int = 512
    in_channels: int = 2
    n_out: int = 4
    blocks: tuple[ConvBlock, ...] = (
        ConvBlock(2, 16), ConvBlock(16, 32), ConvBlock(32, 64))
    hidden: int = 256

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("at least one conv block required")
        if self.blocks[0].in_channels != self.in_channels:
            raise ValueError("first block must accept the input channels")
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if cur.in_channels != prev.out_channels:
                raise ValueError("conv block channels do not chain")
        length = self.n_points
        for blk in self.blocks:
            if blk.pool < 1 or length % blk.pool:
                raise ValueError(f"pool {blk.pool} does not divide length {length}")
            length //= blk.pool

    @property
    def feature_length(self) -> int:
        length = self.n_points
        for blk in self.blocks:
            length //= blk.pool
        return length

    @property
    def flat_features(self) -> int:
        return self.blocks[-1].out_channels * self.feature_length

    def param_shapes(self):
        shapes = {}
        for i, blk in enumerate(self.blocks):
            shapes[f"conv{i}.weight"] = (blk.out_channels, blk.in_channels, KERNEL_SIZE)
            shapes[f"conv{i}.bias"] = (blk.out_channels,)
            shapes[f"conv{i}.slope"] = (blk.out_channels,)
        shapes["fc1.weight"] = (self.flat_features, self.hidden)
        shapes["fc1.bias"] = (self.hidden,)
        shapes["fc1.slope"] = (self.hidden,)
        shapes["fc2.weight"] = (self.hidden, self.n_out)
        shapes["fc2.bias"] = (self.n_out,)
        return shapes

    def to_dict(self):
        return {
            "n_points": self.n_points,
            "in_channels": self.in_channels,
            "n_out": self.n_out,
            "blocks": [[b.in_channels, b.out_channels, b.pool] for b in self.blocks],
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d):
        blocks = tuple(ConvBlock(*b) for b in d["blocks"])
        return cls(n_points=d["n_points"], in_channels=d["in_channels"],
                   n_out=d["n_out"], blocks=blocks, hidden=d["hidden"])


class NetworkParams:
    """All trainable tensors, keyed by layer, with a conv/FC partition."""

    def __init__(self, arch: ArchitectureSpec, tensors: dict[str, np.ndarray]):
        shapes = arch.param_shapes()
        if set(tensors) != set(shapes):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.arch = arch
        self.tensors = {name: tensors[name] for name in shapes}  # canonical order

    @property
    def dtype(self):
        return self.tensors["fc1.weight"].dtype

    def conv_names(self):
        return [n for n in self.tensors if n.startswith("conv")]

    def fc_names(self):
        return [n for n in self.tensors if n.startswith("fc")]

    def copy(self):
        return NetworkParams(self.arch, {n: t.copy() for n, t in self.tensors.items()})

    def astype(self, dtype):
        return NetworkParams(self.arch,
                             {n: t.astype(dtype) for n, t in self.tensors.items()})

    def n_parameters(self):
        return sum(t.size for t in self.tensors.values())


def init_params(arch: ArchitectureSpec, rng: np.random.Generator,
                dtype=np.float32) -> NetworkParams:
    """He-normal weights, zero biases, PReLU slopes at 0.25."""
    tensors = {}
    for i, blk in enumerate(arch.blocks):
        fan_in = blk.in_channels * KERNEL_SIZE
        std = math.sqrt(2.0 / fan_in)
        tensors[f"conv{i}.weight"] = (std * rng.standard_normal(
            (blk.out_channels, blk.in_channels, KERNEL_SIZE))).astype(dtype)
        tensors[f"conv{i}.bias"] = np.zeros(blk.out_channels, dtype=dtype)
        tensors[f"conv{i}.slope"] = np.full(blk.out_channels, 0.25, dtype=dtype)
    tensors["fc1.weight"] = (math.sqrt(2.0 / arch.flat_features)
                             * rng.standard_normal((arch.flat_features, arch.hidden))
                             ).astype(dtype)
    tensors["fc1.bias"] = np.zeros(arch.hidden, dtype=dtype)
    tensors["fc1.slope"] = np.full(arch.hidden, 0.25, dtype=dtype)
    tensors["fc2.weight"] = (math.sqrt(2.0 / arch.hidden)
                             * rng.standard_normal((arch.hidden, arch.n_out))
                             ).astype(dtype)
    tensors["fc2.bias"] = np.zeros(arch.n_out, dtype=dtype)
    return NetworkParams(arch, tensors)


def fids_to_input(fids, dtype=np.float32) -> np.ndarray:
    """Complex FIDs to network input (batch, 2, n_points)."""
    if isinstance(fids, Fid):
        fids = fids.samples
    fids = np.asarray(fids)
    if fids.ndim == 1:
        fids = fids[None, :]
    x = np.empty((fids.shape[0], 2, fids.shape[1]), dtype=dtype)
    x[:, 0] = fids.real
    x[:, 1] = fids.imag
    return x


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _check_input(params, x):
    arch = params.arch
    if x.ndim != 3 or x.shape[1] != arch.in_channels or x.shape[2] != arch.n_points:
        raise ValueError(
            f"input shape {x.shape} incompatible with "
            f"(*, {arch.in_channels}, {arch.n_points})")
    return np.ascontiguousarray(x, dtype=params.dtype)


def _conv_forward(params, x, keep_cache):
    k = _kernels.active
    t = params.tensors
    cache = []
    h = x
    for i, blk in enumerate(params.arch.blocks):
        c = k.conv1d_forward(h, t[f"conv{i}.weight"], t[f"conv{i}.bias"])
        p = k.prelu_forward(c, t[f"conv{i}.slope"])
        pooled, idx = k.maxpool_forward(p, blk.pool)
        if keep_cache:
            cache.append((h, c, idx, p.shape[2]))
        h = pooled
    flat = h.reshape(h.shape[0], -1)
    return flat, cache


def _head_forward(params, flat, keep_cache):
    k = _kernels.active
    t = params.tensors
    z1 = flat @ t["fc1.weight"] + t["fc1.bias"]
    h1 = k.prelu_forward(z1, t["fc1.slope"])
    out = h1 @ t["fc2.weight"] + t["fc2.bias"]
    cache = (flat, z1, h1) if keep_cache else None
    return out, cache


def conv_features(params: NetworkParams, fids, chunk=512) -> np.ndarray:
    """Flattened conv-part features for a batch of FIDs (fine-tune cache)."""
    x = _check_input(params, fids_to_input(fids, dtype=params.dtype))
    parts = [_conv_forward(params, x[i:i + chunk], False)[0]
             for i in range(0, x.shape[0], chunk)]
    return np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]


def head_forward(params: NetworkParams, flat) -> np.ndarray:
    return _head_forward(params, flat, False)[0]


def forward(params: NetworkParams, x) -> np.ndarray:
    """Raw (unclamped) amplitude estimates for inputs (B, 2, N)."""
    x = _check_input(params, x)
    flat, _ = _conv_forward(params, x, False)
    return _head_forward(params, flat, False)[0]


def forward_cached(params, x):
    x = _check_input(params, x)
    flat, conv_cache = _conv_forward(params, x, True)
    out, head_cache = _head_forward(params, flat, True)
    return out, (conv_cache, head_cache)


def head_backward(params, head_cache, gout, need_gflat=True):
    """Gradients of the FC head; the feature gradient is optional."""
    k = _kernels.active
    t = params.tensors
    flat, z1, h1 = head_cache
    grads = {}
    grads["fc2.weight"] = h1.T @ gout
    grads["fc2.bias"] = gout.sum(axis=0)
    gh1 = gout @ t["fc2.weight"].T
    gz1, grads["fc1.slope"] = k.prelu_backward(z1, t["fc1.slope"], gh1)
    grads["fc1.weight"] = flat.T @ gz1
    grads["fc1.bias"] = gz1.sum(axis=0)
    gflat = gz1 @ t["fc1.weight"].T if need_gflat else None
    return grads, gflat


def backward(params, cache, gout, fc_only=False):
    """Parameter gradients for the batch that produced `cache`.

    With fc_only=True the conv part is treated as frozen: its gradients are
    neither computed nor returned.
    """
    k = _kernels.active
    t = params.tensors
    conv_cache, head_cache = cache
    grads, gflat = head_backward(params, head_cache, gout)
    if fc_only:
        return grads
    blocks = params.arch.blocks
    last = blocks[-1]
    g = gflat.reshape(gflat.shape[0], last.out_channels,
                      params.arch.feature_length)
    for i in reversed(range(len(blocks))):
        x_in, c, idx, pre_pool_len = conv_cache[i]
        g = k.maxpool_backward(idx, np.ascontiguousarray(g), pre_pool_len)
        g, grads[f"conv{i}.slope"] = k.prelu_backward(c, t[f"conv{i}.slope"], g)
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = k.conv1d_backward(
            x_in, t[f"conv{i}.weight"], g, need_gx=(i > 0))
    return grads


def predict_amplitudes(params: NetworkParams, fids) -> np.ndarray:
    """Reported amplitudes for complex FIDs: raw outputs clamped at zero."""
    out = forward(params, fids_to_input(fids, dtype=params.dtype))
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def mse_loss(predictions, targets) -> float:
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must have equal shapes")
    if predictions.shape[0] == 0:
        raise ValueError("empty batch")
    diff = predictions - targets
    return float(np.einsum("ij,ij->", diff, diff) / predictions.shape[0])


def mse_loss_grad(predictions, targets):
    diff = predictions - targets
    loss = float(np.einsum("ij,ij->", diff, diff) / predictions.shape[0])
    return loss, (2.0 / predictions.shape[0]) * diff


@dataclass
class AdamState:
    """First/second moment accumulators; one shared step counter."""

    names: tuple[str, ...]
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, names=None, learning_rate=1e-3):
        names = tuple(params.tensors if names is None else names)
        m = {n: np.zeros_like(params.tensors[n]) for n in names}
        v = {n: np.zeros_like(params.tensors[n]) for n in names}
        return cls(names=names, m=m, v=v, learning_rate=learning_rate)


def adam_step(state: AdamState, params: NetworkParams, grads: dict):
    """One bias-corrected Adam update over the parameters the state covers."""
    k = _kernels.active
    state.step += 1
    for name in state.names:
        k.adam_update(params.tensors[name].ravel(), grads[name].ravel(),
                      state.m[name].ravel(), state.v[name].ravel(),
                      state.learning_rate, state.beta1, state.beta2,
                      state.eps, state.step)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    iterations: int = 25000       # desk-scale runs use 5000
    learning_rate: float = 1e-3   # initial rate; see lr_schedule
    seed: int = 0
    lr_schedule: str = "cosine"   # "cosine" decays from the initial rate
    lr_floor: float = 2e-5
    warmup_iterations: int = 0    # linear ramp from lr_floor to the peak
    adam_beta2: float = 0.999
    log_every: int = 100

    def __post_init__(self):
        if min(self.batch_size, self.iterations, self.log_every) <= 0:
            raise ValueError("batch_size, iterations and log_every must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.warmup_iterations < self.iterations:
            raise ValueError("warmup_iterations must be shorter than the run")


def _lr_at(config, iteration):
    if iteration <= config.warmup_iterations:
        frac = iteration / max(config.warmup_iterations, 1)
        return config.lr_floor + (config.learning_rate - config.lr_floor) * frac
    if config.lr_schedule == "constant":
        return config.learning_rate
    span = config.iterations - config.warmup_iterations
    frac = (iteration - config.warmup_iterations) / span
    return config.lr_floor + 0.5 * (config.learning_rate - config.lr_floor) * (
        1.0 + math.cos(math.pi * frac))


def train_sve(sample_spec, priors, grid, arch: ArchitectureSpec,
              config: TrainConfig, progress=None):
    """Train on a stream of freshly sampled batches (no fixed dataset).

    Every iteration draws new synthetic pairs, so no sample is ever reused
    and overfitting is structurally impossible. Returns the final
    parameters and the loss log [(iteration, loss), ...]. Single-threaded
    runs are bit-reproducible for a fixed seed.
    """
    if arch.n_points != grid.n_points:
        raise ValueError("architecture and grid disagree on n_points")
    if arch.n_out != len(priors):
        raise ValueError("architecture output size must match the priors")
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, rng)
    state = AdamState.for_params(params, learning_rate=config.learning_rate)
    state.beta2 = config.adam_beta2
    history = []
    for it in range(1, config.iterations + 1):
        x, targets = sample_training_batch(sample_spec, priors, grid, rng,
                                           config.batch_size)
        out, cache = forward_cached(params, x)
        loss, gout = mse_loss_grad(out, targets.astype(out.dtype))
        if not math.isfinite(loss):
            raise NumericalError(f"training diverged at iteration {it} (loss={loss})")
        grads = backward(params, cache, gout)
        state.learning_rate = _lr_at(config, it)
        adam_step(state, params, grads)
        if it % config.log_every == 0 or it == config.iterations:
            history.append((it, loss))
            if progress is not None:
                progress(it, loss)
    return params, history
