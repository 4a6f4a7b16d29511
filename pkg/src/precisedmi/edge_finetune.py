"""MRI-guided fine-tuning of the FC head and final map production.

Workflow per dataset: the co-registered MRI is masked, block-averaged down
to the DMI grid and rescaled to [0, 1]; a spatial coefficient per neighbor
pair grows inversely with the squared gray-level difference, clamped at
omega_max. A copy of the trained single-voxel network is then fine-tuned
with its conv part frozen: for every in-mask voxel, the voxel plus its
in-mask 8- (2D) or 26-neighborhood (3D) forms one batch, and the batch loss

    sum_j ||C2(Y_j) - C1(Y_j)||^2
        + lambda * sum_{adjacent pairs (u, v)} omega_uv * ||C2(Y_u) - C2(Y_v)||^2

is minimized with Adam, sweeping all batches in voxel-major order for a
fixed number of epochs (early stop when an epoch improves the summed loss
by 0.1% or less). C1 outputs are constants: no gradient flows into the
original network. One network is fine-tuned per dataset, jointly over all
batches, and then applied to every voxel.

Because the conv part is frozen, conv features and C1 targets are computed
once per dataset and every batch step touches only the FC head.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import neuralnet as nn
from .synth import DmiDataset


@dataclass(frozen=True)
class SpatialPrior:
    """Preprocessed MRI gray levels on the DMI grid (NaN outside the mask)."""

    r: np.ndarray
    mask: np.ndarray
    omega_max: float

    def __post_init__(self):
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        if self.r.shape != self.mask.shape:
            raise ValueError("gray grid and mask dims disagree")


@dataclass(frozen=True)
class FinetuneConfig:
    lam: float = 0.01
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    # epochs always sweep batches in voxel-major order; early stop triggers
    # once the relative epoch-loss improvement drops to this level
    min_improvement: float = 1e-3
    min_epochs: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


def preprocess_mri(mri, mask, dmi_dims, omega_max=100.0) -> SpatialPrior:
    """Mask, block-average to the DMI grid and min-max rescale to [0, 1].

    A constant image has no edges anywhere: the degenerate rescale maps
    every masked voxel to 0.5, so all pairs clamp to omega_max (maximal
    smoothing).
    """
    mri = np.asarray(mri, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(dmi_dims):
        raise ValueError("mask dims must equal the DMI dims")
    if not mask.any():
        raise ValueError("empty ROI mask")
    if mri.ndim != len(dmi_dims):
        raise ValueError("MRI and DMI dimensionality disagree")
    factors = []
    for m_size, d_size in zip(mri.shape, dmi_dims):
        if m_size % d_size:
            raise ValueError(
                f"MRI axis {m_size} is not an integer multiple of DMI axis {d_size}")
        factors.append(m_size // d_size)
    # block average: reshape each axis into (voxels, factor) and mean
    shaped = mri.reshape(tuple(
        itertools.chain.from_iterable((d, f) for d, f in zip(dmi_dims, factors))))
    down = shaped.mean(axis=tuple(range(1, 2 * len(dmi_dims), 2)))

    r = np.full(down.shape, np.nan)
    vals = down[mask]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        r[mask] = (vals - lo) / (hi - lo)
    else:
        r[mask] = 0.5
    return SpatialPrior(r=r, mask=mask, omega_max=float(omega_max))


def spatial_coeff(r1, r2, omega_max):
    """min(1 / (r1-r2)^2, omega_max), with the clamp absorbing the pole."""
    if omega_max <= 0:
        raise ValueError("omega_max must be positive")
    d2 = np.square(np.asarray(r1) - np.asarray(r2))
    out = 1.0 / np.maximum(d2, 1.0 / omega_max)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NeighborhoodBatch:
    """One center voxel with its in-mask neighbors, as masked-order indices."""

    center: int                # index into the masked voxel list
    members: np.ndarray        # masked-order indices, ascending
    pairs: np.ndarray          # (P, 2) indices into members
    omegas: np.ndarray         # (P,)


def _neighbor_offsets(ndim):
    return [off for off in itertools.product((-1, 0, 1), repeat=ndim)
            if any(off)]


def build_batches(prior: SpatialPrior) -> list[NeighborhoodBatch]:
    """Neighborhood batches for every in-mask voxel, voxel-major order."""
    mask = prior.mask
    dims = mask.shape
    flat_index = -np.ones(dims, dtype=np.int64)
    coords = np.argwhere(mask)
    flat_index[mask] = np.arange(len(coords))
    r_flat = prior.r[mask]

    batches = []
    for center_i, coord in enumerate(coords):
        members = [center_i]
        for off in _neighbor_offsets(len(dims)):
            pos = coord + off
            if np.any(pos < 0) or np.any(pos >= dims):
                continue
            idx = flat_index[tuple(pos)]
            if idx >= 0:
                members.append(idx)
        members = np.array(sorted(members), dtype=np.int64)
        positions = coords[members]
        pairs = []
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                if np.max(np.abs(positions[a] - positions[b])) == 1:
                    pairs.append((a, b))
        pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        omegas = spatial_coeff(r_flat[members[pairs[:, 0]]],
                               r_flat[members[pairs[:, 1]]],
                               prior.omega_max) if len(pairs) else np.zeros(0)
        batches.append(NeighborhoodBatch(center=center_i, members=members,
                                         pairs=pairs, omegas=np.asarray(omegas)))
    return batches


def ep_loss(outputs2, outputs1, batch: NeighborhoodBatch, lam: float) -> float:
    """Fidelity-plus-smoothness loss over one neighborhood batch."""
    loss, _ = ep_loss_grad(outputs2, outputs1, batch, lam)
    return loss


def ep_loss_grad(outputs2, outputs1, batch, lam):
    diff = outputs2 - outputs1
    loss = float(np.einsum("ij,ij->", diff, diff))
    grad = 2.0 * diff
    if lam and len(batch.pairs):
        u, v = batch.pairs[:, 0], batch.pairs[:, 1]
        pd = outputs2[u] - outputs2[v]
        w = (lam * batch.omegas).astype(pd.dtype)
        loss += float(w @ np.einsum("ij,ij->i", pd, pd))
        wpd = 2.0 * w[:, None] * pd
        np.add.at(grad, u, wpd)
        np.add.at(grad, v, -wpd)
    return loss, grad


def finetune(dataset: DmiDataset, cnn1: nn.NetworkParams, prior: SpatialPrior,
             config: FinetuneConfig, features=None) -> nn.NetworkParams:
    """Data-specific copy of `cnn1` with its FC head adapted to the prior.

    The conv part is frozen (bit-identical before and after); with lambda=0
    the initial head already minimizes every batch loss, so the parameters
    are returned unchanged up to exact zero Adam updates. `features` may
    carry precomputed conv-part features for the in-mask voxels (the conv
    part being frozen makes them reusable across the whole procedure).
    """
    if prior.mask.shape != dataset.dims:
        raise ValueError("prior and dataset dims disagree")
    if features is None:
        fids = dataset.fids.reshape(dataset.n_voxels, -1)[prior.mask.ravel()]
        features = nn.conv_features(cnn1, fids)
    feats = features
    targets = nn.head_forward(cnn1, feats)
    batches = build_batches(prior)

    cnn2 = cnn1.copy()
    state = nn.AdamState.for_params(cnn2, names=cnn2.fc_names(),
                                    learning_rate=config.learning_rate)
    previous = None
    for _epoch in range(config.epochs):
        total = 0.0
        for batch in batches:
            x = feats[batch.members]
            out2, cache = nn._head_forward(cnn2, x, True)
            loss, gout = ep_loss_grad(out2, targets[batch.members], batch, config.lam)
            grads, _ = nn.head_backward(cnn2, cache, gout.astype(out2.dtype),
                                        need_gflat=False)
            nn.adam_step(state, cnn2, grads)
            total += loss
        if previous is not None and _epoch + 1 >= config.min_epochs:
            if previous - total <= config.min_improvement * abs(previous):
                break
        previous = total
    return cnn2


@dataclass
class PreciseMaps:
    """Per-metabolite amplitude and ratio-to-water maps (NaN off-mask)."""

    amplitude: dict
    ratio: dict
    unreliable: np.ndarray
    metabolites: tuple[str, ...]


def maps_from_amplitudes(amps, mask, metabolites,
                         water_floor: float = 1e-6) -> PreciseMaps:
    """Assemble amplitude and ratio maps from in-mask amplitude rows.

    Out-of-mask voxels are emitted as NaN, never zero. Voxels whose water
    estimate does not exceed `water_floor` are flagged unreliable and their
    ratios withheld rather than emitting an unbounded value.
    """
    amps = np.asarray(amps, dtype=float)
    amplitude = {}
    for j, met in enumerate(metabolites):
        grid = np.full(mask.shape, np.nan)
        grid[mask] = amps[:, j]
        amplitude[met] = grid

    water = amplitude["water"]
    unreliable = mask & ~(water > water_floor)
    ratio = {}
    for met in metabolites:
        if met == "water":
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            grid = amplitude[met] / water
        grid[unreliable] = np.nan
        ratio[met] = grid
    return PreciseMaps(amplitude=amplitude, ratio=ratio,
                       unreliable=unreliable, metabolites=tuple(metabolites))


def precise_dmi(dataset: DmiDataset, net: nn.NetworkParams,
                water_floor: float = 1e-6, features=None) -> PreciseMaps:
    """Apply a network voxel-wise and assemble amplitude and ratio maps."""
    mask = dataset.mask
    mets = tuple(p.name for p in dataset.priors)
    if features is None:
        fids = dataset.fids.reshape(dataset.n_voxels, -1)[mask.ravel()]
        amps = nn.predict_amplitudes(net, fids)
    else:
        amps = np.maximum(nn.head_forward(net, features), 0.0)
    return maps_from_amplitudes(amps, mask, mets, water_floor)


def spatial_prior_for(dataset: DmiDataset, omega_max=100.0) -> SpatialPrior:
    return preprocess_mri(dataset.mri, dataset.mask, dataset.dims, omega_max)
