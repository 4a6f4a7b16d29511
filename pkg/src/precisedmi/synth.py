"""Training-pair sampling and the simulation phantom.

The phantom is a disk of three concentric compartments with four small
tumor-like insertions placed at the cardinal points of the middle ring.
Each insertion realizes one agreement scenario between the anatomical image
and the metabolic data:

    A  true negative   (normal MRI, normal metabolism)
    B  false negative  (normal MRI, abnormal metabolism)
    C  true positive   (tumor in MRI, abnormal metabolism)
    D  false positive  (tumor in MRI, normal metabolism)

Every DMI voxel maps onto an `mri_scale` x `mri_scale` block of the MRI
grid, and both grids share one field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .signal_model import (
    Fid,
    FidParams,
    MetabolitePrior,
    SpectralGrid,
    default_priors,
    dft_spectrum,
    metabolite_basis,
    synth_ideal_fid,
    water_peak_height,
    water_window,
)

ABNORMAL = "abnormal"


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSampleSpec:
    """Uniform sampling ranges for synthetic training FIDs."""

    a_max: float
    delta_t_range: tuple[float, float]
    delta_f_range: tuple[float, float]
    sigma_max: float
    noiseless_fraction: float = 0.2

    def __post_init__(self):
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if self.delta_t_range[0] > self.delta_t_range[1]:
            raise ValueError("delta_t_range must be ordered")
        if self.delta_f_range[0] > self.delta_f_range[1]:
            raise ValueError("delta_f_range must be ordered")
        if self.sigma_max < 0:
            raise ValueError("sigma_max must be nonnegative")
        if not 0 <= self.noiseless_fraction <= 1:
            raise ValueError("noiseless_fraction must lie in [0, 1]")

    def validate_against(self, priors):
        t_min = min(p.t2star_s for p in priors)
        if t_min + self.delta_t_range[0] <= 0:
            raise ValueError(
                "delta_t_range reaches non-physical decay for the shortest T2*"
            )

    @classmethod
    def default(cls, priors=None, grid=None, a_max=2.0, min_water_snr=4.0):
        """Defaults covering realistic in-vivo shifts and broadening.

        sigma_max is calibrated so that a nominal unit-amplitude water
        resonance at the undistorted linewidth lands at `min_water_snr`.
        """
        priors = default_priors() if priors is None else priors
        grid = SpectralGrid() if grid is None else grid
        sigma_max = sigma_for_water_snr(min_water_snr, priors, grid)
        return cls(
            a_max=a_max,
            delta_t_range=(-0.008, 0.0),
            delta_f_range=(-30.0, 30.0),
            sigma_max=sigma_max,
        )


def nominal_water_peak(priors, grid, amplitude=1.0) -> float:
    """Spectral water peak height of a noiseless unit-water signal."""
    amps = tuple(amplitude if p.name == "water" else 0.0 for p in priors)
    fid = synth_ideal_fid(FidParams(amplitudes=amps), priors, grid)
    return water_peak_height(dft_spectrum(fid))


def sigma_for_water_snr(snr, priors, grid, amplitude=1.0) -> float:
    """Time-domain noise SD that puts the nominal water peak at `snr`."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    return nominal_water_peak(priors, grid, amplitude) / (snr * math.sqrt(grid.n_points))


def sample_parameters(spec, priors, grid, rng, size):
    """Draw `size` parameter sets; the draw order is part of the contract.

    Amplitudes are uniform on [0, a_max]; delta_t / delta_f uniform on their
    ranges; phase uniform on [0, 2*pi); sigma is 0 with probability
    `noiseless_fraction`, otherwise uniform on (0, sigma_max].
    """
    spec.validate_against(priors)
    m = len(priors)
    amplitudes = rng.uniform(0.0, spec.a_max, size=(size, m))
    delta_t = rng.uniform(*spec.delta_t_range, size=size)
    delta_f = rng.uniform(*spec.delta_f_range, size=size)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=size)
    noiseless = rng.random(size) < spec.noiseless_fraction
    sigma = spec.sigma_max * (1.0 - rng.random(size))  # (0, sigma_max]
    sigma[noiseless] = 0.0
    return {
        "amplitudes": amplitudes,
        "delta_t": delta_t,
        "delta_f": delta_f,
        "phase": phase,
        "sigma": sigma,
    }


def _synthesize(params, priors, grid, rng):
    """Vectorized realistic synthesis for a batch of parameter draws."""
    t = grid.times()
    f = np.array([p.offset_hz(grid.reference_frequency_mhz) for p in priors])
    t2 = np.array([p.t2star_s for p in priors])
    df = params["delta_f"][:, None, None]
    dt = params["delta_t"][:, None, None]
    ph = params["phase"][:, None, None]
    arg = 2.0 * np.pi * (f[None, :, None] + df) * t[None, None, :] + ph
    basis = np.exp(1j * arg) * np.exp(-t[None, None, :] / (t2[None, :, None] + dt))
    clean = np.einsum("bm,bmn->bn", params["amplitudes"], basis)
    size, n = clean.shape
    noise = rng.standard_normal((size, 2, n))
    return clean + params["sigma"][:, None] * (noise[:, 0] + 1j * noise[:, 1])


def sample_training_batch(spec, priors, grid, rng, size):
    """(inputs, targets) arrays ready for the network: (B, 2, N) and (B, M)."""
    params = sample_parameters(spec, priors, grid, rng, size)
    fids = _synthesize(params, priors, grid, rng)
    x = np.empty((size, 2, grid.n_points), dtype=np.float32)
    x[:, 0] = fids.real
    x[:, 1] = fids.imag
    return x, params["amplitudes"].astype(np.float32)


def sample_training_pair(spec, priors, grid, rng):
    """One (Fid, amplitude vector) training pair."""
    params = sample_parameters(spec, priors, grid, rng, 1)
    fid = _synthesize(params, priors, grid, rng)[0]
    return Fid(fid, grid), params["amplitudes"][0].copy()


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

SCENARIOS = {"A": 1, "B": 2, "C": 3, "D": 4}


@dataclass(frozen=True)
class TumorSpec:
    name: str
    row0: int
    col0: int
    size: int
    mri_visible: bool
    dmi_abnormal: bool

    @property
    def box(self):
        return (slice(self.row0, self.row0 + self.size),
                slice(self.col0, self.col0 + self.size))


@dataclass(frozen=True)
class B0Config:
    """Smooth field map: linear ramp plus one Gaussian bump, values in Hz."""

    ramp_hz: float = 15.0
    bump_hz: float = 15.0
    bump_center: tuple[float, float] = (13.0, 17.0)
    bump_sigma_vox: float = 4.0
    max_abs_hz: float = 30.0
    # extra decay-time reduction per unit field gradient (intra-voxel
    # dephasing proxy): delta_t -= this * |grad B0| [s per Hz/voxel]
    broaden_s_per_hz_per_vox: float = 1.5e-3


@dataclass(frozen=True)
class B1Config:
    """Surface-coil-like sensitivity: linear falloff along the row axis."""

    top: float = 1.15
    slope: float = 0.45


def _default_profiles():
    return {
        "1": {"water": 1.0, "glc": 0.18, "glx": 0.12, "lac": 0.05},
        "2": {"water": 1.0, "glc": 0.22, "glx": 0.30, "lac": 0.06},
        "3": {"water": 1.0, "glc": 0.28, "glx": 0.40, "lac": 0.10},
        ABNORMAL: {"water": 1.0, "glc": 0.22, "glx": 0.10, "lac": 0.30},
    }


def _default_grays():
    return {"background": 0.0, "1": 0.35, "2": 0.65, "3": 0.95, "tumor": 1.0}


@dataclass(frozen=True)
class PhantomConfig:
    n_voxels: int = 32
    mri_scale: int = 5
    fov_mm: float = 160.0
    # outer mask radius and the two inner compartment borders, voxel units
    radii: tuple[float, float, float] = (15.4, 11.5, 6.5)
    tumor_size: int = 2
    tumor_radius_vox: float = 9.0
    profiles: dict = field(default_factory=_default_profiles)
    grays: dict = field(default_factory=_default_grays)
    b0: B0Config | None = None
    b1: B1Config | None = None
    grid: SpectralGrid = SpectralGrid()

    def __post_init__(self):
        if self.tumor_size not in (1, 2, 4):
            raise ValueError("tumor_size must be one of 1, 2, 4 (voxels per side)")
        if not (self.radii[0] > self.radii[1] > self.radii[2] > 0):
            raise ValueError("radii must be strictly decreasing and positive")

    def to_dict(self):
        d = asdict(self)
        d["b0"] = asdict(self.b0) if self.b0 else None
        d["b1"] = asdict(self.b1) if self.b1 else None
        d["grid"] = asdict(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("b0"):
            d["b0"] = B0Config(**d["b0"])
        if d.get("b1"):
            d["b1"] = B1Config(**d["b1"])
        if d.get("grid"):
            d["grid"] = SpectralGrid(**d["grid"])
        if "radii" in d:
            d["radii"] = tuple(d["radii"])
        return cls(**d)


@dataclass(frozen=True)
class Phantom:
    config: PhantomConfig
    labels: np.ndarray        # 0 background, 1..3 compartments
    scenario: np.ndarray      # 0 none, else SCENARIOS[name]
    mask: np.ndarray
    mri: np.ndarray           # (n*scale, n*scale) gray levels
    truth: dict               # metabolite -> per-voxel amplitude (water units)
    tumors: dict              # name -> TumorSpec
    b0_map: np.ndarray | None
    b1_map: np.ndarray | None

    @property
    def grid(self):
        return self.config.grid


def _tumor_box_start(center: float, size: int) -> int:
    return math.ceil(center - size / 2.0)


def _radial(n):
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    return np.hypot(yy - c, xx - c), c


def build_phantom(config: PhantomConfig | None = None) -> Phantom:
    """Construct compartment labels, scenario maps, MRI and truth maps."""
    config = config or PhantomConfig()
    n = config.n_voxels
    r, center = _radial(n)
    r_out, r_mid, r_in = config.radii

    labels = np.zeros((n, n), dtype=np.int32)
    labels[r < r_out] = 1
    labels[r <= r_mid] = 2
    labels[r <= r_in] = 3
    mask = labels > 0

    # tumors at the cardinal points of the middle ring
    rad = config.tumor_radius_vox
    size = config.tumor_size
    centers = {
        "A": (center, center + rad),
        "B": (center, center - rad),
        "C": (center + rad, center),
        "D": (center - rad, center),
    }
    flags = {"A": (False, False), "B": (False, True),
             "C": (True, True), "D": (True, False)}
    tumors = {}
    occupied = np.zeros_like(mask)
    for name, (cy, cx) in centers.items():
        spec = TumorSpec(name, _tumor_box_start(cy, size), _tumor_box_start(cx, size),
                         size, *flags[name])
        box = spec.box
        if box[0].start < 0 or box[1].start < 0 or box[0].stop > n or box[1].stop > n:
            raise ValueError(f"tumor {name} extends outside the grid")
        host = labels[box]
        if not np.all(host == 2):
            raise ValueError(f"tumor {name} does not sit inside compartment 2")
        if occupied[box].any():
            raise ValueError(f"tumor {name} overlaps another placement")
        occupied[box] = True
        tumors[name] = spec

    scenario = np.zeros((n, n), dtype=np.int8)
    for name, spec in tumors.items():
        scenario[spec.box] = SCENARIOS[name]

    # metabolic truth: abnormal profile where the scenario is B or C
    mets = list(config.profiles["1"])
    truth = {met: np.zeros((n, n)) for met in mets}
    for met in mets:
        for comp in (1, 2, 3):
            truth[met][labels == comp] = config.profiles[str(comp)][met]
    abnormal = np.zeros_like(mask)
    for spec in tumors.values():
        if spec.dmi_abnormal:
            abnormal[spec.box] = True
    for met in mets:
        truth[met][abnormal] = config.profiles[ABNORMAL][met]

    # MRI: block-constant gray per voxel; tumors appear only when visible
    gray_vox = np.zeros((n, n))
    for comp in (1, 2, 3):
        gray_vox[labels == comp] = config.grays[str(comp)]
    gray_vox[~mask] = config.grays["background"]
    for spec in tumors.values():
        if spec.mri_visible:
            gray_vox[spec.box] = config.grays["tumor"]
    mri = np.kron(gray_vox, np.ones((config.mri_scale, config.mri_scale)))

    b0_map = _build_b0(config, n) if config.b0 else None
    b1_map = _build_b1(config, n) if config.b1 else None
    return Phantom(config, labels, scenario, mask, mri, truth, tumors, b0_map, b1_map)


def _build_b0(config, n):
    c = config.b0
    yy, xx = np.mgrid[0:n, 0:n]
    ramp = c.ramp_hz * (xx / (n - 1) - 0.5) * 2.0
    d2 = (yy - c.bump_center[0]) ** 2 + (xx - c.bump_center[1]) ** 2
    bump = c.bump_hz * np.exp(-d2 / (2.0 * c.bump_sigma_vox ** 2))
    return np.clip(ramp + bump, -c.max_abs_hz, c.max_abs_hz)


def _build_b1(config, n):
    c = config.b1
    yy = np.mgrid[0:n, 0:n][0]
    return c.top - c.slope * yy / (n - 1)


def b0_gradient_magnitude(b0_map):
    gy, gx = np.gradient(b0_map)
    return np.hypot(gy, gx)


# ---------------------------------------------------------------------------
# dataset container and phantom -> DMI synthesis
# ---------------------------------------------------------------------------

@dataclass
class DmiDataset:
    """Spatial grid of FIDs with the co-registered MRI and ROI mask.

    `fids` has shape dims + (n_points,); synthetic datasets also carry the
    noiseless signals, the injected noise SD and ground-truth maps so that
    repeated-noise evaluation does not need to re-derive them.
    """

    grid: SpectralGrid
    fids: np.ndarray
    mri: np.ndarray
    mask: np.ndarray
    fov_mm: float
    priors: tuple[MetabolitePrior, ...]
    calibration: float = 1.0
    b0: np.ndarray | None = None
    b1: np.ndarray | None = None
    clean_fids: np.ndarray | None = None
    noise_sd: float | None = None
    truth: dict | None = None
    labels: np.ndarray | None = None
    scenario: np.ndarray | None = None

    def __post_init__(self):
        if self.fids.shape[:-1] != self.mask.shape:
            raise ValueError("fids and mask dims disagree")
        if self.fids.shape[-1] != self.grid.n_points:
            raise ValueError("fids length must equal grid.n_points")

    @property
    def dims(self):
        return self.mask.shape

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))


def _voxel_noise(seed, n_voxels, n_points):
    """Unit complex noise per voxel from per-voxel child streams.

    Stream v depends only on (seed, v), so any evaluation order or degree
    of parallelism reproduces the same dataset.
    """
    children = np.random.SeedSequence(seed).spawn(n_voxels)
    out = np.empty((n_voxels, n_points), dtype=np.complex128)
    for v, child in enumerate(children):
        draws = np.random.default_rng(child).standard_normal((2, n_points))
        out[v] = draws[0] + 1j * draws[1]
    return out


def _clean_voxel_fids(phantom, priors):
    """Noiseless per-voxel signals including B0/B1 effects, flat (V, N)."""
    cfg = phantom.config
    grid = cfg.grid
    n = cfg.n_voxels
    mets = [p.name for p in priors]
    amps = np.stack([phantom.truth[m].ravel() for m in mets], axis=1)
    if phantom.b1_map is not None:
        amps = amps * phantom.b1_map.ravel()[:, None]
    delta_f = (phantom.b0_map.ravel() if phantom.b0_map is not None
               else np.zeros(n * n))
    if phantom.b0_map is not None and cfg.b0 is not None:
        grad = b0_gradient_magnitude(phantom.b0_map).ravel()
        delta_t = -cfg.b0.broaden_s_per_hz_per_vox * grad
        t_min = min(p.t2star_s for p in priors)
        delta_t = np.maximum(delta_t, -0.75 * t_min)
    else:
        delta_t = np.zeros(n * n)

    clean = np.zeros((n * n, grid.n_points), dtype=np.complex128)
    for v in range(n * n):
        if not amps[v].any():
            continue
        basis = metabolite_basis(priors, grid, delta_f[v], delta_t[v])
        clean[v] = amps[v] @ basis
    return clean, amps


def phantom_to_dmi(phantom: Phantom, target_water_snr: float, seed: int,
                   priors=None) -> DmiDataset:
    """Synthesize a noisy dataset whose measured water SNR hits the target.

    The noise SD is solved against the realized data: with the per-voxel
    unit-noise draws held fixed, sigma is bisected until the mean measured
    water SNR over compartment-3 voxels matches `target_water_snr`.
    """
    if target_water_snr <= 0:
        raise ValueError("unreachable SNR: target must be positive")
    priors = default_priors() if priors is None else priors
    cfg = phantom.config
    grid = cfg.grid
    n = cfg.n_voxels

    clean, amps = _clean_voxel_fids(phantom, priors)
    unit = _voxel_noise(seed, n * n, grid.n_points)

    comp3 = (phantom.labels.ravel() == 3).nonzero()[0]
    window = water_window(grid)
    spec_clean = np.fft.fftshift(np.fft.fft(clean[comp3]), axes=-1)[:, window]
    spec_unit = np.fft.fftshift(np.fft.fft(unit[comp3]), axes=-1)[:, window]
    sqrt_n = math.sqrt(grid.n_points)

    def measured(sigma):
        mags = np.abs(spec_clean + sigma * spec_unit)
        return float(mags.max(axis=1).mean()) / (sigma * sqrt_n)

    peak0 = float(np.abs(spec_clean).max(axis=1).mean())
    sigma0 = peak0 / (target_water_snr * sqrt_n)
    lo, hi = sigma0 / 16.0, sigma0 * 16.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if measured(mid) > target_water_snr:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)

    fids = (clean + sigma * unit).reshape(n, n, grid.n_points)
    truth = {p.name: phantom.truth[p.name].copy() for p in priors}
    if phantom.b1_map is not None:
        truth = {m: g * phantom.b1_map for m, g in truth.items()}
    for g in truth.values():
        g[~phantom.mask] = np.nan

    return DmiDataset(
        grid=grid,
        fids=fids.astype(np.complex64),
        mri=phantom.mri.copy(),
        mask=phantom.mask.copy(),
        fov_mm=cfg.fov_mm,
        priors=tuple(priors),
        b0=None if phantom.b0_map is None else phantom.b0_map.copy(),
        b1=None if phantom.b1_map is None else phantom.b1_map.copy(),
        clean_fids=clean.reshape(n, n, grid.n_points).astype(np.complex64),
        noise_sd=float(sigma),
        truth=truth,
        labels=phantom.labels.copy(),
        scenario=phantom.scenario.copy(),
    )


def resample_noise(dataset: DmiDataset, seed: int, sigma=None) -> np.ndarray:
    """Fresh noisy FIDs from the stored noiseless signals (repeat trials)."""
    if dataset.clean_fids is None:
        raise ValueError("dataset carries no noiseless reference signals")
    sigma = dataset.noise_sd if sigma is None else sigma
    if sigma is None:
        raise ValueError("no noise level stored or supplied")
    n_vox = dataset.n_voxels
    unit = _voxel_noise(seed, n_vox, dataset.grid.n_points)
    clean = dataset.clean_fids.reshape(n_vox, -1).astype(np.complex128)
    return (clean + sigma * unit).reshape(dataset.fids.shape).astype(np.complex64)
