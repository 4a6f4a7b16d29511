"""Parametric FID synthesis, spectral transforms and unit conversions.

Conventions fixed here and shared by every other module:

* Frequencies are offsets from the water resonance at 4.7 ppm, so water is
  on-resonance at 0 Hz and a global field shift enters as a plain Hz offset.
  ppm offsets convert to Hz by multiplying with the reference frequency in
  MHz.
* The forward DFT is the unnormalized numpy transform (no 1/N factor) with
  bins shifted so the frequency axis spans [-spectral_width/2,
  +spectral_width/2); a time signal exp(+2*pi*i*f*t) peaks at +f Hz.
  Time-domain noise of SD sigma per component therefore appears in the
  spectrum with per-bin SD sigma*sqrt(n_points) per component.
* Noise is circular complex Gaussian: independent real and imaginary parts,
  each with SD sigma. (A single "noise SD" printed elsewhere is read as this
  per-component value.)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

WATER_PPM = 4.7
NATURAL_ABUNDANCE_WATER_MM = 10.0
SNR_WINDOW_PPM = 0.5


@dataclass(frozen=True)
class MetabolitePrior:
    """Fixed per-resonance knowledge: chemical shift and T2* decay time."""

    name: str
    chemical_shift_ppm: float
    t2star_s: float

    def __post_init__(self):
        if self.t2star_s <= 0:
            raise ValueError(f"t2star_s must be positive, got {self.t2star_s}")

    def offset_hz(self, reference_frequency_mhz: float) -> float:
        return (self.chemical_shift_ppm - WATER_PPM) * reference_frequency_mhz


def default_priors() -> tuple[MetabolitePrior, ...]:
    """Load the packaged editable defaults (water, Glc, Glx, Lac)."""
    text = resources.files("precisedmi.data").joinpath("default_priors.json").read_text()
    spec = json.loads(text)
    return tuple(
        MetabolitePrior(m["name"], m["chemical_shift_ppm"], m["t2star_s"])
        for m in spec["metabolites"]
    )


@dataclass(frozen=True)
class SpectralGrid:
    """Sampling geometry of an FID."""

    n_points: int = 512
    spectral_width_hz: float = 2500.0
    reference_frequency_mhz: float = 76.7

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if self.spectral_width_hz <= 0:
            raise ValueError("spectral_width_hz must be positive")

    @property
    def dwell_time_s(self) -> float:
        return 1.0 / self.spectral_width_hz

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dwell_time_s

    def freq_axis_hz(self) -> np.ndarray:
        return np.fft.fftshift(np.fft.fftfreq(self.n_points, self.dwell_time_s))


@dataclass(frozen=True)
class FidParams:
    """Ground-truth signal parameters of one voxel."""

    amplitudes: tuple[float, ...]
    delta_f_hz: float = 0.0
    delta_t_s: float = 0.0
    phase_rad: float = 0.0
    noise_sd: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if any(a < 0 for a in self.amplitudes):
            raise ValueError("amplitudes must be nonnegative")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not 0 <= self.phase_rad < 2 * np.pi:
            raise ValueError("phase_rad must lie in [0, 2*pi)")

    def validate_against(self, priors):
        if len(self.amplitudes) != len(priors):
            raise ValueError(
                f"{len(self.amplitudes)} amplitudes for {len(priors)} priors"
            )
        for p in priors:
            if p.t2star_s + self.delta_t_s <= 0:
                raise ValueError(
                    f"non-physical decay: T2*({p.name}) + delta_t = "
                    f"{p.t2star_s + self.delta_t_s:g} s"
                )


@dataclass(frozen=True)
class Fid:
    """Complex time-domain signal on a sampling grid."""

    samples: np.ndarray
    grid: SpectralGrid

    def __post_init__(self):
        if self.samples.shape != (self.grid.n_points,):
            raise ValueError("samples length must equal grid.n_points")


@dataclass(frozen=True)
class Spectrum:
    """DFT of an FID; bins ordered along the shifted frequency axis."""

    bins: np.ndarray
    grid: SpectralGrid

    def freq_axis_hz(self) -> np.ndarray:
        return self.grid.freq_axis_hz()


def metabolite_basis(priors, grid, delta_f_hz=0.0, delta_t_s=0.0, phase_rad=0.0):
    """Unit-amplitude signal of each resonance, shape (n_metabolites, n_points).

    Row m is exp(i*phase) * exp(2*pi*i*(f_m+delta_f)*t) * exp(-t/(T_m+delta_t)),
    i.e. the derivative of the noiseless signal with respect to amplitude m.
    """
    t = grid.times()
    f = np.array([p.offset_hz(grid.reference_frequency_mhz) for p in priors])
    t2 = np.array([p.t2star_s for p in priors]) + delta_t_s
    if np.any(t2 <= 0):
        raise ValueError("non-physical decay: T2* + delta_t must be positive")
    phase = 2.0 * np.pi * (f[:, None] + delta_f_hz) * t[None, :] + phase_rad
    return np.exp(1j * phase) * np.exp(-t[None, :] / t2[:, None])


def synth_ideal_fid(params: FidParams, priors, grid: SpectralGrid) -> Fid:
    """Noiseless, undistorted signal: sum of damped complex sinusoids."""
    if params.noise_sd or params.delta_f_hz or params.delta_t_s or params.phase_rad:
        raise ValueError("ideal synthesis requires sigma = delta_f = delta_t = phase = 0")
    params.validate_against(priors)
    basis = metabolite_basis(priors, grid)
    return Fid(np.asarray(params.amplitudes) @ basis, grid)


def synth_realistic_fid(params: FidParams, priors, grid: SpectralGrid,
                        rng: np.random.Generator) -> Fid:
    """Distorted noisy signal; deterministic for a given generator state."""
    params.validate_against(priors)
    basis = metabolite_basis(priors, grid, params.delta_f_hz, params.delta_t_s,
                             params.phase_rad)
    clean = np.asarray(params.amplitudes) @ basis
    noise = complex_noise(grid.n_points, params.noise_sd, rng)
    return Fid(clean + noise, grid)


def complex_noise(n, sd, rng):
    """Circular complex Gaussian noise, SD `sd` per component."""
    draws = rng.standard_normal((2, n))
    return sd * (draws[0] + 1j * draws[1])


def dft_spectrum(fid: Fid) -> Spectrum:
    return Spectrum(np.fft.fftshift(np.fft.fft(fid.samples)), fid.grid)


def idft_fid(spectrum: Spectrum) -> Fid:
    return Fid(np.fft.ifft(np.fft.ifftshift(spectrum.bins)), spectrum.grid)


def water_window(grid: SpectralGrid) -> np.ndarray:
    """Boolean bin mask of the +-0.5 ppm search window around water."""
    half = SNR_WINDOW_PPM * grid.reference_frequency_mhz
    return np.abs(grid.freq_axis_hz()) <= half


def water_peak_height(spectrum: Spectrum) -> float:
    return float(np.abs(spectrum.bins[water_window(spectrum.grid)]).max())


def water_snr(spectrum: Spectrum, noise_sd_spectral: float) -> float:
    """Water peak magnitude over the spectral per-component noise SD."""
    if noise_sd_spectral <= 0:
        raise ValueError("noise_sd_spectral must be positive")
    return water_peak_height(spectrum) / noise_sd_spectral


def spectral_noise_sd(bins: np.ndarray) -> float:
    """Noise SD per component estimated from the outermost 10% of bins.

    The band edges of a well-centered acquisition carry no resonances, so
    the pooled SD of their real and imaginary parts estimates the spectral
    noise level (sigma*sqrt(n_points) for white time-domain noise).
    """
    n = len(bins)
    k = max(1, n // 20)
    tail = np.concatenate([bins[:k], bins[-k:]])
    parts = np.concatenate([tail.real, tail.imag])
    return float(parts.std())


def ratio_to_concentration(ratio: float) -> float:
    """Metabolite/water ratio to mM via the natural-abundance water level."""
    if ratio < 0:
        raise ValueError("ratio must be nonnegative")
    return ratio * NATURAL_ABUNDANCE_WATER_MM
