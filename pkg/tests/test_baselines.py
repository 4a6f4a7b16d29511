import numpy as np
import pytest

from precisedmi.baselines import (
    DiffusionConfig,
    IntegrationWindows,
    anisotropic_diffusion,
    fourier_amplitudes,
    fourier_estimator,
    spectral_fit,
)
from precisedmi.signal_model import (
    FidParams,
    synth_ideal_fid,
    synth_realistic_fid,
)


# ---------------------------------------------------------------------------
# Fourier integration
# ---------------------------------------------------------------------------

def test_default_windows_disjoint_and_clipped(priors, grid):
    windows = IntegrationWindows.default(priors, grid)
    by_lo = sorted(windows.bounds)
    for (lo1, hi1), (lo2, hi2) in zip(by_lo, by_lo[1:]):
        assert hi1 <= lo2
    f = [p.offset_hz(grid.reference_frequency_mhz) for p in priors]
    mid = (f[0] + f[1]) / 2
    # the broad water window is clipped at the water/glucose midpoint;
    # glucose's own half-width already stays inside it
    assert windows.bounds[0][0] == pytest.approx(mid)
    natural_glc_hi = f[1] + 3 / (np.pi * priors[1].t2star_s)
    assert natural_glc_hi < mid
    assert windows.bounds[1][1] == pytest.approx(natural_glc_hi)


def test_overlapping_windows_rejected():
    with pytest.raises(ValueError):
        IntegrationWindows(names=("a", "b"), bounds=((0.0, 10.0), (5.0, 15.0)))
    with pytest.raises(ValueError):
        IntegrationWindows(names=("a",), bounds=((3.0, 3.0),))


@pytest.mark.parametrize("met", [0, 1, 2, 3])
def test_fourier_single_line_recovery(priors, grid, met):
    windows = IntegrationWindows.default(priors, grid)
    amps = [0.0] * 4
    amps[met] = 1.0
    fid = synth_ideal_fid(FidParams(amplitudes=amps), priors, grid)
    est = fourier_amplitudes(fid, windows, priors)
    assert est[met] == pytest.approx(1.0, abs=0.05)


def test_fourier_zero_fid(priors, grid):
    from precisedmi.signal_model import Fid

    windows = IntegrationWindows.default(priors, grid)
    est = fourier_amplitudes(Fid(np.zeros(grid.n_points, complex), grid),
                             windows, priors)
    assert np.all(est == 0.0)


def test_fourier_offresonance_underestimates(priors, grid):
    # shifting a line out of its window is a documented failure mode
    windows = IntegrationWindows.default(priors, grid)
    params = FidParams(amplitudes=(0, 0, 1.0, 0), delta_f_hz=40.0)
    fid = synth_realistic_fid(params, priors, grid, np.random.default_rng(0))
    est = fourier_amplitudes(fid, windows, priors)
    assert est[2] < 0.8


def test_fourier_scaling_and_additivity_structure(priors, grid):
    # magnitude integration is exactly positively homogeneous and exactly
    # additive for same-shape signals; for different metabolites it is
    # subadditive (triangle inequality), with the deficit set by how much
    # of one line's tail reaches the other's window
    windows = IntegrationWindows.default(priors, grid)
    estimator = fourier_estimator(windows, priors, grid)
    water = synth_ideal_fid(FidParams(amplitudes=(1.0, 0, 0, 0)), priors, grid)
    glx = synth_ideal_fid(FidParams(amplitudes=(0, 0, 0.7, 0)), priors, grid)
    assert np.allclose(estimator(3.0 * water.samples),
                       3.0 * estimator(water.samples), rtol=1e-12)
    assert np.allclose(estimator(water.samples + 2.0 * water.samples),
                       estimator(water.samples) + estimator(2.0 * water.samples),
                       rtol=1e-12)
    combined = estimator(water.samples + glx.samples)[0]
    separate = estimator(water.samples)[0] + estimator(glx.samples)[0]
    assert np.all(combined <= separate + 1e-9)
    # each metabolite's own window is still dominated by its own line
    assert combined[0] == pytest.approx(1.0, abs=0.1)
    assert combined[2] == pytest.approx(0.7, abs=0.1)


# ---------------------------------------------------------------------------
# spectral fitting
# ---------------------------------------------------------------------------

def _random_params(rng):
    return FidParams(
        amplitudes=tuple(rng.uniform(0.1, 2.0, size=4)),
        delta_f_hz=float(rng.uniform(-25.0, 25.0)),
        delta_t_s=float(rng.uniform(-0.006, 0.0)),
        phase_rad=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _angle_diff(a, b):
    return abs((a - b + np.pi) % (2 * np.pi) - np.pi)


@pytest.mark.parametrize("seed", range(5))
def test_fit_recovers_noiseless_parameters(priors, grid, seed):
    rng = np.random.default_rng(seed)
    truth = _random_params(rng)
    fid = synth_realistic_fid(truth, priors, grid, rng)
    res = spectral_fit(fid, priors)
    assert res.converged
    assert np.allclose(res.amplitudes, truth.amplitudes, rtol=1e-6)
    assert res.delta_f_hz == pytest.approx(truth.delta_f_hz, abs=1e-6 * 30)
    assert res.delta_t_s == pytest.approx(truth.delta_t_s, abs=1e-6 * 0.01)
    assert _angle_diff(res.phase_rad, truth.phase_rad) < 1e-6 * 2 * np.pi


def test_fit_residual_monotone_over_accepted_steps(priors, grid):
    rng = np.random.default_rng(11)
    truth = _random_params(rng)
    noisy = synth_realistic_fid(
        FidParams(amplitudes=truth.amplitudes, delta_f_hz=truth.delta_f_hz,
                  delta_t_s=truth.delta_t_s, phase_rad=truth.phase_rad,
                  noise_sd=0.05),
        priors, grid, rng)
    res = spectral_fit(noisy, priors)
    hist = res.residual_history
    assert len(hist) >= 2
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_fit_nonneg_amplitudes_on_noise(priors, grid):
    from precisedmi.signal_model import complex_noise

    rng = np.random.default_rng(4)
    y = complex_noise(grid.n_points, 0.3, rng)
    res = spectral_fit(y, priors, grid)
    assert np.all(res.amplitudes >= 0.0)


# ---------------------------------------------------------------------------
# anisotropic diffusion
# ---------------------------------------------------------------------------

def test_diffusion_constant_map_is_fixed_point():
    config = DiffusionConfig(threshold_pct=10.0, iterations=25, step=0.25)
    values = np.full((12, 12), 3.7)
    out = anisotropic_diffusion(values, config)
    assert np.array_equal(out, values)


def test_diffusion_conserves_sum_and_respects_nan():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((16, 16))
    values[0:3, 0:3] = np.nan
    config = DiffusionConfig(threshold_pct=15.0, iterations=30, step=0.2)
    out = anisotropic_diffusion(values, config)
    finite = np.isfinite(values)
    assert np.array_equal(np.isfinite(out), finite)
    assert out[finite].sum() == pytest.approx(values[finite].sum(), rel=1e-12)


def test_diffusion_extremum_principle():
    rng = np.random.default_rng(1)
    config = DiffusionConfig(threshold_pct=20.0, iterations=15, step=0.25)
    for _ in range(20):
        values = rng.standard_normal((10, 14))
        out = anisotropic_diffusion(values, config)
        assert out.max() <= values.max() + 1e-12
        assert out.min() >= values.min() - 1e-12


def test_diffusion_large_threshold_approaches_uniform_blur():
    rng = np.random.default_rng(2)
    values = rng.standard_normal((12, 12))
    config = DiffusionConfig(threshold_pct=1e6, iterations=400, step=0.25)
    out = anisotropic_diffusion(values, config)
    assert out.sum() == pytest.approx(values.sum(), rel=1e-10)
    assert out.std() < 0.05 * values.std()


def test_diffusion_step_stability_bound():
    with pytest.raises(ValueError):
        anisotropic_diffusion(np.zeros((4, 4)),
                              DiffusionConfig(step=0.3))
    with pytest.raises(ValueError):
        anisotropic_diffusion(np.zeros((4, 4, 4)),
                              DiffusionConfig(step=0.2))
    # 3D accepts steps up to 1/6
    anisotropic_diffusion(np.zeros((4, 4, 4)), DiffusionConfig(step=1 / 6))
