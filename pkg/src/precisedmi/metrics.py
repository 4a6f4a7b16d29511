"""Precision/accuracy quantification: CRLB, Monte Carlo sweeps, bias/SD maps
and the indirect error-estimation procedure for measured data.

Two routes to the amplitude CRLB are kept deliberately separate: the
closed-form expression as printed in the source material (`crlb_amplitude`,
whose prefactor reading is ambiguous) and an independent Fisher-information
construction (`fisher_crlb_numeric`). The numeric route is the reference;
commands report both side by side.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import neuralnet as nn
from .baselines import IntegrationWindows, fourier_estimator, spectral_fit
from .edge_finetune import (
    FinetuneConfig,
    finetune,
    precise_dmi,
    preprocess_mri,
    spatial_prior_for,
)
from .errors import NumericalError
from .signal_model import (
    FidParams,
    default_priors,
    metabolite_basis,
    spectral_noise_sd,
    water_window,
)
from .synth import DmiDataset, Phantom, resample_noise


# ---------------------------------------------------------------------------
# CRLB
# ---------------------------------------------------------------------------

def crlb_amplitude(t2star_s, dwell_s, sigma, amplitudes, index=2) -> float:
    """Literal closed-form amplitude bound, (2T)^(-1/4) * sqrt(ts) * sigma * R.

    R doubles the target amplitude's squared contribution in the numerator:
    R = sqrt((sum(A^2) + A_index^2) / sum(A^2)). The printed prefactor is
    typographically ambiguous; this evaluates the literal reading and is
    reported alongside the numeric Fisher bound, which is authoritative.
    """
    if t2star_s <= 0 or dwell_s <= 0:
        raise ValueError("t2star_s and dwell_s must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    a2 = np.square(np.asarray(amplitudes, dtype=float))
    total = a2.sum()
    if total == 0:
        raise ValueError("at least one amplitude must be nonzero")
    r = math.sqrt((total + a2[index]) / total)
    return (2.0 * t2star_s) ** -0.25 * math.sqrt(dwell_s) * sigma * r


def fisher_crlb_numeric(priors, grid, params: FidParams,
                        include_nuisance=False) -> np.ndarray:
    """Amplitude bounds from the inverted Fisher information matrix.

    The derivative of the noiseless signal with respect to amplitude m is
    the unit-amplitude basis signal, so the information matrix under
    circular complex noise (SD sigma per component) is
    I = Re(B B^H) / sigma^2. With include_nuisance=True the common
    frequency shift, line broadening and phase join as nuisance parameters
    and the amplitude bounds come from the marginal (inverted) block.
    """
    params.validate_against(priors)
    m = len(priors)
    if params.noise_sd == 0:
        return np.zeros(m)
    basis = metabolite_basis(priors, grid, params.delta_f_hz, params.delta_t_s,
                             params.phase_rad)
    rows = [basis]
    if include_nuisance:
        amps = np.asarray(params.amplitudes)
        t = grid.times()
        t2 = np.array([p.t2star_s for p in priors]) + params.delta_t_s
        model = amps @ basis
        rows.append((2j * np.pi * t * model)[None, :])
        rows.append((amps[:, None] * basis * (t[None, :] / t2[:, None] ** 2))
                    .sum(axis=0)[None, :])
        rows.append((1j * model)[None, :])
    d = np.concatenate(rows, axis=0)
    info = np.real(d @ d.conj().T) / params.noise_sd ** 2
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular Fisher information (degenerate design)") from exc
    diag = np.diag(cov)[:m]
    if np.any(diag <= 0):
        raise NumericalError("Fisher information is not positive definite")
    return np.sqrt(diag)


# ---------------------------------------------------------------------------
# Monte Carlo on one voxel
# ---------------------------------------------------------------------------

def default_snr_levels(n=14, lo=5.0, hi=35.0):
    return tuple(float(x) for x in np.linspace(lo, hi, n))


@dataclass(frozen=True)
class McConfig:
    trials: int = 1000                  # desk-scale runs use ~200
    snr_levels: tuple = field(default_factory=default_snr_levels)
    metabolite: str = "glx"
    estimators: tuple = ("fourier", "sve")
    seed: int = 0
    # "fixed": only the noise is redrawn per trial. "resample": the
    # acquisition distortions (delta_f, delta_t, phase) are also redrawn,
    # mimicking repeat-acquisition variability.
    distortions: str = "fixed"
    resample_delta_f_range: tuple = (-20.0, 20.0)
    resample_delta_t_range: tuple = (-0.004, 0.0)
    precise_lambda: float = 0.01
    patch: int = 9                      # patch side used by the precise estimator

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("trials must be at least 2")
        if list(self.snr_levels) != sorted(self.snr_levels):
            raise ValueError("snr_levels must be sorted")
        if self.distortions not in ("fixed", "resample"):
            raise ValueError(f"unknown distortions mode {self.distortions!r}")


@dataclass
class McContext:
    """Clean signals around the studied voxel plus its ground truth."""

    clean: np.ndarray            # (P, n_points) complex, in-mask patch voxels
    amplitudes: np.ndarray       # (P, M) underlying amplitudes
    center: int                  # row of the studied voxel in `clean`
    truth: np.ndarray            # (M,) amplitudes at the center
    grid: object
    priors: tuple
    prior: object | None = None  # SpatialPrior over the patch, for `precise`
    water_peak: float = 0.0


def compartment3_voxel(phantom: Phantom):
    """In-mask compartment-3 voxel closest to the grid center."""
    n = phantom.config.n_voxels
    c = (n - 1) / 2.0
    cand = np.argwhere((phantom.labels == 3) & (phantom.scenario == 0))
    if not len(cand):
        raise ValueError("phantom has no compartment-3 voxels")
    d = np.hypot(cand[:, 0] - c, cand[:, 1] - c)
    return tuple(int(v) for v in cand[np.argmin(d)])


def phantom_mc_context(phantom: Phantom, priors=None, voxel=None,
                       patch=9, omega_max=100.0) -> McContext:
    """Monte-Carlo context for one phantom voxel.

    `patch` is the side of the square neighborhood carried along for the
    regularized estimator (0 or 1 keeps only the voxel itself). A patch is
    a desk-scale stand-in for running the full image through the pipeline
    on every trial; the voxel's local smoothing behavior is preserved.
    """
    from .synth import _clean_voxel_fids  # local import; shares one synthesizer

    priors = default_priors() if priors is None else priors
    voxel = compartment3_voxel(phantom) if voxel is None else tuple(voxel)
    n = phantom.config.n_voxels
    clean_all, amps_all = _clean_voxel_fids(phantom, priors)

    side = max(int(patch), 1)
    half = side // 2
    y0, x0 = (max(0, voxel[0] - half), max(0, voxel[1] - half))
    y1, x1 = (min(n, y0 + side), min(n, x0 + side))
    y0, x0 = max(0, y1 - side), max(0, x1 - side)
    region = np.zeros((n, n), dtype=bool)
    region[y0:y1, x0:x1] = True
    sel = region & phantom.mask
    if not sel[voxel]:
        raise ValueError(f"voxel {voxel} is outside the mask")
    flat = np.flatnonzero(sel.ravel())
    clean = clean_all[flat]
    center = int(np.searchsorted(flat, voxel[0] * n + voxel[1]))

    prior = None
    if side > 1:
        scale = phantom.config.mri_scale
        mri_patch = phantom.mri[y0 * scale:y1 * scale, x0 * scale:x1 * scale]
        prior = preprocess_mri(mri_patch, sel[y0:y1, x0:x1],
                               (y1 - y0, x1 - x0), omega_max)
    window = water_window(phantom.grid)
    spec = np.fft.fftshift(np.fft.fft(clean[center]))
    return McContext(clean=clean, amplitudes=amps_all[flat].copy(), center=center,
                     truth=amps_all[flat[center]].copy(),
                     grid=phantom.grid, priors=tuple(priors), prior=prior,
                     water_peak=float(np.abs(spec[window]).max()))


def _trial_rng(seed, level_index, trial):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(level_index, trial)))


def _distort(ctx, rng, mc):
    """Re-synthesize the patch with freshly drawn common distortions."""
    df = rng.uniform(*mc.resample_delta_f_range)
    dt = rng.uniform(*mc.resample_delta_t_range)
    ph = rng.uniform(0.0, 2.0 * np.pi)
    basis = metabolite_basis(ctx.priors, ctx.grid, df, dt, ph)
    return ctx.amplitudes @ basis


@dataclass
class MonteCarloResult:
    config: McConfig
    metabolite: str
    rows: list

    def column(self, estimator, key):
        return [r[key] for r in self.rows if r["estimator"] == estimator]


def monte_carlo(ctx: McContext, mc: McConfig, net=None, windows=None,
                finetune_config=None) -> MonteCarloResult:
    """Percentage-error statistics per SNR level and estimator.

    All estimators of a trial see the same noisy data (paired design), so
    estimator evaluation order cannot change any statistic. Results are
    deterministic per (seed, config).
    """
    priors = ctx.priors
    grid = ctx.grid
    names = [p.name for p in priors]
    met_i = names.index(mc.metabolite)
    water_i = names.index("water")
    truth_amp = float(ctx.truth[met_i])
    truth_ratio = truth_amp / float(ctx.truth[water_i])

    if any(e in ("sve", "precise") for e in mc.estimators) and net is None:
        raise ValueError("a trained network is required for sve/precise")
    if "precise" in mc.estimators and ctx.prior is None:
        raise ValueError("precise estimator needs a patch context (patch > 1)")
    windows = IntegrationWindows.default(priors, grid) if windows is None else windows
    fourier = fourier_estimator(windows, priors, grid)
    ft_cfg = finetune_config or FinetuneConfig(lam=mc.precise_lambda)

    n_pts = grid.n_points
    p_vox = ctx.clean.shape[0]
    rows = []
    for li, level in enumerate(mc.snr_levels):
        sigma = ctx.water_peak / (level * math.sqrt(n_pts))
        estimates = {e: np.empty((mc.trials, len(priors))) for e in mc.estimators}
        failures = {e: 0 for e in mc.estimators}
        for trial in range(mc.trials):
            rng = _trial_rng(mc.seed, li, trial)
            clean = ctx.clean
            if mc.distortions == "resample":
                clean = _distort(ctx, rng, mc)
            draws = rng.standard_normal((p_vox, 2, n_pts))
            noisy = clean + sigma * (draws[:, 0] + 1j * draws[:, 1])
            y = noisy[ctx.center]
            for est in mc.estimators:
                if est == "fourier":
                    estimates[est][trial] = fourier(y)[0]
                elif est == "sve":
                    estimates[est][trial] = nn.predict_amplitudes(net, y)[0]
                elif est == "fit":
                    res = spectral_fit(y, priors, grid, windows=windows)
                    estimates[est][trial] = np.maximum(res.amplitudes, 0.0)
                    failures[est] += 0 if res.converged else 1
                elif est == "precise":
                    estimates[est][trial] = _precise_on_patch(
                        noisy, ctx, net, ft_cfg)
                else:
                    raise ValueError(f"unknown estimator {est!r}")
        crlb = fisher_crlb_numeric(
            priors, grid,
            FidParams(amplitudes=tuple(ctx.truth), noise_sd=sigma))
        for est in mc.estimators:
            amp = estimates[est][:, met_i]
            water = estimates[est][:, water_i]
            ok = water > 0
            ratio = np.where(ok, amp / np.where(ok, water, 1.0), np.nan)
            ratio_err = 100.0 * (ratio - truth_ratio) / truth_ratio
            amp_err = 100.0 * (amp - truth_amp) / truth_amp
            rows.append({
                "snr": float(level),
                "estimator": est,
                "trials": mc.trials,
                "sigma": float(sigma),
                "ratio_mean_err_pct": float(np.nanmean(ratio_err)),
                "ratio_sd_pct": float(np.nanstd(ratio_err, ddof=1)),
                "amp_mean_err_pct": float(np.mean(amp_err)),
                "amp_sd_pct": float(np.std(amp_err, ddof=1)),
                "amp_sd_abs": float(np.std(amp, ddof=1)),
                "crlb_amp_abs": float(crlb[met_i]),
                "failures": failures[est],
            })
    return MonteCarloResult(config=mc, metabolite=mc.metabolite, rows=rows)


def _precise_on_patch(noisy_patch, ctx, net, ft_cfg):
    """Full fine-tune pipeline on the carried patch; one trial.

    Rows of the patch follow masked voxel-major order, matching the
    order `finetune` uses internally.
    """
    mask = ctx.prior.mask
    fids = np.zeros(mask.shape + (ctx.grid.n_points,), dtype=np.complex64)
    fids[mask] = noisy_patch
    dataset = DmiDataset(grid=ctx.grid, fids=fids,
                         mri=np.zeros(mask.shape), mask=mask,
                         fov_mm=0.0, priors=ctx.priors)
    net2 = finetune(dataset, net, ctx.prior, ft_cfg)
    return nn.predict_amplitudes(net2, noisy_patch)[ctx.center]


# ---------------------------------------------------------------------------
# repeated-noise map evaluation
# ---------------------------------------------------------------------------

@dataclass
class ErrorMaps:
    """Per-voxel |bias| and sample SD grids from repeated estimates."""

    bias: dict
    sd: dict
    trials: int
    mode: str  # "ground-truth" or "estimated"


def bias_sd_maps(stacks: dict, truth: dict, mode="ground-truth") -> ErrorMaps:
    """Voxel-wise |mean - truth| and sample SD over a repeat axis."""
    bias = {}
    sd = {}
    trials = None
    for met, stack in stacks.items():
        stack = np.asarray(stack)
        if stack.shape[0] < 2:
            raise ValueError("at least two repeats required")
        trials = stack.shape[0]
        mean = stack.mean(axis=0)
        bias[met] = np.abs(mean - truth[met])
        sd[met] = stack.std(axis=0, ddof=1)
    return ErrorMaps(bias=bias, sd=sd, trials=trials, mode=mode)


@dataclass(frozen=True)
class MapEstimator:
    """Picklable description of a map-producing estimator."""

    kind: str                    # 'fourier' | 'sve' | 'precise' | 'fit'
    net: object | None = None
    lam: float = 0.0
    omega_max: float = 100.0
    windows_factor: float = 3.0
    finetune_epochs: int = 10

    def run(self, dataset: DmiDataset, features=None):
        """Returns {'amplitude': {met: grid}, 'ratio': {met: grid}}.

        `features` may carry the conv-part features of the in-mask voxels;
        the conv part is frozen in every network-based estimator, so one
        computation serves the whole trial.
        """
        if self.kind == "fourier":
            return _fourier_maps(dataset, self.windows_factor)
        if self.kind == "fit":
            return _fit_maps(dataset, self.windows_factor)
        if self.kind not in ("sve", "precise"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if features is None:
            fids = dataset.fids.reshape(dataset.n_voxels, -1)[dataset.mask.ravel()]
            features = nn.conv_features(self.net, fids)
        net = self.net
        if self.kind == "precise":
            prior = spatial_prior_for(dataset, self.omega_max)
            cfg = FinetuneConfig(lam=self.lam, epochs=self.finetune_epochs)
            net = finetune(dataset, self.net, prior, cfg, features=features)
        maps = precise_dmi(dataset, net, features=features)
        return {"amplitude": maps.amplitude, "ratio": maps.ratio}


def _same_conv_part(a, b):
    return a is b or all(np.array_equal(a.tensors[n], b.tensors[n])
                         for n in a.conv_names())


def _grids_from_masked(values, mask, names):
    out = {}
    for j, met in enumerate(names):
        grid = np.full(mask.shape, np.nan)
        grid[mask] = values[:, j]
        out[met] = grid
    return out


def _fourier_maps(dataset, windows_factor):
    windows = IntegrationWindows.default(dataset.priors, dataset.grid,
                                         windows_factor)
    est = fourier_estimator(windows, dataset.priors, dataset.grid)
    fids = dataset.fids.reshape(dataset.n_voxels, -1)[dataset.mask.ravel()]
    amps = est(fids)
    names = [p.name for p in dataset.priors]
    amplitude = _grids_from_masked(amps, dataset.mask, names)
    water = amplitude["water"]
    ratio = {}
    for met in names:
        if met == "water":
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio[met] = amplitude[met] / water
    return {"amplitude": amplitude, "ratio": ratio}


def _fit_maps(dataset, windows_factor):
    windows = IntegrationWindows.default(dataset.priors, dataset.grid,
                                         windows_factor)
    fids = dataset.fids.reshape(dataset.n_voxels, -1)[dataset.mask.ravel()]
    amps = np.empty((fids.shape[0], len(dataset.priors)))
    for i, fid in enumerate(fids):
        res = spectral_fit(np.asarray(fid, dtype=complex), dataset.priors,
                           dataset.grid, windows=windows)
        amps[i] = np.maximum(res.amplitudes, 0.0)
    names = [p.name for p in dataset.priors]
    amplitude = _grids_from_masked(amps, dataset.mask, names)
    water = amplitude["water"]
    ratio = {}
    for met in names:
        if met == "water":
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio[met] = amplitude[met] / water
    return {"amplitude": amplitude, "ratio": ratio}


_WORKER_STATE = {}


def _init_worker(dataset, estimators, base_seed, limit_threads=False):
    if limit_threads:
        try:
            import threadpoolctl

            # keep the controller alive; worker processes each pin their
            # BLAS to one thread so n_jobs workers do not oversubscribe
            _WORKER_STATE["_threadpool"] = threadpoolctl.threadpool_limits(1)
        except ImportError:
            pass
    _WORKER_STATE["dataset"] = dataset
    _WORKER_STATE["estimators"] = estimators
    _WORKER_STATE["seed"] = base_seed


def _run_trial(trial):
    dataset = _WORKER_STATE["dataset"]
    estimators = _WORKER_STATE["estimators"]
    seed = _WORKER_STATE["seed"]
    fids = resample_noise(dataset, seed=_spawned_seed(seed, trial))
    noisy = replace_fids(dataset, fids)
    # conv features are shared between estimators with the same frozen conv
    feats = None
    feats_net = None
    out = {}
    for name, est in estimators.items():
        if est.kind in ("sve", "precise"):
            if feats_net is None or not _same_conv_part(feats_net, est.net):
                masked = noisy.fids.reshape(noisy.n_voxels, -1)[noisy.mask.ravel()]
                feats = nn.conv_features(est.net, masked)
                feats_net = est.net
            out[name] = est.run(noisy, features=feats)
        else:
            out[name] = est.run(noisy)
    return out


def _spawned_seed(seed, trial):
    return int(np.random.SeedSequence(entropy=seed,
                                      spawn_key=(trial,)).generate_state(1)[0])


def replace_fids(dataset: DmiDataset, fids) -> DmiDataset:
    return replace(dataset, fids=fids)


def repeated_error_stacks(dataset: DmiDataset, estimators: dict, trials: int,
                          seed: int, n_jobs: int = 1):
    """Per-trial maps for every estimator on shared noise realizations.

    Trial t uses the noise stream derived from (seed, t) only, so results
    are independent of scheduling and of n_jobs. Returns
    {estimator: {kind: {met: (trials, *dims) stack}}}.
    """
    if trials < 2:
        raise ValueError("at least two trials required")
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker,
                                 initargs=(dataset, estimators, seed, True)) as pool:
            per_trial = list(pool.map(_run_trial, range(trials)))
    else:
        _init_worker(dataset, estimators, seed)
        per_trial = [_run_trial(t) for t in range(trials)]

    out = {}
    for name in estimators:
        out[name] = {}
        for kind in ("amplitude", "ratio"):
            mets = per_trial[0][name][kind].keys()
            out[name][kind] = {
                met: np.stack([per_trial[t][name][kind][met]
                               for t in range(trials)])
                for met in mets
            }
    return out


def truth_ratio_maps(dataset: DmiDataset) -> dict:
    if dataset.truth is None:
        raise ValueError("dataset carries no ground truth")
    water = dataset.truth["water"]
    return {met: grid / water for met, grid in dataset.truth.items()
            if met != "water"}


# ---------------------------------------------------------------------------
# indirect error estimation for measured data
# ---------------------------------------------------------------------------

def estimate_noise_sd(dataset: DmiDataset) -> float:
    """Median per-component time-domain noise SD from spectral tails."""
    fids = dataset.fids.reshape(dataset.n_voxels, -1)[dataset.mask.ravel()]
    spec = np.fft.fftshift(np.fft.fft(np.asarray(fids, dtype=complex),
                                      axis=-1), axes=-1)
    sds = [spectral_noise_sd(row) for row in spec]
    return float(np.median(sds)) / math.sqrt(dataset.grid.n_points)


def estimate_invivo_errors(dataset: DmiDataset, cnn1, lam: float, trials: int,
                           seed: int = 0, omega_max: float = 100.0,
                           sigma: float | None = None, n_jobs: int = 1,
                           finetune_epochs: int = 10):
    """Three-step indirect error estimate, no ground truth required.

    1) single-voxel estimation (lambda = 0) gives reference maps;
    2) noiseless signals are rebuilt from those amplitudes and noise at the
       measured level is added repeatedly;
    3) the full regularized pipeline runs per repetition. The regularization
       bias is then approximated by |mean(regularized) - reference| and the
       SD by the sample SD, both per voxel.

    Returns {'ratio': ErrorMaps, 'amplitude': ErrorMaps} with mode
    "estimated".
    """
    if trials < 2:
        raise ValueError("at least two trials required")
    sve = precise_dmi(dataset, cnn1)
    names = [p.name for p in dataset.priors]
    mask = dataset.mask
    amps = np.stack([np.where(mask, sve.amplitude[m], 0.0).ravel()[mask.ravel()]
                     for m in names], axis=1)
    basis = metabolite_basis(dataset.priors, dataset.grid)
    recon = np.zeros((dataset.n_voxels, dataset.grid.n_points), dtype=np.complex64)
    recon[mask.ravel()] = (amps @ basis).astype(np.complex64)
    sigma = estimate_noise_sd(dataset) if sigma is None else sigma

    synthetic = replace(dataset,
                        clean_fids=recon.reshape(dataset.fids.shape),
                        noise_sd=float(sigma), truth=None)
    est = {"precise": MapEstimator(kind="precise", net=cnn1, lam=lam,
                                   omega_max=omega_max,
                                   finetune_epochs=finetune_epochs)}
    stacks = repeated_error_stacks(synthetic, est, trials, seed, n_jobs)
    sve_truth = {"amplitude": sve.amplitude,
                 "ratio": sve.ratio}
    out = {}
    for kind in ("ratio", "amplitude"):
        out[kind] = bias_sd_maps(stacks["precise"][kind], sve_truth[kind],
                                 mode="estimated")
    return out
