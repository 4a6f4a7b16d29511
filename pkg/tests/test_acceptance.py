"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy artifacts (Monte Carlo sweeps, repeated-noise map stacks) are shared
across criteria through module fixtures and cached on disk under
tests/.cache, keyed by the trained-network hash and the generating seeds.
Run with -s to watch the criterion lines as they print.
"""

import json
import time

import numpy as np
import pytest

from conftest import CACHE, cached_arrays
from precisedmi import _kernels, cli, fileio
from precisedmi import neuralnet as nn
from precisedmi.baselines import DiffusionConfig, anisotropic_diffusion, spectral_fit
from precisedmi.edge_finetune import FinetuneConfig, finetune, precise_dmi, spatial_prior_for
from precisedmi.metrics import (
    MapEstimator,
    McConfig,
    bias_sd_maps,
    crlb_amplitude,
    estimate_invivo_errors,
    fisher_crlb_numeric,
    monte_carlo,
    phantom_mc_context,
    repeated_error_stacks,
    truth_ratio_maps,
)
from precisedmi.signal_model import FidParams, MetabolitePrior, SpectralGrid, synth_realistic_fid
from precisedmi.synth import B0Config, PhantomConfig, build_phantom, phantom_to_dmi

N_JOBS = 2


def record(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def net_key(trained_net):
    digest = 0
    for tensor in trained_net.tensors.values():
        digest = hash((digest, tensor.tobytes())) & 0xFFFFFFFF
    return f"{digest:08x}"


def flatten_stacks(stacks):
    return {f"{est}|{kind}|{met}": stack
            for est, kinds in stacks.items()
            for kind, mets in kinds.items()
            for met, stack in mets.items()}


def unflatten_stacks(flat):
    out = {}
    for key, stack in flat.items():
        est, kind, met = key.split("|")
        out.setdefault(est, {}).setdefault(kind, {})[met] = stack
    return out


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mc3(trained_net, base_phantom):
    """Monte Carlo, N=200, SNR {7.7, 12.1, 18.6}, fourier + sve, both
    distortion modes, on a compartment-3 voxel."""
    key = f"mc3_{net_key(trained_net)}"
    path = CACHE / f"{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    ctx = phantom_mc_context(base_phantom, patch=1)
    out = {}
    started = time.time()
    for mode in ("fixed", "resample"):
        mc = McConfig(trials=200, snr_levels=(7.7, 12.1, 18.6),
                      estimators=("fourier", "sve"), seed=101,
                      distortions=mode)
        out[mode] = monte_carlo(ctx, mc, net=trained_net).rows
    out["wall_seconds"] = time.time() - started
    path.write_text(json.dumps(out))
    return out


def _sweep_estimators(net):
    return {
        "fourier": MapEstimator(kind="fourier"),
        "sve": MapEstimator(kind="sve", net=net),
        "p004": MapEstimator(kind="precise", net=net, lam=0.004),
        "p01": MapEstimator(kind="precise", net=net, lam=0.01),
        "p04": MapEstimator(kind="precise", net=net, lam=0.04),
    }


@pytest.fixture(scope="module")
def sweep(trained_net, dataset121):
    """Repeated-noise stacks on the 32x32 phantom at SNR 12.1.

    Phase A (50 trials): fourier, sve and the full lambda sweep.
    Phase B (50 more trials): fourier, sve, lambda=0.01 only, giving the
    N=100 stacks the regularization-gain criterion asks for.
    """
    tag = net_key(trained_net)

    def build_a():
        return flatten_stacks(repeated_error_stacks(
            dataset121, _sweep_estimators(trained_net), trials=50, seed=301,
            n_jobs=N_JOBS))

    def build_b():
        ests = {k: v for k, v in _sweep_estimators(trained_net).items()
                if k in ("fourier", "sve", "p01")}
        return flatten_stacks(repeated_error_stacks(
            dataset121, ests, trials=50, seed=302, n_jobs=N_JOBS))

    phase_a = unflatten_stacks(cached_arrays(f"sweepA_{tag}", build_a))
    phase_b = unflatten_stacks(cached_arrays(f"sweepB_{tag}", build_b))
    merged = {}
    for est in phase_a:
        merged[est] = {}
        for kind in phase_a[est]:
            merged[est][kind] = {}
            for met, stack in phase_a[est][kind].items():
                if est in phase_b:
                    stack = np.concatenate(
                        [stack, phase_b[est][kind][met]], axis=0)
                merged[est][kind][met] = stack
    return merged


@pytest.fixture(scope="module")
def size_sweeps(trained_net):
    """lambda=0.01 stacks for tumor sizes 1 and 4 (size 2 is the base)."""
    tag = net_key(trained_net)
    out = {}
    for size in (1, 4):
        dataset = phantom_to_dmi(build_phantom(PhantomConfig(tumor_size=size)),
                                 12.1, seed=310 + size)

        def build(dataset=dataset):
            ests = {"p01": MapEstimator(kind="precise", net=trained_net,
                                        lam=0.01)}
            return flatten_stacks(repeated_error_stacks(
                dataset, ests, trials=50, seed=340 + dataset.labels.shape[0],
                n_jobs=N_JOBS))

        out[size] = {
            "stacks": unflatten_stacks(cached_arrays(f"size{size}_{tag}", build)),
            "dataset": dataset,
        }
    return out


@pytest.fixture(scope="module")
def estimated04(trained_net, dataset121):
    """Indirect (no-ground-truth) error maps at lambda = 0.04, 50 trials."""
    tag = net_key(trained_net)

    def build():
        result = estimate_invivo_errors(dataset121, trained_net, lam=0.04,
                                        trials=50, seed=321, n_jobs=N_JOBS)
        return {f"bias|{met}": grid for met, grid in result["ratio"].bias.items()} | {
            f"sd|{met}": grid for met, grid in result["ratio"].sd.items()}

    flat = cached_arrays(f"est04_{tag}", build)
    bias = {k.split("|")[1]: v for k, v in flat.items() if k.startswith("bias|")}
    sd = {k.split("|")[1]: v for k, v in flat.items() if k.startswith("sd|")}
    return {"bias": bias, "sd": sd}


@pytest.fixture(scope="module")
def b0_repeats(trained_net):
    """Single-voxel-estimation repeats on the B0-distorted phantom."""
    tag = net_key(trained_net)
    dataset = phantom_to_dmi(build_phantom(PhantomConfig(b0=B0Config())),
                             12.1, seed=331)

    def build():
        ests = {"sve": MapEstimator(kind="sve", net=trained_net)}
        return flatten_stacks(repeated_error_stacks(dataset, ests, trials=50,
                                                    seed=351, n_jobs=N_JOBS))

    return {"stacks": unflatten_stacks(cached_arrays(f"b0rep_{tag}", build)),
            "dataset": dataset}


def interior_comp3(dataset):
    """Compartment-3 voxels whose full 8-neighborhood is also compartment 3."""
    comp3 = (dataset.labels == 3) & (dataset.scenario == 0)
    inner = comp3.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            inner &= np.roll(np.roll(comp3, dy, axis=0), dx, axis=1)
    return inner


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_acceptance_01_gradient_correctness():
    """Analytic backprop vs central differences on every parameter."""
    started = time.time()
    arch = nn.ArchitectureSpec(n_points=64,
                               blocks=(nn.ConvBlock(2, 4), nn.ConvBlock(4, 4)),
                               hidden=8)
    rng = np.random.default_rng(0)
    params = nn.init_params(arch, rng, dtype=np.float64)
    x = rng.standard_normal((3, 2, 64))
    targets = rng.standard_normal((3, 4))
    out, cache = nn.forward_cached(params, x)
    _, gout = nn.mse_loss_grad(out, targets)
    grads = nn.backward(params, cache, gout)
    h = 1e-4
    worst = 0.0
    worst_at = None
    for name, tensor in params.tensors.items():
        flat = tensor.ravel()
        gflat = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = nn.mse_loss(nn.forward(params, x), targets)
            flat[i] = orig - h
            lm = nn.mse_loss(nn.forward(params, x), targets)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
            if rel > worst:
                worst, worst_at = rel, f"{name}[{i}]"
    wall = time.time() - started
    ok = worst < 1e-4 and wall < 60
    assert record(1, ok, f"max rel grad error {worst:.2e} at {worst_at}, "
                         f"all {params.n_parameters()} params, {wall:.1f}s")


def test_acceptance_02_lambda0_identity(trained_net):
    """Regularized pipeline at lambda = 0 reproduces single-voxel maps."""
    cfg = PhantomConfig(n_voxels=16, radii=(7.6, 5.5, 3.2),
                        tumor_radius_vox=4.5, tumor_size=1)
    dataset = phantom_to_dmi(build_phantom(cfg), 12.1, seed=77)
    prior = spatial_prior_for(dataset)
    net2 = finetune(dataset, trained_net, prior, FinetuneConfig(lam=0.0))
    sve = precise_dmi(dataset, trained_net)
    reg = precise_dmi(dataset, net2)
    worst = 0.0
    for group in ("amplitude", "ratio"):
        for met, grid in getattr(sve, group).items():
            other = getattr(reg, group)[met]
            diff = np.abs(grid - other)
            worst = max(worst, float(np.nanmax(diff)))
    ok = worst < 1e-6
    assert record(2, ok, f"max |precise - sve| = {worst:.2e} on 16x16 phantom")


def test_acceptance_03_noiseless_fit_exactness(priors, grid):
    """Spectral fit recovers noiseless signal parameters exactly."""
    started = time.time()
    rng = np.random.default_rng(33)
    worst_rel = 0.0
    n_converged = 0
    n = 100
    for _ in range(n):
        truth = FidParams(
            amplitudes=tuple(rng.uniform(0.1, 2.0, size=4)),
            delta_f_hz=float(rng.uniform(-25, 25)),
            delta_t_s=float(rng.uniform(-0.006, 0.0)),
            phase_rad=float(rng.uniform(0, 2 * np.pi)),
        )
        fid = synth_realistic_fid(truth, priors, grid, rng)
        res = spectral_fit(fid, priors)
        n_converged += res.converged
        rel = np.max(np.abs(res.amplitudes - truth.amplitudes)
                     / np.abs(truth.amplitudes))
        rel = max(rel, abs(res.delta_f_hz - truth.delta_f_hz) / 30.0)
        rel = max(rel, abs(res.delta_t_s - truth.delta_t_s) / 0.008)
        dphi = abs((res.phase_rad - truth.phase_rad + np.pi) % (2 * np.pi) - np.pi)
        rel = max(rel, dphi / (2 * np.pi))
        worst_rel = max(worst_rel, rel)
    wall = time.time() - started
    ok = worst_rel < 1e-6 and n_converged == n and wall < 120
    assert record(3, ok, f"worst relative error {worst_rel:.2e}, "
                         f"{n_converged}/{n} converged, {wall:.1f}s")


def test_acceptance_04_crlb_oracle(priors, grid):
    """Fisher oracle vs closed form; formula-vs-numeric table emitted."""
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(20):
        t2 = float(rng.uniform(0.008, 0.09))
        sigma = float(rng.uniform(0.02, 0.4))
        g = SpectralGrid(n_points=int(rng.integers(128, 1024)),
                         spectral_width_hz=float(rng.uniform(1500, 5000)))
        single = (MetabolitePrior("line", 4.7, t2),)
        bound = fisher_crlb_numeric(single, g,
                                    FidParams(amplitudes=(1.0,), noise_sd=sigma))[0]
        rho = np.exp(-2.0 * g.dwell_time_s / t2)
        closed = sigma / np.sqrt((1 - rho ** g.n_points) / (1 - rho))
        worst = max(worst, abs(bound - closed) / closed)

    amps = (1.0, 0.28, 0.40, 0.10)
    print("\n  closed-form (literal reading) vs numeric Fisher bound, Glx:")
    ratios = []
    for snr in (7.7, 12.1, 18.6, 30.0):
        peak = 31.1
        sigma = peak / (snr * np.sqrt(grid.n_points))
        formula = crlb_amplitude(priors[2].t2star_s, grid.dwell_time_s,
                                 sigma, amps, index=2)
        numeric = fisher_crlb_numeric(
            priors, grid, FidParams(amplitudes=amps, noise_sd=sigma))[2]
        ratios.append(formula / numeric)
        print(f"    SNR {snr:5.1f}: formula {formula:.5f}  numeric {numeric:.5f}"
              f"  ratio {formula / numeric:.3f}")
    spread = max(ratios) - min(ratios)
    ok = worst < 0.01
    assert record(4, ok, f"closed-form match {worst:.2e} (20 configs); "
                         f"formula/numeric ratio {np.mean(ratios):.3f} "
                         f"(documented discrepancy, constant to {spread:.1e})")


def _mc_by(rows):
    return {(r["snr"], r["estimator"]): r for r in rows}


def test_acceptance_05_sve_efficiency(mc3):
    """Single-voxel CNN estimation vs Fourier integration, N=200."""
    by = _mc_by(mc3["fixed"])
    by_rs = _mc_by(mc3["resample"])
    parts = []
    ok = True
    for snr in (7.7, 12.1, 18.6):
        ratio = by[(snr, "sve")]["ratio_sd_pct"] / by[(snr, "fourier")]["ratio_sd_pct"]
        ratio_rs = (by_rs[(snr, "sve")]["ratio_sd_pct"]
                    / by_rs[(snr, "fourier")]["ratio_sd_pct"])
        parts.append(f"SNR {snr}: sve/fourier SD {ratio:.3f} "
                     f"(with distortion resampling {ratio_rs:.3f})")
        ok = ok and ratio <= 0.75
    ok = ok and mc3["wall_seconds"] < 1800
    detail = ("; ".join(parts)
              + f"; wall {mc3['wall_seconds']:.0f}s; threshold 0.75")
    assert record(5, ok, detail)


def test_acceptance_06_near_crlb_precision(mc3):
    """Glx amplitude SD within 1.3x the numeric bound at SNR 18.6."""
    row = _mc_by(mc3["fixed"])[(18.6, "sve")]
    ratio = row["amp_sd_abs"] / row["crlb_amp_abs"]
    ok = ratio <= 1.3
    assert record(6, ok, f"sve Glx amplitude SD {row['amp_sd_abs']:.5f} = "
                         f"{ratio:.2f} x numeric CRLB (N=200, SNR 18.6)")


def test_acceptance_07_regularization_gain(sweep, dataset121):
    """Interior compartment-3 SD: precise vs fourier and vs sve, N=100."""
    inner = interior_comp3(dataset121)
    truth = truth_ratio_maps(dataset121)
    sds = {}
    for est in ("fourier", "sve", "p01"):
        err = bias_sd_maps(sweep[est]["ratio"], truth)
        sds[est] = float(np.nanmean(err.sd["glx"][inner]))
    vs_fourier = sds["fourier"] / sds["p01"]
    vs_sve = sds["sve"] / sds["p01"]
    ok = vs_fourier >= 2.0 and vs_sve >= 1.3
    assert record(7, ok, f"interior comp-3 Glx ratio SD: fourier/precise "
                         f"{vs_fourier:.2f} (need >= 2.0), sve/precise "
                         f"{vs_sve:.2f} (need >= 1.3), N=100, lambda=0.01")


def test_acceptance_08_bias_lambda_tradeoff(sweep, dataset121):
    """False-negative Lac bias grows with lambda; contrast collapses at 0.04."""
    b_vox = dataset121.scenario == 2
    ring = (dataset121.labels == 2) & (dataset121.scenario == 0)
    truth = truth_ratio_maps(dataset121)
    biases = []
    for est in ("p004", "p01", "p04"):
        stack = sweep[est]["ratio"]["lac"][:50]
        err = bias_sd_maps({"lac": stack}, {"lac": truth["lac"]})
        biases.append(float(np.nanmean(err.bias["lac"][b_vox])))

    def contrast(stack):
        mean_map = np.nanmean(stack, axis=0)
        return float(np.nanmean(mean_map[b_vox]) - np.nanmean(mean_map[ring]))

    c_sve = contrast(sweep["sve"]["ratio"]["lac"])
    c_p04 = contrast(sweep["p04"]["ratio"]["lac"])
    reduction = 1.0 - c_p04 / c_sve
    ok = biases[0] < biases[1] < biases[2] and reduction > 0.5
    assert record(8, ok, f"Lac bias at false negative: "
                         f"{biases[0]:.4f} < {biases[1]:.4f} < {biases[2]:.4f} "
                         f"(lambda .004/.01/.04); contrast reduced "
                         f"{100 * reduction:.0f}% at lambda=0.04 (need > 50%)")


def test_acceptance_09_tumor_size_effect(sweep, dataset121, size_sweeps):
    """Smaller false-negative tumors suffer larger bias, lambda = 0.01."""
    biases = {}
    for size in (1, 2, 4):
        if size == 2:
            dataset, stack = dataset121, sweep["p01"]["ratio"]["lac"][:50]
        else:
            entry = size_sweeps[size]
            dataset = entry["dataset"]
            stack = entry["stacks"]["p01"]["ratio"]["lac"]
        truth = truth_ratio_maps(dataset)
        err = bias_sd_maps({"lac": stack}, {"lac": truth["lac"]})
        b_vox = dataset.scenario == 2
        biases[size] = float(np.nanmean(err.bias["lac"][b_vox]))
    ok = biases[1] > biases[2] > biases[4]
    assert record(9, ok, f"false-negative Lac bias by tumor size: "
                         f"1x1 {biases[1]:.4f} > 2x2 {biases[2]:.4f} > "
                         f"4x4 {biases[4]:.4f} (N=50 each)")


def test_acceptance_10_error_estimation_fidelity(sweep, dataset121, estimated04):
    """Estimated bias hotspots co-locate with true bias hotspots."""
    truth = truth_ratio_maps(dataset121)
    true_err = bias_sd_maps({"lac": sweep["p04"]["ratio"]["lac"][:50]},
                            {"lac": truth["lac"]})
    mask = dataset121.mask
    true_bias = true_err.bias["lac"]
    est_bias = estimated04["bias"]["lac"]
    k = max(1, int(round(0.05 * mask.sum())))

    def top_set(bias_map):
        vals = np.where(mask, bias_map, -np.inf).ravel()
        return set(np.argsort(vals)[-k:])

    t_set, e_set = top_set(true_bias), top_set(est_bias)
    jaccard = len(t_set & e_set) / len(t_set | e_set)
    noisier = (np.nanstd(est_bias[mask]) >= np.nanstd(true_bias[mask]))
    ok = jaccard >= 0.3
    assert record(10, ok, f"top-5% bias overlap Jaccard {jaccard:.2f} "
                          f"(need >= 0.3, k={k}); estimated map "
                          f"{'noisier' if noisier else 'not noisier'} than truth")


def test_acceptance_11_speed_ratio(trained_net, dataset121, priors):
    """Per-voxel network inference vs multi-start spectral fitting."""
    fids = dataset121.fids.reshape(dataset121.n_voxels, -1)[dataset121.mask.ravel()]
    reps = int(np.ceil(1000 / fids.shape[0]))
    fids = np.tile(fids, (reps, 1))[:1000]
    t0 = time.time()
    nn.predict_amplitudes(trained_net, fids)
    t_net = time.time() - t0
    t0 = time.time()
    for row in fids[:100]:
        spectral_fit(np.asarray(row, dtype=complex), priors, dataset121.grid)
    t_fit = (time.time() - t0) * 10  # per-1000 extrapolated from 100 fits
    ratio = t_fit / t_net
    ok = ratio >= 10
    assert record(11, ok, f"1000 voxels: network {t_net:.2f}s vs fit "
                          f"{t_fit:.1f}s -> {ratio:.0f}x (need >= 10x)")


def test_acceptance_12_b0_robustness(b0_repeats):
    """Field distortion within the training range degrades gracefully."""
    dataset = b0_repeats["dataset"]
    stacks = b0_repeats["stacks"]["sve"]
    from precisedmi.synth import b0_gradient_magnitude

    grad = b0_gradient_magnitude(dataset.b0)
    normal = (dataset.labels >= 2) & (dataset.scenario == 0)
    cut_hi = np.quantile(grad[normal], 0.75)
    cut_lo = np.quantile(grad[normal], 0.25)
    hi = normal & (grad >= cut_hi)
    lo = normal & (grad <= cut_lo)
    err = bias_sd_maps(stacks["amplitude"], dataset.truth)
    sd_ratio = float(np.nanmean(err.sd["lac"][hi]) / np.nanmean(err.sd["lac"][lo]))
    worst_bias = max(float(np.nanmax(err.bias[met][dataset.mask]))
                     for met in ("water", "glc", "glx", "lac"))
    ok = sd_ratio <= 2.0 and worst_bias < 0.2
    assert record(12, ok, f"Lac SD high/low gradient {sd_ratio:.2f} "
                          f"(need <= 2); worst amplitude bias {worst_bias:.3f} "
                          f"(need < 0.2 = 10% of a_max)")


def test_acceptance_13_diffusion_properties():
    """Fixed point, extremum principle and mass conservation."""
    config = DiffusionConfig(threshold_pct=10.0, iterations=20, step=0.25)
    const = np.full((9, 9), 2.5)
    fixed = np.array_equal(anisotropic_diffusion(const, config), const)
    rng = np.random.default_rng(13)
    extremum = True
    conserved = True
    for _ in range(50):
        shape = (int(rng.integers(6, 24)), int(rng.integers(6, 24)))
        values = rng.standard_normal(shape) * rng.uniform(0.5, 4.0)
        out = anisotropic_diffusion(values, config)
        extremum &= bool(out.max() <= values.max() + 1e-12)
        extremum &= bool(out.min() >= values.min() - 1e-12)
        conserved &= bool(abs(out.sum() - values.sum())
                          <= 1e-8 * abs(values.sum()) + 1e-12)
    ok = fixed and extremum and conserved
    assert record(13, ok, f"constant fixed point {fixed}, extremum principle "
                          f"{extremum}, sum conserved to 1e-8 {conserved} "
                          f"(50 random maps)")


def test_acceptance_14_determinism(tmp_path, trained_net):
    """--deterministic reruns produce byte-identical output trees."""
    weights = tmp_path / "w.bin"
    fileio.save_weights(trained_net, weights)

    def tree(path):
        return {p.relative_to(path).as_posix(): p.read_bytes()
                for p in sorted(path.rglob("*")) if p.is_file()}

    identical = True
    checked = []
    for command in (
        ["phantom", "--snr", "12.1", "--seed", "5"],
        ["montecarlo", "--weights", str(weights), "--trials", "3",
         "--snr-levels", "12.1,18.6", "--estimators", "fourier,sve",
         "--seed", "6"],
    ):
        runs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command[0]}-{tag}"
            code = cli.main(command + ["--out", str(out), "--deterministic"])
            assert code == 0
            runs.append(tree(out))
        same = runs[0].keys() == runs[1].keys() and all(
            runs[0][k] == runs[1][k] for k in runs[0])
        identical &= same
        checked.append(f"{command[0]}:{'ok' if same else 'DIFFERS'}")
    # the estimate command is byte-checked on a dataset produced above
    ds = tmp_path / "phantom-a"
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / f"estimate-{tag}"
        code = cli.main(["estimate", "--dataset", str(ds), "--weights",
                         str(weights), "--out", str(out), "--seed", "7",
                         "--deterministic"])
        assert code == 0
        runs.append(tree(out))
    same = all(runs[0][k] == runs[1][k] for k in runs[0])
    identical &= same
    checked.append(f"estimate:{'ok' if same else 'DIFFERS'}")
    assert record(14, identical, ", ".join(checked))
