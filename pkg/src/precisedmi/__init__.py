"""Metabolite amplitude mapping for deuterium MRSI.

A small convolutional network trained on synthetic FIDs estimates
per-voxel metabolite amplitudes; an MRI-guided edge-preserving fine-tune
then trades a controlled amount of bias for precision. Baseline
estimators (Fourier peak integration, nonlinear spectral fitting,
anisotropic diffusion) and evaluation tools (CRLB, Monte Carlo sweeps,
bias/SD maps) support rigorous comparison.
"""

__version__ = "0.1.0"

from .signal_model import (  # noqa: E402,F401
    Fid,
    FidParams,
    MetabolitePrior,
    SpectralGrid,
    Spectrum,
    default_priors,
    dft_spectrum,
    idft_fid,
    ratio_to_concentration,
    synth_ideal_fid,
    synth_realistic_fid,
    water_snr,
)
from .synth import (  # noqa: F401
    DmiDataset,
    Phantom,
    PhantomConfig,
    TrainingSampleSpec,
    build_phantom,
    phantom_to_dmi,
    sample_training_pair,
)
from .neuralnet import (  # noqa: F401
    ArchitectureSpec,
    NetworkParams,
    TrainConfig,
    forward,
    predict_amplitudes,
    train_sve,
)
from .edge_finetune import (  # noqa: F401
    FinetuneConfig,
    SpatialPrior,
    finetune,
    precise_dmi,
    preprocess_mri,
    spatial_coeff,
)
from .baselines import (  # noqa: F401
    DiffusionConfig,
    FitResult,
    IntegrationWindows,
    anisotropic_diffusion,
    fourier_amplitudes,
    spectral_fit,
)
from .metrics import (  # noqa: F401
    ErrorMaps,
    McConfig,
    bias_sd_maps,
    crlb_amplitude,
    estimate_invivo_errors,
    fisher_crlb_numeric,
    monte_carlo,
)
from .errors import DataError, NumericalError  # noqa: F401
