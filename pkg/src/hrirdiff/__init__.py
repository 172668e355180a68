"""Personalized HRIR generation from anthropometric features.

A conditional denoising diffusion model over two-channel head-related
impulse responses, with dataset handling, training/cross-validation
drivers, objective metrics (log-spectral distortion, interaural time
difference), and a CLI.
"""

from .dataset import (
    AnthroStats,
    AnthroVector,
    DatasetFold,
    Doa,
    SubjectRecord,
    SubjectStore,
    compute_anthro_stats,
    doa_label,
    import_bundle,
    make_loocv_folds,
    normalize_anthro,
)
from .diffusion import (
    NoiseSchedule,
    NoisyHrir,
    forward_sample,
    make_linear_schedule,
    reverse_step,
    sample_hrir,
    sample_hrir_set,
    training_loss,
)
from .metrics import (
    BandSpec,
    HrirPair,
    MagnitudeSpectrum,
    band_average,
    compute_itd,
    hrtf_magnitude,
    itd_curve,
    lsd,
    render_binaural,
)
from .network import (
    ConditionalUNet,
    ModelParams,
    UNetConfig,
    UNetPredictor,
    embed_condition,
    init_params,
    param_gradients,
    unet_forward,
)
from .training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    current_lr,
    load_checkpoint,
    run_loocv,
    save_checkpoint,
    train_fold,
)

__version__ = "0.1.0"
