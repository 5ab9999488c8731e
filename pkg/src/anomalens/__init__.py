"""Distance-based image anomaly detection with pixel/frequency relevance explanations.

The package groups eight concerns: image primitives and synthesis
(``imagegrid``), the orthonormal cosine basis (``spectral``), the
soft-minimum distance detector (``d2neighbors``), its relevance
decompositions (``relprop``), the patch-statistics detector (``patchlite``),
toy networks with second-order similarity explanations (``bilrpnet``), the
deployment-shift experiment harness (``harness``), and the command line
(``cli``).
"""

from .imagegrid import (
    BILINEAR_AA,
    NEAREST,
    BlurPolicy,
    ImageTensor,
    ResizePolicy,
    SynthConfig,
    apply_preprocess,
    gaussian_blur,
    read_image,
    resize_bilinear_aa,
    resize_nearest,
    synth_generate,
    write_image,
)
from .spectral import (
    DctBasis,
    FrequencyBinning,
    dct_basis,
    dct_forward,
    dct_inverse,
    default_binning,
    identity_basis,
)
from .d2neighbors import (
    CalibrationResult,
    D2NeighborsModel,
    GammaPolicy,
    calibrate_gamma,
    fit,
    load_model,
    lp_distance,
    membership_weights,
    perplexity,
    save_model,
    score,
    score_batch,
    softmin_mean,
)
from .relprop import (
    band_filtered_pixel_map,
    frequency_profile,
    instance_relevance,
    joint_relevance,
    mean_frequency_profile,
    pixel_map,
    render_heatmap,
)
from .patchlite import (
    MemoryBank,
    PatchFeatureSet,
    build_memory_bank,
    extract_patches,
    load_bank,
    patchcore_score,
    save_bank,
)
from .bilrpnet import (
    BiLRPExplanation,
    Conv2d,
    Dense,
    Flatten,
    LinearReadout,
    LrpRule,
    LrpRules,
    Relu,
    SumPool,
    ToyNetwork,
    aggregate_patches,
    bilrp,
    bilrp_direct,
    fit_linear_readout,
    lrp,
    network_from_json,
    prune_feature_maps,
)
from .harness import (
    DetectorConfig,
    EvalReport,
    LabeledScores,
    NormComparison,
    ShiftReport,
    ShiftSource,
    defect_noise_ratio,
    evaluate,
    load_dataset,
    norm_comparison,
    shift_experiment,
)

__version__ = "0.1.0"
