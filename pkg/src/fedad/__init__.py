"""One-way offline federated distillation with attention-bound ensembles.

Local teacher models are trained to completion on their private slices, run
once over a shared unlabeled public dataset, and ship only those inference
products (logits + attention maps) to the server. The central student learns
from the importance-weighted ensemble of teacher outputs under lower/upper
attention-bound constraints. No parameters, gradients, or private data ever
leave a node, and nothing flows back.
"""

from .attention import (
    AttentionMap,
    BoundPair,
    GradCAM,
    SoftMaskParams,
    attention_bounds,
    gradcam,
    lower_bound_loss,
    nonlocal_attention,
    nonlocal_enhance,
    normalize_attention,
    segmentation_attention,
    soft_mask,
    upper_bound_loss,
)
from .config import ExperimentConfig
from .data import (
    LabeledDataset,
    PublicDataset,
    UndersamplingConfig,
    generate_from_config,
    load_dataset,
    make_classification,
    make_phantoms,
    make_reconstruction,
    make_segmentation,
    undersample,
)
from .distill import (
    DistillConfig,
    StudentState,
    classification_loss,
    distill_epoch,
    reconstruction_loss,
    train_student,
)
from .ensemble import (
    BundleSet,
    EnsembleBundle,
    ImportanceWeights,
    class_importance_weights,
    kl_distill_loss,
    l2_logit_loss,
    size_weights,
    softened_probs,
    uniform_weights,
    weighted_ensemble,
)
from .evaluate import (
    MetricReport,
    accuracy,
    auc,
    binary_auc,
    dice,
    mean_psnr,
    mean_ssim,
    proxy_divergence,
    psnr,
    ssim,
    weighted_generalization_bound,
)
from .federation import (
    AccessLog,
    BandwidthLedger,
    FedADRun,
    FederationManifest,
    LocalProduct,
    NodeConfig,
    PrivateSlice,
    bandwidth_report,
    build_bundles,
    ensemble_weights,
    evaluate_model,
    fedavg_baseline,
    infer_public_products,
    product_payload_bytes,
    run_fedad,
    train_local_model,
)
from .models import build_student, parameter_bytes, registered_architectures
from .partition import (
    PartitionSpec,
    dirichlet_partition,
    fraction_partition,
    holdout_validation,
    max_class_share,
)

__version__ = "0.1.0"
