"""RGB+NIR semantic segmentation with Fisher-vector unaries and a Potts CRF.

The pipeline: 4-channel image loading, derived channels (luma and
PCA-decorrelated planes), a dense multi-scale patch grid, SIFT and
colour-statistics descriptors, PCA + GMM + Fisher-vector encoding, sparse
logistic patch classifiers blended into per-pixel posteriors, and a
contrast-sensitive CRF minimised by alpha-expansion.  Evaluation covers
confusion-based metrics, boundary (trimap) curves, and paired significance
tests, orchestrated by a five-fold cross-validation protocol.
"""

from .bundle import (
    ModelBundle,
    StreamModel,
    TrainSettings,
    load_bundle,
    predict_unary_field,
    save_bundle,
    train_bundle,
)
from .channels import (
    ChannelPCA,
    apply_channel_pca,
    compute_luma,
    ensure_channels,
    fit_channel_pca,
)
from .classify import (
    LinearClassifier,
    UnaryField,
    aggregate_pixel_posteriors,
    apply_background_rule,
    late_fuse,
    patch_probability,
    train_slr,
)
from .crf import (
    EnergyModel,
    Labeling,
    alpha_expansion,
    argmax_labeling,
    build_energy_model,
    estimate_beta,
    pairwise_potential,
    segment_image,
    total_energy,
)
from .descriptors import (
    PatchDescriptor,
    col_descriptor,
    compose_descriptor,
    descriptor_dim,
    sift_descriptor,
)
from .encoding import (
    DescriptorPCA,
    GmmCodebook,
    fisher_vector,
    fisher_vectors_per_patch,
    fit_descriptor_pca,
    fit_gmm,
)
from .evaluation import (
    ConfusionMatrix,
    TrimapCurve,
    accumulate_confusion,
    class_accuracy,
    jaccard_index,
    overall_accuracy,
    paired_t_test,
    trimap_curve,
)
from .experiment import (
    ExperimentConfig,
    compare_reports,
    load_config,
    parse_descriptor_spec,
    run_fold_protocol,
)
from .imageio import (
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    MultiChannelImage,
    load_image_pair,
    load_manifest,
    load_mask,
    save_manifest,
    write_mask,
)
from .patches import PatchSpec, extract_patch, grid_patches

__version__ = "0.1.0"
