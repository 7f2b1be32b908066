"""Correlation-based feature imitation for multi-scale feature pyramids.

The core idea: distill a student's pyramid features toward a teacher's by
maximizing the per-channel Pearson correlation (loss = 1 - r over each
channel's b*h*w values), which is invariant to the magnitude mismatches that
make plain squared-error imitation fragile across heterogeneous model pairs.
The package also ships the squared-error and temperature-KL baselines, exact
analytic gradients for all three, feature-pathology diagnostics, bilinear
pyramid alignment, a tiny manually differentiated conv net, and a
deterministic experiment harness, all on plain numpy.
"""

from .align import (
    AlignmentError,
    AlignmentPolicy,
    ChannelAdapter,
    adapter_apply,
    adapter_grad,
    align,
    upsample_bilinear,
)
from .analysis import (
    ActivationPattern,
    DominantChannelReport,
    activation_patterns,
    dominant_channels,
    stage_magnitude_profile,
)
from .features import (
    ChannelSample,
    FeatureMap,
    FeaturePyramid,
    channel_sample,
    normalize,
    pyramid_summary,
)
from .fmap_io import FmapFormatError, read_fmap, write_fmap
from .gradcheck import central_difference_grad, relative_error
from .harness import (
    DistillConfig,
    DivergenceError,
    ExperimentReport,
    PathologyConfig,
    Teacher,
    alpha_sweep,
    compare_losses,
    kl_limit_check,
    make_batch,
    make_teacher,
    run_distillation,
)
from .losses import (
    DegenerateMaskError,
    LossConfig,
    LossResult,
    kl_divergence_normalized,
    masked_mse_loss,
    norm_kl_loss,
    pcc,
    pkd_channel_loss,
    pkd_pyramid_loss,
    pyramid_loss,
    pyramid_pcc,
    total_loss,
)
from .toynet import SyntheticBatch, ToyNet, ToyNetSpec, backward, forward, sgd_step

__version__ = "0.1.0"
