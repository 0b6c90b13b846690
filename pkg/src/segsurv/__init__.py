"""Tumour segmentation post-processing, radiomics, and survival modeling.

The package covers the span from raw CT/PET volumes to survival model
comparison: volume IO and preprocessing, segmentation losses with exact
gradients, mean-field refinement of probability maps, overlap and
surface-distance metrics, handcrafted radiomics, tabular imputation and
feature selection, and three survival regressors scored by Harrell's
concordance index.

Hot numeric kernels run under numba when available; set ``SEGSURV_NUMBA=0``
to force the pure-numpy fallback path.
"""

from ._accel import NUMBA_AVAILABLE, USE_NUMBA, active_backend
from .crf import CrfParams, meanfield_refine, naive_meanfield, refine_mask
from .losses import (LossParams, dice_loss, focal_loss, log_cosh_dice_focal,
                     loss_gradient)
from .metrics import (SegScore, average_hd, dice_similarity, evaluate_batch,
                      hd95)
from .radiomics import FeatureVector, RadiomicsConfig, discretize, extract_all
from .seeding import derive_rng, derive_seed
from .volume import (BoundingBox, Mask3D, ProbMap3D, Volume3D,
                     clip_intensities, crop_to_box, ensemble_mean,
                     load_volume, resample_trilinear, save_volume,
                     threshold_map, zscore_normalize)

__version__ = "0.1.0"

__all__ = [
    "NUMBA_AVAILABLE", "USE_NUMBA", "active_backend",
    "CrfParams", "meanfield_refine", "naive_meanfield", "refine_mask",
    "LossParams", "dice_loss", "focal_loss", "log_cosh_dice_focal",
    "loss_gradient",
    "SegScore", "average_hd", "dice_similarity", "evaluate_batch", "hd95",
    "FeatureVector", "RadiomicsConfig", "discretize", "extract_all",
    "derive_rng", "derive_seed",
    "BoundingBox", "Mask3D", "ProbMap3D", "Volume3D", "clip_intensities",
    "crop_to_box", "ensemble_mean", "load_volume", "resample_trilinear",
    "save_volume", "threshold_map", "zscore_normalize",
    "__version__",
]
