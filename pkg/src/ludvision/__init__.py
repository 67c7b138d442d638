"""Multispectral detection of Ludwigia peploides from drone imagery."""

from .alignment import (Correspondence, Homography, RansacConfig, align_and_stack,
                        estimate_homography, find_correspondences, warp_band)
from .metrics import (ConfusionMatrix, EvalReport, accuracy_metrics, confusion_matrix,
                      evaluation_report)
from .model import (Model, ModelConfig, build_model, forward, fusion_exchange, ocr_augment,
                    predict_mask, train_step)
from .raster import (DEFAULT_BANDS, BandMeta, LabelMask, MultispectralImage, Rect, crop,
                     read_mask, read_raster, write_mask, write_raster)
from .spectra import ClassSignature, signature_table

__version__ = "0.1.0"
