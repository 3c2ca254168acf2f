"""Spatially explicit statistical land-cover change modeling.

Calibration estimates per-pixel transition probabilities from two dated
categorical maps and explanatory rasters (whitened binned kernel density
estimation combined through Bayes rule); allocation enforces those
probabilities with a patch-based stochastic loop designed to add no bias of
its own; the evaluation harness scores both stages against exactly-known
synthetic transition probabilities.
"""

__version__ = "1.0.0"

from .allocation import (AllocationState, PatchParams, PruningConfig, allocate,
                         draw_kernel_pixels, draw_patch_area, grow_patch,
                         lcm_style_allocate, prune_candidates)
from .calibration import (CalibrationSet, KdeConfig, TransitionModel,
                          bayes_transition_probability, calibrate,
                          extract_calibration_set)
from .density import (BinnedKde, KernelSpec, estimate_density, fit_binned_kde,
                      terrell_bandwidth)
from .evaluation import (EvaluationReport, SyntheticGroundTruth,
                         benchmark_ground_truth, evaluate_pipeline,
                         forge_reference_map, generate_synthetic_landscape,
                         ground_truth_probability, mean_absolute_error,
                         one_dimensional_cut, run_calibration_comparison,
                         run_full_comparison)
from .features import (FeatureSpace, SingularCovarianceError, Whitening,
                       apply_whitening, distance_to_state, fit_whitening,
                       slope_from_elevation)
from .raster import (RasterGrid, StateLegend, TransitionMatrix,
                     GridDimensionError, GridParseError,
                     observed_transition_matrix, read_ascii_grid,
                     read_binary_grid, read_matrix_csv, write_ascii_grid,
                     write_binary_grid, write_matrix_csv)

__all__ = [name for name in dir() if not name.startswith("_")]
