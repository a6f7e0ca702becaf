"""sonotrace: physics-based, differentiable B-mode ultrasound rendering.

Pipeline: CT/MRI volume -> acoustic impedance -> fan of rays -> banded
reflection/transmission wave systems per ray -> depth-resolved echo profiles
-> first-difference B-mode image (+ optional speckle/blur artifacts and scan
conversion). Hand-written adjoints expose exact pixel derivatives w.r.t. the
impedance volume and the transducer pose for gradient-based registration.

The solver hot loops run on a compiled extension when available and fall back
to a vectorized NumPy twin (``sonotrace._kernels``).
"""
from ._kernels import HAVE_COMPILED, available_backends, default_backend_name
from .acoustics import (EchoProfile, ImpedanceProfile, InterfaceCoefficients,
                        WaveSystem, assemble, coefficients, depth_profile,
                        depth_profiles_batch, path_sum_oracle, solve,
                        solve_dense_oracle, time_of_flight_depth)
from .errors import (ConfigError, FitError, NumericalError, RegistrationDivergence,
                     SingularSystemError, SonotraceError, VolumeFormatError)
from .geometry import FanConfig, TransducerPose, extract_profile, generate_rays
from .gradients import (LossKind, OptimizerConfig, RegistrationProblem,
                        RenderGradient, grad_pixels_wrt_impedance,
                        grad_pixels_wrt_pose, register_slice, solve_adjoint)
from .imaging import (ArtifactConfig, BModeImage, NormalizationMode, apply_depth_blur,
                      apply_speckle, form_image, normalize, render, scan_convert)
from .impedance import (FitConfig, IntensityImpedanceModel, PiecewiseLinearMap,
                        TissueReferenceTable, ct_to_impedance, default_calibration,
                        fit_intensity_model, mri_to_impedance)
from .metrics import MetricReport, ablation_report, compare, mae, mse, ncc, phase_align, ssim
from .volume import (DEFAULT_BACKGROUND_MRAYL, IMPEDANCE_FLOOR_MRAYL, VolumeFormat,
                     VolumeGrid, VolumeKind, load_volume, sample_nearest,
                     sample_trilinear, save_volume)

__version__ = "0.1.0"
