"""Line-integral projection loss toolkit for synthesizing attenuation maps from PET inputs.

Modules: ``autodiff`` (reverse-mode engine), ``projector`` (rotate-and-sum
line integrals), ``losses``, ``network`` (U-net), ``phantom`` (synthetic data),
``metrics``, ``pipeline`` (training, stitching, experiment) and ``cli``.
"""

from .errors import (ConfigError, FormatError, LipLossError, NonFiniteError, ShapeError, TrainingFault,
                     UsageError)
from .projector import AngleSet, make_angle_set, project, project_adjoint, sinogram
from .losses import LossWeights, gdl_loss, im_loss, l1_loss, lip_loss, total_loss

__version__ = "0.1.0"
