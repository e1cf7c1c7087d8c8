"""Video deblurring with a 3D-convolutional residual generator and adversarial fine-tuning."""

from .errors import ConfigurationError, DatasetError, TrainingError
from .model import (
    Conv3DLayer,
    Generator,
    NetworkSpec,
    build_generator,
    conv3d_forward,
    generator_forward,
    recombine,
    toy_generator_spec,
)

__version__ = "0.1.0"
