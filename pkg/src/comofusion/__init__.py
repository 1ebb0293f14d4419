"""Infrared/visible image fusion on features of a consistency-trained network."""
from .errors import CheckpointError, ImageReadError, ValidationError
from .imgcore import (
    GradientField,
    GrayImage,
    MultiModalTensor,
    concat_pair,
    gradient_energy,
    load_gray,
    random_crop_pair,
    save_gray,
    sobel,
    to_model_range,
)
from .schedule import NoiseSchedule, add_noise, c_out, c_skip, consistency_apply, make_schedule

__version__ = "0.1.0"
