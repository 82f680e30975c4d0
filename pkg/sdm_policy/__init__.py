# public API
# flake8: noqa F401
from .diffusion import (
    Demonstration,
    DenoiserNet,
    NoiseSchedule,
    ddpm_sample,
    load_denoiser,
    make_schedule,
    predict_x0,
    save_denoiser,
    score_estimate,
    train_teacher,
)
from .sdm import DistillConfig, OneStepGenerator, distill, generator_sample, load_generator, save_generator
from .config import RunConfig, parse_config
