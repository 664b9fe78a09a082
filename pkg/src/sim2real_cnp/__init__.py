"""Convolutional conditional neural processes with Sim2Real fine-tuning.

Synthetic squared-exponential GP worlds (1D task distributions and a 2D
station world), an exact GP posterior oracle, a dimension-generic ConvCNP
with FiLM adapter sites, leakage-safe spatiotemporal task splitting, the
pre-train/fine-tune optimisation schedule, and a reproducible experiment
harness that writes CSV result records.
"""

from sim2real_cnp.fields import (
    SEKernelParams,
    SampledField,
    GPOracleResult,
    StationWorldConfig,
    se_kernel,
    sample_gp_field,
    gp_posterior_oracle,
    generate_station_world,
)
from sim2real_cnp.model import ModelConfig, ConvCNP, GaussianPrediction, film, nll_loss
from sim2real_cnp.tasks import Task, SplitPlan
from sim2real_cnp.train import Normalizer, TrainConfig, run_training, evaluate

__version__ = "0.1.0"

__all__ = [
    "SEKernelParams",
    "SampledField",
    "GPOracleResult",
    "StationWorldConfig",
    "se_kernel",
    "sample_gp_field",
    "gp_posterior_oracle",
    "generate_station_world",
    "ModelConfig",
    "ConvCNP",
    "GaussianPrediction",
    "film",
    "nll_loss",
    "Task",
    "SplitPlan",
    "Normalizer",
    "TrainConfig",
    "run_training",
    "evaluate",
    "__version__",
]
