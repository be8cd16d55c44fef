"""Knowledge distillation and debiasing lab on synthetic spurious-correlation data."""

from . import analysis, debias, distill, models, synthdata, tensor

__all__ = ["analysis", "debias", "distill", "models", "synthdata", "tensor"]
__version__ = "0.1.0"
