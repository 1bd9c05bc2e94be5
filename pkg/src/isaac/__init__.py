"""Input-based approximate curvature (ISAAC) conditioning for MLP training."""
__version__ = "0.1.0"

from .conditioner import (ConditionerConfig, CurvatureSource, Mode, UpdateDirection, condition_model,
                          kfac_step, zeta, zeta_star)
from .dataio import BatchPlan, Dataset, autoencoder_view, load_idx, load_mnist, synth_linear
from .nn import (Activation, LayerTape, Loss, Mlp, backward, backward_exact, backward_sampled, forward,
                 loss_and_metrics)
from .optim import OptimKind, OptimState, apply_update, lr_grid

__all__ = [
    "Activation", "BatchPlan", "ConditionerConfig", "CurvatureSource", "Dataset", "LayerTape", "Loss",
    "Mlp", "Mode", "OptimKind", "OptimState", "UpdateDirection", "apply_update", "autoencoder_view",
    "backward", "backward_exact", "backward_sampled", "condition_model", "forward", "kfac_step",
    "load_idx", "load_mnist", "loss_and_metrics", "lr_grid", "synth_linear", "zeta", "zeta_star",
]
