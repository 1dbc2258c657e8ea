"""peftbench: parameter-efficient fine-tuning strategies and a benchmark harness.

Self-contained: a small float64 autodiff engine drives three toy backbones
(residual CNN, ViT encoder, conditional denoiser); every selective and
additive fine-tuning strategy plugs into them through a uniform registry;
the bench layer runs data-volume sweeps, successive-halving hyperparameter
search, seeded repeats, rank aggregation and Fréchet-distance scoring.
"""

from .autodiff import (Tensor, apply_primitive, backward, finite_diff_check,
                       no_grad, zero_grads)
from .frechet import frechet_distance, frechet_features
from .hpo import SearchSpace, asha_promote, run_search, sample_trial
from .linalg import svd_small
from .models import (build_mini_cnn, build_mini_denoiser, build_mini_vit,
                     build_model, load_model, model_forward, param_manifest)
from .peft import (AdaptedModel, PeftSpec, apply_svdiff, inject_adaptformer,
                   inject_lora, inject_ssf, inject_tsa, make_strategy,
                   merge_lora, select_trainable, trainable_count)
from .rng import RngStream
from .training import (Optimizer, TrainConfig, TrainReport, macro_f1,
                       total_loss, train_loop)

__version__ = "0.1.0"
