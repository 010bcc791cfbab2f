"""Targeted adversarial example toolkit with feature-space fine-tuning."""

from .attacks import (AttackConfig, AttackTask, SupHighParams, clip_to_budget,
                      di_transform, loss_value_and_grad, run_baseline_attack,
                      ti_smooth)
from .data import Dataset, gen_synthetic_dataset, load_dataset, save_dataset
from .engine import (ConfigurationError, LayerOp, Model, ModelSpec, ScalarSpec,
                     forward, grad_feature_of_logit, grad_input_of_scalar)
from .finetune import (AggregateGradient, FinetuneConfig, aggregate_gradient,
                       combine_aggregate, finetune, targeted_ila_finetune,
                       untargeted_feature_attack)
from .harness import (ExperimentPlan, TransferReport, emit_report, pick_target,
                      run_transfer_experiment, run_uap_datafree)
from .zoo import (Checkpoint, TrainConfig, build_zoo, load_checkpoint,
                  load_model, save_checkpoint, train)

__version__ = "0.1.0"
