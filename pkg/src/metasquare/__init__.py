"""Score-based black-box square attacks with learned proposal controllers."""

from .attack import (AttackConfig, AttackResult, ControllerBundle,
                     robust_accuracy_curve, run_attack, run_batch, summarize)
from .classifier import (BlackBox, BudgetExhausted, CapabilityError, Classifier,
                         PgdParams, QueryMeter, TrainConfig, black_box_score,
                         conv_net, input_gradient, mlp_net, pgd_attack,
                         train_classifier)
from .controller import (ColorController, ControllerConfig, ControllerState,
                         SizeController, encode_time, probe_controller)
from .core import (L2, LINF, LossSpec, ThreatModel, apply_perturbation,
                   classification_loss, project, project_l2, project_linf)
from .metatrain import MetaTrainConfig, meta_loss_step, meta_train
from .proposal import (aa_schedule, corner_colors, l2_init,
                       make_relaxed_l2_update, make_relaxed_square_delta,
                       make_square_delta, p_to_size, sa_schedule,
                       sample_position, stripe_init)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
