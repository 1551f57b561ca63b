from .adam import AdamState, adam_step
from .dual import Dual, concat, jacobian_fwd
from .fd import finite_diff_entries, finite_diff_grad, rel_error
from .tape import Var, backward, gradients, no_grad

__all__ = [
    "AdamState", "Dual", "Var", "adam_step", "backward", "concat", "finite_diff_entries",
    "finite_diff_grad", "gradients", "jacobian_fwd", "no_grad", "rel_error",
]
