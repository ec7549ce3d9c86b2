"""Array autodiff: reverse-mode tapes, forward-mode duals and the ops they share."""

from romcontrol.autodiff import ops
from romcontrol.autodiff.dual import Dual, jvp
from romcontrol.autodiff.tape import Evaluation, Tape, Var, forward_eval, trace, value_and_grad, vjp

__all__ = [
    "Dual",
    "Evaluation",
    "Tape",
    "Var",
    "forward_eval",
    "jvp",
    "ops",
    "trace",
    "value_and_grad",
    "vjp",
]
