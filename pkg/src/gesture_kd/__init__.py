"""Knowledge-sharing transformer + ON-LSTM ensemble for skeleton hand-gesture recognition.

Everything runs on a small numpy autodiff engine (:mod:`gesture_kd.autograd`).
The main entry points are re-exported here; the command-line interface lives
in :mod:`gesture_kd.cli`.
"""

from .autograd import NonFiniteError, Tensor, backward, grad, no_grad
from .config import DESK_MODEL, PAPER_MODEL, ModelConfig, RunConfig, load_config, profile_config
from .fusion import KnowledgeSharingModel, joint_training_step
from .harness import evaluate_run, predict, run_loocv, train_fold
from .optim import AdamW, AdamWConfig, SnapshotStore, cosine_lr, cycle_lengths

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdamWConfig", "DESK_MODEL", "KnowledgeSharingModel", "ModelConfig", "NonFiniteError",
    "PAPER_MODEL", "RunConfig", "SnapshotStore", "Tensor", "backward", "cosine_lr", "cycle_lengths",
    "evaluate_run", "grad", "joint_training_step", "load_config", "no_grad", "predict", "profile_config",
    "run_loocv", "train_fold",
]
