"""Small float64 neural-network kernel: recurrent layers, losses, Adam."""
from . import backend
from .checkpoint import CheckpointError, format_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from .gradcheck import numeric_gradient, relative_error
from .layers import GRU, LSTM, Dense, dense_forward, gru_cell_forward, lstm_cell_forward, sigmoid
from .losses import categorical_crossentropy, log_softmax, mse_loss, mse_loss_grad, softmax, softmax_cross_entropy
from .optim import AdamState, adam_step, clip_by_global_norm

__all__ = [
    "backend", "GRU", "LSTM", "Dense", "dense_forward", "gru_cell_forward", "lstm_cell_forward", "sigmoid",
    "softmax", "log_softmax", "categorical_crossentropy", "softmax_cross_entropy", "mse_loss", "mse_loss_grad",
    "AdamState", "adam_step", "clip_by_global_norm", "numeric_gradient", "relative_error",
    "CheckpointError", "format_checkpoint", "parse_checkpoint", "save_checkpoint", "load_checkpoint",
]
