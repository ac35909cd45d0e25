"""Meta-learning engine: plain-LSTM and outer-product-LSTM meta-learners,
MAML and prototypical-network baselines, episodic tasks, and a training
harness."""

from metalstm.ndtensor import Tape, Tensor

__all__ = ["Tape", "Tensor"]
__version__ = "0.1.0"
