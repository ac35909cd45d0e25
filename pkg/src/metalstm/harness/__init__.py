from metalstm.harness.config import RunConfig, load_config, parse_config_text
from metalstm.harness.train import TrainResult, evaluate, evaluate_checkpoint, meta_train

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config_text",
    "TrainResult",
    "evaluate",
    "evaluate_checkpoint",
    "meta_train",
]
