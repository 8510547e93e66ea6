"""Self-ensembling with category-agnostic clusters for open-set domain adaptation."""
from .datagen import (AugConfig, ClassPartition, GeneratorSpec, OpenSetTask, ShiftSpec, ValidationError,
                      make_open_set_task)
from .eval import MetricsReport, Mode, evaluate_model
from .trainer import AUTO, NonFiniteLoss, TrainConfig, ablation_configs, source_only_config, train

__version__ = "0.1.0"
