"""Optimization, checkpointing and evaluation."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import GRIDS, evaluate, export_representations, separation_ratio
from .optim import MissingGradError, OptimState, Schedule, adamw_step, lr_at
from .training import TrainConfig, Trainer, joint_train, pretrain, write_trace
