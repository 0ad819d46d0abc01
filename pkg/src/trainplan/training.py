"""Model and run hyperparameters, plus the derived parameter count."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_size: int
    num_heads: int
    seq_len: int
    vocab_size: int

    def __post_init__(self):
        # zero layers is allowed: an embedding-only model is a useful edge case
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        for name in ("hidden_size", "num_heads", "seq_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )


@dataclass(frozen=True)
class ScheduleSpec:
    save_interval: int
    log_interval: int
    eval_interval: int
    train_samples: int
    lr: float
    min_lr: float
    lr_decay_samples: int
    lr_warmup_samples: int
    walltime_limit: int  # seconds
    exit_duration: int  # minutes
    # stored alongside train_samples; neither is interpreted as the stop rule
    train_tokens: Optional[int] = None

    def __post_init__(self):
        if self.save_interval < 1:
            raise ValueError("save_interval must be >= 1")
        if not self.lr >= self.min_lr > 0:
            raise ValueError("require lr >= min_lr > 0")
        if not self.lr_warmup_samples < self.lr_decay_samples:
            raise ValueError("lr_warmup_samples must be < lr_decay_samples")
        if self.walltime_limit <= 0:
            raise ValueError("walltime_limit must be positive")


class ParamCount(NamedTuple):
    embedding: int
    block: int
    total: int


def param_count(model: ModelSpec) -> ParamCount:
    """Exact parameter count of a decoder-only transformer.

    Per block: QKV and output projections, a 4x MLP, all with biases, and two
    layer norms, i.e. ``12 H^2 + 13 H``.  RoPE positions carry no parameters.
    The final layer norm adds ``2 H``.
    """
    h = model.hidden_size
    embedding = model.vocab_size * h
    block = model.num_layers * (12 * h * h + 13 * h)
    return ParamCount(embedding, block, embedding + block + 2 * h)


def tokens_per_step(model: ModelSpec, global_batch: int) -> int:
    if global_batch < 1:
        raise ValueError("global_batch must be >= 1")
    return global_batch * model.seq_len


def example_model() -> ModelSpec:
    """The 800M reference model from the example Booster job script."""
    return ModelSpec(num_layers=16, hidden_size=2048, num_heads=8, seq_len=2048, vocab_size=50257)


def example_schedule() -> ScheduleSpec:
    return ScheduleSpec(
        save_interval=3000,
        log_interval=10,
        eval_interval=40000,
        train_samples=244_140,
        train_tokens=500_000_000,
        lr=0.00025,
        min_lr=0.000025,
        lr_decay_samples=126_953_125,
        lr_warmup_samples=183_105,
        walltime_limit=20 * 60,
        exit_duration=60,
    )
