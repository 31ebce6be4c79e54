"""Task-aware mixture-of-experts toolkit: autodiff core, MoE transformer, two-stage training and synthetic benchmarks."""

__version__ = '0.1.0'
