"""Multi-task wireless channel learning with a frozen transformer backbone and MoE-LoRA."""

__version__ = "0.1.0"
