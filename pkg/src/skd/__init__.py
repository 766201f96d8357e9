"""Self-supervised knowledge distillation for few-shot learning."""

__version__ = "0.1.0"
