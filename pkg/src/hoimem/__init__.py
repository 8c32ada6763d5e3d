"""Human-object interaction scoring with a balanced key-value concept memory.

Training-free inference retrieves verb scores from cached instance,
interaction and semantic knowledge; an optional fine-tuning mode trains
residual cross-attention adapters and the memory keys themselves.
"""

from hoimem.errors import InputError

__version__ = "0.1.0"

__all__ = ["InputError", "__version__"]
