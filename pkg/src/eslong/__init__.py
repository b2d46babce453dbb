"""eslong: a desk-scale toolkit for long-context protein sequence encoders.

Windowed local attention, position-table extension, int4 block quantization,
masked-LM training with LoRA adapters, sliding-window embedding extraction,
and GO-aware Fmax evaluation.
"""

__version__ = "0.1.0"
