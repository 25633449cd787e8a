"""Non-exemplar class-incremental learning with a small vision transformer.

Patch-level knowledge selection (per-patch weighted distillation) and
prototype restoration (offset supervision plus old-class prototype synthesis).
"""

__version__ = "0.1.0"
