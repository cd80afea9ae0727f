"""Task translation across heterogeneous frozen backbones.

Stage I trains one small model per task on a synthetic multi-task suite;
stage II fuses their frozen features with a shared transformer translator,
either per primary task (``egot2s``) or as a single prompt-conditioned
sequence decoder serving every task (``egot2g``).
"""

__version__ = "0.1.0"
