"""hazlab: a desk-scale laboratory for hazard-segmentation transfer experiments.

Pipeline: synthetic pre-task pre-training of micro U-Nets, per-image
percentile thresholding, k-shot batch-norm statistics adaptation, and
significance-tested evaluation against random baselines.
"""

__version__ = "0.1.0"
