"""Adversarial multi-task learning for vocal bursts.

Joint prediction of ten emotion intensities, age, and country of origin from
short vocalisations, with shared/task-specific representation disentanglement
trained through gradient reversal. Ships a small reverse-mode autodiff core,
an audio preprocessing chain, a synthetic biased-dataset generator, the full
training/evaluation/ensembling pipeline, and a CLI (``burst2vec --help``).
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
