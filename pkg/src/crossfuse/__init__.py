"""Cross-modal attention fusion of CT volumes and clinical reports for prognosis.

Subpackages are plain modules: ``tensor`` (autodiff core), ``encoders``,
``fusion``, ``losses``, ``datagen``, ``model``, ``train``, ``metrics``,
``scorecam``, ``ablate`` and ``cli``.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
