"""Multi-channel mixture invariant training for speech separation.

Submodules: ``signal`` (metrics, mixture consistency, reference filters),
``losses`` (MixIT, multi-channel MixIT, PIT), ``autodiff``, ``model``,
``scenes`` and ``dataset`` (synthetic data), ``training``, ``checkpoint``,
``inference``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
