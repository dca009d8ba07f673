"""Desk-scale learned vSLAM: flow-based odometry, an embedding map for
relocalization, and KITTI-style trajectory evaluation.

Subpackages and modules: ``geometry``, ``dataio``, ``tensor`` (a small
reverse-mode autodiff), ``odometry``, ``mapping``, ``relocalization``,
``evaluation``, ``config`` and ``cli``.
"""
from ._accel import USE_NUMBA

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "__version__"]
