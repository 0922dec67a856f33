"""Chirality-aware molecular representation toolkit.

Encodes 3D conformers into representations that are invariant to rigid
motions and to rotations about internal bonds, while remaining sensitive
to mirror reflection (and therefore to tetrahedral chirality).
"""

__version__ = "0.1.0"
