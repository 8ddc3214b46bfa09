"""Desk-scale BEV deep-RL driving stack.

Synthetic multi-camera driving simulator, lift-splat BEV feature extraction
on a minimal numpy autodiff core, a recurrent PPO actor-critic, a semantic
segmentation interpretability decoder, and an evaluation harness.
"""

__version__ = "0.1.0"
