"""Pedestrian trajectory prediction with force-structured neural networks.

The package holds a social force simulator with groups (``sim``), a small
numpy network toolkit (``tinynn``), the modular force network (``model``),
IMM goal estimation (``goal_imm``), feature extraction (``features``),
autoregressive rollouts (``rollout``), dataset handling (``datasets``),
evaluation metrics (``metrics``) and a command-line pipeline (``cli``).
"""

__version__ = "0.1.0"
