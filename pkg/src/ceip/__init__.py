"""Demonstration priors for reinforcement learning: conditional affine flows
trained per task cluster, combined by a learned coefficient net, and an
optional retrieved next state as an extra condition."""

__version__ = "0.1.0"
