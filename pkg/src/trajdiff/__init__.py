"""Toy-scale language-conditioned trajectory diffusion.

Diffusion over end-effector trajectories (action space) or a VAE latent
space, a scripted tabletop simulator with templated language tasks, and a
long-horizon chain evaluator.
"""

__version__ = "0.1.0"
