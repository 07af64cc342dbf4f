"""Interpretable anchor-based pedestrian trajectory forecasting.

Each pedestrian's next step is discretized into a speed/direction-
normalized radial grid of candidate displacements ("social anchors").
Hand-crafted behavioural rules and neural logit maps jointly score the
anchors; a learned bivariate-Gaussian residual refines the chosen anchor
back into continuous space.
"""

__version__ = "0.1.0"
