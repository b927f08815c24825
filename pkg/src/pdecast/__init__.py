"""Stable long-range forecasting of 1-D periodic PDEs.

A hard-constrained implicit residual network is trained on single-step
PDE data and rolled out for hundreds of steps in its latent space
without diverging.  The package also ships a certification lab that
checks the boundedness guarantee of the constrained recursion
numerically, together with exact data oracles for the advection and
Burgers equations.
"""

__version__ = "0.1.0"
