"""Decentralized Bayesian neural occupancy mapping.

Submodules:

``autodiff``     float64 tensors, reverse-mode tape, splittable random streams
``losses``       BCE/MSE, Gaussian KL (closed form and quadrature), total loss
``model``        SIREN + Bayesian linear mapper, sampling, uncertainty, checkpoints
``training``     optimizers and single-agent training
``consensus``    split mean/spread consensus optimizer and node update
``protocol``     round-synchronized peer state exchange, wire codec, transports
``world``        floorplans, agent paths, LiDAR ray casting, datasets, KDE
``experiments``  scenario runners and map export
"""

__version__ = "0.1.0"
