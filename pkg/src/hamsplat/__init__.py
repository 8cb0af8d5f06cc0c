"""Hamiltonian-governed deformable Gaussian splatting, desk scale.

Submodules
----------
autodiff   reverse-mode tape with second-order support and Adam
gauss      Gaussian primitives, quaternion/covariance math, PLY persistence
hexplane   six-plane multi-resolution spatial-temporal feature encoder
hnn        latent phase-space decoder: potentials, fields, adapters
bed        Boltzmann equilibrium masks and deformation blending
physics    position Verlet and rotation-increment clamping
render     differentiable splat rasterizer, losses, image metrics
helmholtz  spectral Helmholtz-Hodge decomposition oracle
stream     mip selection/sampling and layered progressive LOD scenes
pipeline   training loop, synthetic datasets, checkpoints, evaluation
"""

__version__ = "0.1.0"
