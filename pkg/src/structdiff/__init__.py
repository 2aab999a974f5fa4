"""Small denoising diffusion models on 2D point clouds with structural noise penalties.

Modules: ``schedules`` (variance schedules), ``synthetic_data`` (2D datasets),
``tensor_net`` (MLP denoiser, backprop, Adam, EMA), ``regularizers``
(structural penalties and density distances), ``diffusion`` (training and
sampling), ``prdc`` (precision/recall/density/coverage) and ``harness``
(experiment grids).
"""

__version__ = "0.1.0"
