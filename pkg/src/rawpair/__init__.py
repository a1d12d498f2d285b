"""Dual-camera raw reconstruction toolkit.

Reconstructs a denoised, demosaicked RGB image from a pair of raw Bayer
measurements: the secondary mosaic is warped onto the primary view with a
disparity map and both are fed to a jointly trained demosaick/denoise
network. Subpackages: `nn` (tensor engine), `raw` (mosaics, noise, PSNR),
`warp` (backward warping, block matching), `model` (the dual-port network),
`data`/`checkpoint` (datasets and persistence), `train` (two-stage
optimization and ablations), `cli` (command-line front end).
"""

__version__ = "0.1.0"
