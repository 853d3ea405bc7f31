"""Latent-diffusion snow augmentation for LiDAR range images.

A quantized convolutional autoencoder compresses range images, a
FiLM-conditioned denoiser edits their latents toward snowy weather, and a
depth-threshold rule restores static detail from the clear scene.
"""

__version__ = "0.1.0"
