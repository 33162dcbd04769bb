"""PET Joint Diffusion - unified low-count PET denoising and lesion/organ segmentation."""

__version__ = "0.1.0"
