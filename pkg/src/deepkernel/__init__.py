"""Deep latent-space kernel networks for low-dose PET denoising with MR guidance."""

__version__ = "0.1.0"
