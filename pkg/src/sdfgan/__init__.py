"""3D shape generation with a style-based GAN over implicit SDFs."""

__version__ = "0.1.0"
