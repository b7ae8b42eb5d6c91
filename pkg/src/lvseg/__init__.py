"""Left-ventricle segmentation: CNN localisation, stacked-autoencoder shape inference, deformable refinement."""

__version__ = "0.1.0"
