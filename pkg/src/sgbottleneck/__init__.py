"""Graph-bottleneck scene autoencoding for 3D scene graph learning."""

__version__ = "0.1.0"
