"""IoT botnet traffic classification with VAE, ViT and graph neural network pipelines."""

__version__ = "0.1.0"
