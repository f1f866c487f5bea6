"""EM policy gradient on small enumerable latent-rationale tasks."""

__version__ = "0.1.0"
