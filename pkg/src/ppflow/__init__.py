"""Point-process flows: flow-based and latent-variable models of event inter-arrival times."""

__version__ = "0.1.0"
