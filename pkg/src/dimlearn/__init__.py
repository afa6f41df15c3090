"""Neural-network proxies for dynamic initial margin trained on noisy Monte Carlo labels."""

__version__ = "0.1.0"
