"""Information-bottleneck analysis of path-integral control on the cart-pole."""

__version__ = "0.1.0"
