"""Neural garbage collection: KV-cache eviction learned with policy gradients."""

__version__ = "0.1.0"
