"""Global structure-from-motion from overlapping local star reconstructions."""

__version__ = "0.1.0"
