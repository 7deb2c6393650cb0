"""navhop: self-migrating, checkpointable tasks over a shared blob store."""

__version__ = "0.1.0"
