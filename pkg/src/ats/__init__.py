"""Teacher-to-student alignment of an asymmetric pair of modalities, at desk scale."""

__version__ = "0.1.0"
