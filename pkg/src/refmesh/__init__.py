"""Reference-mesh extraction for time-varying meshes with self-contact."""

__version__ = "0.1.0"
