"""Model IP protection: weight watermarks, fingerprint-gated inference and an attack bench."""

__version__ = "0.1.0"
