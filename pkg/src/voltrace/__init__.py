"""voltrace: a volumetric path tracer for composable object-centric
scattering fields, plus a from-scratch trainable neural field."""

__version__ = "0.1.0"
