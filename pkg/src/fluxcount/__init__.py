"""fluxcount: flux-tunable single microwave photon counter simulation and analysis."""

__version__ = "0.1.0"
