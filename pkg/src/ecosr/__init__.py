"""Physics-constrained super-resolution surrogates for periodic linear elasticity.

High-resolution stress and strain fields are predicted from microstructure
alone, supervised only at low resolution; stress equilibrium and strain
compatibility are built into the network outputs by construction rather than
penalized. The package also ships the FFT spectral solver used to make the
training data, so every experiment is reproducible end to end from a seed.
"""

from ecosr.fieldcore import Field, FieldKind, GridSpec

__version__ = "0.1.0"

__all__ = ["Field", "FieldKind", "GridSpec", "__version__"]
