"""Rest-similarity gated preprocessing for motor-imagery EEG, desk scale."""

__version__ = "0.1.0"
