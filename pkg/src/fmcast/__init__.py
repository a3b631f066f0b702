"""Flow-matching generative ensemble forecaster for gridded stratospheric
fields, with a synthetic vortex-collapse testbed and verification suite."""

__version__ = "0.1.0"
