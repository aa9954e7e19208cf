"""Communication robustness testbed for simulated industrial controllers."""

__version__ = "0.1.0"
