"""Forecasting foot-contact COP and time-of-impact from stereo shank-camera frames."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
