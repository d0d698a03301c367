"""Low-bandwidth event-camera filtering and binary-weight pedestrian detection."""

__version__ = "0.1.0"

from .events import Event, Polarity, SensorGeometry  # noqa: F401
