"""Event-camera 6-DOF tracking against a photometric depth map."""

__version__ = "0.1.0"
