"""Visual servoing of a gimbal-camera drone onto a ground vehicle, with a distilled student controller."""

__version__ = "0.1.0"
