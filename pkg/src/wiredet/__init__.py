"""Wire-attentive detection of devices and electrode catheters in grayscale images."""

__version__ = "0.1.0"
