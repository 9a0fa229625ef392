"""Framework-free MobileNet-SSD detection pipeline with edge-deployment economics."""

__version__ = "0.1.0"
