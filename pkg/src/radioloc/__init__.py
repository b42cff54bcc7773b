"""Urban radio localization benchmark: scenes, dominant-path radio maps,
fingerprint and ToA localizers, and a small center-of-mass U-Net."""

__version__ = "0.1.0"
