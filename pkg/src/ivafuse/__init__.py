"""Speaker identification from IVA-fused LPC and MFCC features."""

__version__ = "0.1.0"
