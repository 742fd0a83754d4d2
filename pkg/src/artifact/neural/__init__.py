"""Minimal NumPy neural engine: layers, U-Net, loss, augmentation, Adam and training."""
