"""Degradation-invariant autoencoder for text recognition and document enhancement.

A small numpy autodiff engine drives a ViT encoder that is pretrained on
three pretext tasks (unmasking, deblurring, denoising) and then fine-tuned
with either a character-sequence decoder or an image-reconstruction decoder.
"""

__version__ = "0.1.0"
