"""Pathology-to-genomics translation for image-only survival prediction.

Training pairs each whole-slide bag of patch features with a genomic profile;
at test time risks come from the image alone, through the translated
genomic latent.
"""

__version__ = "0.1.0"
