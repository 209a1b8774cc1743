"""Sketch colorization GANs guided by an adversarial loss on segmentation maps.

A frozen panoptic segmentation network turns real and generated images into
per-pixel class probability maps; auxiliary discriminators judge those maps,
and their losses are added to any paired or unpaired translation baseline.
"""

__version__ = "0.1.0"
