"""dgkd-lab: diffusion-guided distillation and depth-guided fusion on a toy
low-light segmentation corpus, with a reproducible experiment harness."""

__version__ = "0.1.0"
