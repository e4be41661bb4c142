"""Mixed-resolution multi-band fusion encoder with swapped-assignment
self-supervised training, synthetic co-registered data, and a
segmentation fine-tuning pipeline, all on a minimal numpy autodiff core."""

__version__ = "0.1.0"
