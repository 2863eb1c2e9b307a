"""Token pruning for vision transformers driven by a learned noise allocator.

The package is self-contained on top of numpy: a small reverse-mode autodiff
tape, a ViT, the allocator and its training loop, test-time pruning
schedules, an analytic cost model and a command-line experiment harness.
"""

__version__ = "0.1.0"
