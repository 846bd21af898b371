"""Point-cloud semantic segmentation with LiDAR/camera feature fusion.

Subpackages and modules:

* ``curves``    -- space-filling-curve serialization of quantized points
* ``geom``      -- point clouds, camera models, projection and sampling
* ``augment``   -- training-time augmentation and test-time transform sets
* ``nn``        -- dense reverse-mode autodiff, layers, losses, optimizer
* ``backbones`` -- image and point-cloud feature extractors
* ``fusion``    -- geometric / semantic feature fusion and prediction heads
* ``harness``   -- synthetic scenes, staged training, metrics, CLI
"""

__version__ = "0.1.0"
