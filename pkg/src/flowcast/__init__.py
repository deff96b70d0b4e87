"""Flow-guided semantic forecasting on synthetic scenes.

The package is organised as a small numpy library:

- ``autodiff``: dense tensors with reverse-mode differentiation
- ``warp``: differentiable bilinear warping along a flow field
- ``scenes``: deterministic synthetic sequences with exact labels and flow
- ``fileio``: PPM/PGM/.flo readers and writers
- ``flownet`` / ``convlstm`` / ``segnet``: the three network components
- ``forecaster``: single-step and auto-regressive future segmentation
- ``losses`` / ``metrics`` / ``trainer``: objectives, IoU, SGD training
- ``cli``: gen-data / pretrain-flow / train / eval / ablate / predict
"""

from .autodiff import Tensor, no_grad
from .warp import warp, warp_label_map

__all__ = ["Tensor", "no_grad", "warp", "warp_label_map"]

__version__ = "0.1.0"
