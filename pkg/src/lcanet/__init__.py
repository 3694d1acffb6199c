"""Local context attention network for salient object segmentation."""
from .kernels import BACKEND
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"
