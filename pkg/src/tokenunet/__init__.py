"""Token-UNet: residual 3D UNets with a learned-token bottleneck."""
from .kernels import BACKEND

__version__ = "0.1.0"
