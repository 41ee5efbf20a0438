from .blocks import *  # noqa: F401,F403
from .blocks import __all__ as _blocks_all
from .module import Module, ModuleList, init_parameters

__all__ = list(_blocks_all) + ["Module", "ModuleList", "init_parameters"]
