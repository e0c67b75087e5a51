"""CPU Gaussian splatting: initialization, projection, compositing, losses.

The compositing kernels come from the compiled extension when it is
importable; otherwise the numpy implementation is used.  Set
``RIGIDSPLAT_FORCE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py
if not os.environ.get("RIGIDSPLAT_FORCE_PYTHON"):
    try:
        from . import _kernels as kernels  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def get_kernels(name: str | None = None):
    """Return a kernel module by name (``"cython"`` / ``"python"``), default the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def num_threads() -> int:
    val = os.environ.get("RIGIDSPLAT_NUM_THREADS")
    if val:
        return max(1, int(val))
    return os.cpu_count() or 1


from .gaussians import GaussianSet, init_gaussians  # noqa: E402
from .losses import image_loss, psnr, ssim  # noqa: E402
from .project import project_gaussian  # noqa: E402
from .raster import RenderConfig, RenderOutput, rasterize, rasterize_backward  # noqa: E402

__all__ = [
    "BACKEND", "GaussianSet", "RenderConfig", "RenderOutput", "get_kernels", "image_loss",
    "init_gaussians", "num_threads", "project_gaussian", "psnr", "rasterize",
    "rasterize_backward", "ssim",
]
