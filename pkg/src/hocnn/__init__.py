"""Higher-order convolutional networks for synthetic retinal ganglion cells."""

from .hoconv import (
    HoKernelBank,
    WindowSpec,
    count_monomials,
    hoconv3d_backward,
    hoconv3d_forward,
    hoconv_oracle,
    scale_factor,
)

__all__ = [
    "HoKernelBank",
    "WindowSpec",
    "count_monomials",
    "hoconv3d_backward",
    "hoconv3d_forward",
    "hoconv_oracle",
    "scale_factor",
]
