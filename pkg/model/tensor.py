"""Dense tensor kernels shared by the rest of the package.

Tensors are plain ``torch.Tensor`` values. The helpers here validate shapes and
accumulate matmul and reductions in float64, returning the input dtype.
"""

import math, torch
import torch.nn.functional as F

from .errors import ShapeError, NumericalError




def as_tensor(data, shape=None):
    """Build a float32 tensor from external input, rejecting NaN/Inf."""
    t = torch.as_tensor(data, dtype=torch.float32).clone()

    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != t.numel():
            raise ShapeError(f"{t.numel()} values do not fill shape {shape}")
        t = t.reshape(shape)

    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite entries in input of shape {tuple(t.shape)}")
    return t



def matmul(a, b):
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.size(1) != b.size(0):
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")

    return (a.double() @ b.double()).to(a.dtype)



def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1



def conv2d(input, filters, stride=1, zero_pad=0):
    """Cross-correlation with zero padding.

    ``input`` is C_in x H x W or N x C_in x H x W, ``filters`` C_out x C_in x kh x kw.
    """
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if zero_pad < 0:
        raise ShapeError(f"conv2d padding must be non-negative, got {zero_pad}")
    if filters.dim() != 4:
        raise ShapeError(f"conv2d filters must be 4-D, got {tuple(filters.shape)}")

    batched = input.dim() == 4
    if not batched:
        if input.dim() != 3:
            raise ShapeError(f"conv2d input must be 3-D or 4-D, got {tuple(input.shape)}")
        input = input.unsqueeze(0)

    c_in, h, w = input.shape[1:]
    c_out, f_in, kh, kw = filters.shape
    if c_in != f_in:
        raise ShapeError(f"conv2d input has {c_in} channels, filters expect {f_in}")

    out_h = conv_output_size(h, kh, stride, zero_pad)
    out_w = conv_output_size(w, kw, stride, zero_pad)
    if kh > h + 2 * zero_pad or kw > w + 2 * zero_pad or out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d of {kh}x{kw} kernel over padded {h}x{w} input is empty")

    out = F.conv2d(input, filters.to(input.dtype), stride=stride, padding=zero_pad)
    return out if batched else out.squeeze(0)



def reduce_spatial_sum(filters, power=1):
    """Entry [o, i] is the sum over kernel taps of filters[o, i] ** power."""
    if filters.dim() != 4:
        raise ShapeError(f"reduce_spatial_sum expects a 4-D filter tensor, got {tuple(filters.shape)}")

    taps = filters.double()
    if power != 1:
        taps = taps ** power
    return taps.sum(dim=(2, 3)).to(filters.dtype)