"""Mean/variance propagation through linear maps and pointwise nonlinearities.

Every op works elementwise on a MomentPair of any shape; a 0-d pair plays the
role of a scalar (mean, variance). Internals run in float64 and results are
cast back to the input dtype.
"""

import math, torch
import numpy as np
from dataclasses import dataclass

from .errors import MomentError, ShapeError, UnsupportedLayerError
from .tensor import matmul


SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
HERMITE_ORDER = 32
# beyond this input variance the sigmoid is too sharp for Gauss-Hermite nodes
WIDE_VARIANCE = 9.0



@dataclass
class MomentPair:
    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.variance = torch.as_tensor(self.variance).to(self.mean.dtype)

        if self.mean.shape != self.variance.shape:
            raise MomentError(f"mean {tuple(self.mean.shape)} and variance "
                              f"{tuple(self.variance.shape)} differ in shape")

    @classmethod
    def scalar(cls, mean, variance, dtype=torch.float64):
        return cls(torch.tensor(float(mean), dtype=dtype), torch.tensor(float(variance), dtype=dtype))

    @property
    def std(self):
        return self.variance.clamp_min(0).sqrt()

    def __len__(self):
        return self.mean.numel()

    def detach(self):
        return MomentPair(self.mean.detach(), self.variance.detach())

    def to(self, dtype):
        return MomentPair(self.mean.to(dtype), self.variance.to(dtype))


# a MomentScalar is a 0-d MomentPair
MomentScalar = MomentPair



def _check_variance(input):
    if (input.variance < 0).any():
        raise MomentError(f"negative input variance (min {input.variance.min().item():.3g})")



def phi_pdf(x):
    x = torch.as_tensor(x, dtype=torch.float64)
    return INV_SQRT_2PI * torch.exp(-0.5 * x * x)


def phi_cdf(x):
    x = torch.as_tensor(x, dtype=torch.float64)
    return torch.special.ndtr(x)



def affine_moments(input, scale, shift):
    """Moments of scale * X + shift."""
    return MomentPair(input.mean * scale + shift, input.variance * scale * scale)



def linear_moments(input, weights, bias=None):
    """Diagonal-covariance propagation through y = W x + bias."""
    _check_variance(input)
    if weights.dim() != 2 or weights.size(1) != input.mean.numel():
        raise ShapeError(f"weights {tuple(weights.shape)} do not match {input.mean.numel()} inputs")

    mean = matmul(weights, input.mean.reshape(-1, 1)).reshape(-1)
    if bias is not None:
        if bias.numel() != weights.size(0):
            raise ShapeError(f"bias of {bias.numel()} entries for {weights.size(0)} outputs")
        mean = mean + bias.reshape(-1)

    variance = matmul(weights * weights, input.variance.reshape(-1, 1)).reshape(-1)
    return MomentPair(mean, variance)



def relu_variance_factor(a):
    """R(a) = Var[relu(X)] / sigma^2 for X ~ N(a sigma, sigma^2)."""
    pdf, cdf, tail = phi_pdf(a), phi_cdf(a), phi_cdf(-a)

    direct = a * pdf + (a * a + 1) * cdf - (a * cdf + pdf) ** 2
    # a >= 0: the a^2 terms cancel analytically, keep only the tail terms
    t = pdf - a * tail
    reflected = 1 + (a * a - 1) * tail - a * pdf - t * t

    return torch.where(a >= 0, reflected, direct).clamp_min(0)



def _split_degenerate(input):
    mean = input.mean.double()
    variance = input.variance.double()
    degenerate = variance <= 0
    std = torch.where(degenerate, torch.ones_like(variance), variance).sqrt()
    return mean, variance, std, degenerate



def relu_moments(input):
    _check_variance(input)
    mean, variance, std, degenerate = _split_degenerate(input)

    a = mean / std
    out_mean = mean * phi_cdf(a) + std * phi_pdf(a)
    out_var = variance * relu_variance_factor(a)

    out_mean = torch.where(degenerate, mean.clamp_min(0), out_mean)
    out_var = torch.where(degenerate, torch.zeros_like(out_var), out_var)
    return MomentPair(out_mean.to(input.mean.dtype), out_var.to(input.mean.dtype))



def leaky_relu_moments(input, slope):
    """f(x) = x for x >= 0, slope * x otherwise, written as slope * x + (1 - slope) * relu(x)."""
    if not 0 <= slope <= 1:
        raise MomentError(f"leaky relu slope must lie in [0, 1], got {slope}")
    _check_variance(input)
    mean, variance, std, degenerate = _split_degenerate(input)

    a = mean / std
    pdf, cdf = phi_pdf(a), phi_cdf(a)
    relu_mean = mean * cdf + std * pdf

    out_mean = slope * mean + (1 - slope) * relu_mean
    # Cov[X, relu(X)] = sigma^2 Phi(a)
    out_var = variance * (slope ** 2 + (1 - slope) ** 2 * relu_variance_factor(a)
                          + 2 * slope * (1 - slope) * cdf)

    point = torch.where(mean >= 0, mean, slope * mean)
    out_mean = torch.where(degenerate, point, out_mean)
    out_var = torch.where(degenerate, torch.zeros_like(out_var), out_var.clamp_min(0))
    return MomentPair(out_mean.to(input.mean.dtype), out_var.to(input.mean.dtype))



_hermite_cache = {}

def hermite_rule(order=HERMITE_ORDER):
    if order not in _hermite_cache:
        nodes, weights = np.polynomial.hermite.hermgauss(order)
        _hermite_cache[order] = (torch.from_numpy(nodes), torch.from_numpy(weights / math.sqrt(math.pi)))
    return _hermite_cache[order]



def gauss_hermite_moments(f, input, order=HERMITE_ORDER):
    """E[f(X)] and Var[f(X)] for X ~ N(mean, variance) by Gauss-Hermite quadrature."""
    _check_variance(input)
    nodes, weights = hermite_rule(order)

    mean = input.mean.double().unsqueeze(-1)
    variance = input.variance.double()
    positive = variance > 0
    std = (torch.where(positive, variance, torch.ones_like(variance)).sqrt() * positive).unsqueeze(-1)

    values = f(mean + SQRT2 * std * nodes)
    out_mean = (weights * values).sum(-1)
    out_var = (weights * (values - out_mean.unsqueeze(-1)) ** 2).sum(-1).clamp_min(0)
    return MomentPair(out_mean.to(input.mean.dtype), out_var.to(input.mean.dtype))



_laguerre_cache = {}

def laguerre_rule(order=HERMITE_ORDER):
    if order not in _laguerre_cache:
        nodes, weights = np.polynomial.laguerre.laggauss(order)
        _laguerre_cache[order] = (torch.from_numpy(nodes), torch.from_numpy(weights))
    return _laguerre_cache[order]



def _wide_sigmoid_moments(mean, std, order):
    """First two moments of sigmoid(X) when std is large against the sigmoid's width.

    sigmoid = step + a remainder that decays like exp(-|x|); the step integrates to
    Phi(mean/std) and each half of the remainder is a Gauss-Laguerre integral.
    """
    nodes, weights = laguerre_rule(order)
    mean, std = mean.unsqueeze(-1), std.unsqueeze(-1)

    right = INV_SQRT_2PI / std * torch.exp(-0.5 * ((nodes - mean) / std) ** 2)
    left = INV_SQRT_2PI / std * torch.exp(-0.5 * ((nodes + mean) / std) ** 2)
    sig, sig_neg = torch.sigmoid(nodes), torch.sigmoid(-nodes)

    step = phi_cdf(mean.squeeze(-1) / std.squeeze(-1))
    first = step + (weights * (left - right) * sig).sum(-1)
    second = step + (weights * (left * sig_neg - right * (1 + sig)) * sig).sum(-1)
    return first, (second - first ** 2).clamp_min(0)



def sigmoid_moments(input, order=HERMITE_ORDER):
    out = gauss_hermite_moments(torch.sigmoid, input, order)

    variance = input.variance.double()
    wide = variance > WIDE_VARIANCE
    if not wide.any():
        return out

    std = torch.where(wide, variance, torch.ones_like(variance)).sqrt()
    mean, var = _wide_sigmoid_moments(input.mean.double(), std, order)
    dtype = input.mean.dtype
    return MomentPair(torch.where(wide, mean.to(dtype), out.mean), torch.where(wide, var.to(dtype), out.variance))



def max_pair_moments(x1, x2):
    """Clark's moments of max(X1, X2) for independent Gaussians."""
    _check_variance(x1)
    _check_variance(x2)

    mu1, mu2 = x1.mean.double(), x2.mean.double()
    var1, var2 = x1.variance.double(), x2.variance.double()

    theta2 = var1 + var2
    degenerate = theta2 <= 0
    theta = torch.where(degenerate, torch.ones_like(theta2), theta2).sqrt()

    alpha = (mu1 - mu2) / theta
    cdf, tail, pdf = phi_cdf(alpha), phi_cdf(-alpha), phi_pdf(alpha)

    out_mean = mu1 * cdf + mu2 * tail + theta * pdf
    second = (mu1 ** 2 + var1) * cdf + (mu2 ** 2 + var2) * tail + (mu1 + mu2) * theta * pdf
    out_var = (second - out_mean ** 2).clamp_min(0)

    out_mean = torch.where(degenerate, torch.maximum(mu1, mu2), out_mean)
    out_var = torch.where(degenerate, torch.zeros_like(out_var), out_var)
    return MomentPair(out_mean.to(x1.mean.dtype), out_var.to(x1.mean.dtype))



def dropout_moments(input, keep_prob, post_scale=1.0):
    """Moments of post_scale * X * B with B ~ Bernoulli(keep_prob)."""
    if not 0 < keep_prob <= 1:
        raise MomentError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    _check_variance(input)

    mean, variance = input.mean, input.variance
    out_mean = keep_prob * mean
    out_var = keep_prob * (variance + mean * mean) - keep_prob ** 2 * mean * mean
    return MomentPair(out_mean * post_scale, out_var.clamp_min(0) * post_scale ** 2)



def propagate_activation(name, input, **kwargs):
    if name == 'relu':
        return relu_moments(input)
    elif name == 'leaky_relu':
        return leaky_relu_moments(input, kwargs['slope'])
    elif name == 'sigmoid':
        return sigmoid_moments(input)
    raise UnsupportedLayerError(f"no moment rule for activation '{name}'")
