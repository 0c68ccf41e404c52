"""Monte-Carlo moment estimates and central finite differences, used to check
the analytic formulas and the reverse-mode gradients."""

import math, torch
import torch.nn.functional as F
from dataclasses import dataclass

from model.errors import NumericalError, OracleError


MIN_SAMPLES = 10_000
JACKKNIFE_GROUPS = 200

FUNCTIONS = {
    'identity': lambda x, **kw: x,
    'relu': lambda x, **kw: F.relu(x),
    'leaky_relu': lambda x, slope=0.0, **kw: torch.where(x >= 0, x, slope * x),
    'sigmoid': lambda x, **kw: torch.sigmoid(x),
}



@dataclass
class MCEstimate:
    mean: float
    variance: float
    mean_se: float
    variance_se: float

    def within(self, mean, variance, n_se=4.0):
        return (abs(self.mean - mean) <= n_se * self.mean_se + 1e-12
                and abs(self.variance - variance) <= n_se * self.variance_se + 1e-12)




def _group_generator(seed, group):
    return torch.Generator().manual_seed(seed * 1_000_003 + group)



def _jackknife(groups):
    """Delete-one-group jackknife over per-group (count, sum, sum of squares)."""
    n = torch.tensor([g[0] for g in groups], dtype=torch.float64)
    s1 = torch.stack([g[1] for g in groups])
    s2 = torch.stack([g[2] for g in groups])

    total_n, total_s1, total_s2 = n.sum(), s1.sum(), s2.sum()
    mean = (total_s1 / total_n).item()
    variance = (total_s2 / total_n - (total_s1 / total_n) ** 2).item() * total_n.item() / (total_n.item() - 1)

    loo_n = total_n - n
    loo_mean = (total_s1 - s1) / loo_n
    loo_var = ((total_s2 - s2) / loo_n - loo_mean ** 2) * loo_n / (loo_n - 1)

    g = len(groups)
    scale = (g - 1) / g
    mean_se = math.sqrt(scale * ((loo_mean - loo_mean.mean()) ** 2).sum().item())
    variance_se = math.sqrt(scale * ((loo_var - loo_var.mean()) ** 2).sum().item())
    return MCEstimate(mean, variance, mean_se, variance_se)



def _sample_groups(n_samples, seed, draw):
    if n_samples < MIN_SAMPLES:
        raise OracleError(f"need at least {MIN_SAMPLES} samples, got {n_samples}")

    base, extra = divmod(n_samples, JACKKNIFE_GROUPS)
    groups = []
    for g in range(JACKKNIFE_GROUPS):
        size = base + (1 if g < extra else 0)
        y = draw(size, _group_generator(seed, g))
        groups.append((size, y.sum(), (y * y).sum()))
    return _jackknife(groups)



def mc_moments(f, input, n_samples, seed, **kwargs):
    """Sample X ~ N(mean, variance) and estimate the mean/variance of f(X)."""
    if f == 'dropout':
        keep_prob = kwargs['keep_prob']
        fn = lambda x, gen: x * torch.bernoulli(torch.full_like(x, keep_prob), generator=gen)
    elif f in FUNCTIONS:
        fn = lambda x, gen: FUNCTIONS[f](x, **kwargs)
    else:
        raise OracleError(f"unknown function id '{f}'")

    mean, std = float(input.mean), math.sqrt(float(input.variance))

    def draw(size, gen):
        x = mean + std * torch.randn(size, generator=gen, dtype=torch.float64)
        return fn(x, gen)

    return _sample_groups(n_samples, seed, draw)



def mc_max_pair(x1, x2, n_samples, seed):
    m1, s1 = float(x1.mean), math.sqrt(float(x1.variance))
    m2, s2 = float(x2.mean), math.sqrt(float(x2.variance))

    def draw(size, gen):
        a = m1 + s1 * torch.randn(size, generator=gen, dtype=torch.float64)
        b = m2 + s2 * torch.randn(size, generator=gen, dtype=torch.float64)
        return torch.maximum(a, b)

    return _sample_groups(n_samples, seed, draw)



def mc_linear(w, input, n_samples, seed, correlated=False, covariance=None):
    """Empirical moments of W x for Gaussian x, independent or with a given covariance."""
    if n_samples < MIN_SAMPLES:
        raise OracleError(f"need at least {MIN_SAMPLES} samples, got {n_samples}")

    w = torch.as_tensor(w, dtype=torch.float64)
    w = w.reshape(1, -1) if w.dim() == 1 else w
    mean = input.mean.double().reshape(-1)

    if correlated:
        cov = torch.as_tensor(covariance, dtype=torch.float64)
        if cov.shape != (len(mean), len(mean)) or not torch.allclose(cov, cov.T):
            raise OracleError(f"covariance must be a symmetric {len(mean)}x{len(mean)} matrix")
        # jitter tolerates rank-deficient (perfectly correlated) covariances
        evals, evecs = torch.linalg.eigh(cov)
        if evals.min() < -1e-9 * max(1.0, evals.abs().max().item()):
            raise OracleError("covariance is not positive semi-definite")
        factor = evecs * evals.clamp_min(0).sqrt()
    else:
        factor = torch.diag(input.variance.double().reshape(-1).sqrt())

    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n_samples, len(mean), generator=gen, dtype=torch.float64)
    y = (mean + z @ factor.T) @ w.T

    return y.mean(dim=0), y.var(dim=0)




def finite_diff_grad(f, point, h=1e-3, coords=None):
    """Central-difference gradient of scalar f at ``point`` in float64.

    ``coords`` restricts the estimate to a subset of flat indices; other entries are NaN.
    """
    if h <= 0:
        raise OracleError(f"finite-difference step must be positive, got {h}")

    x = torch.as_tensor(point, dtype=torch.float64).clone()
    flat = x.view(-1)
    grad = torch.full_like(flat, float('nan'))
    indices = range(flat.numel()) if coords is None else coords

    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig

        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericalError(f"non-finite objective at coordinate {i} (h={h})")
        grad[i] = (f_plus - f_minus) / (2 * h)

    return grad.view_as(x)
