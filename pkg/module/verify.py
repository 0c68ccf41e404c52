import copy, math, time, torch
import torch.nn.functional as F
import structlog
from dataclasses import dataclass, field

from model import moments
from model.errors import VerificationError
from model.layers import Linear, NetworkSpec, Norm, analytic_stats, introduce_normalization, strip_normalization
from model.moments import MomentPair
from model.presets import init_weights, preset_cifar_cnn, preset_mnist_mlp
from model.tensor import conv2d
from module.autodiff import backward
from module.oracle import finite_diff_grad, mc_linear, mc_max_pair, mc_moments


log = structlog.get_logger()

GRID_A = (-4, -2, -1, 0, 1, 2, 4)
GRID_SIGMA = (0.1, 1, 10)
NORM_MODES = ('ap2', 'bn', 'wn')



@dataclass
class Check:
    name: str
    measured: float
    bound: float
    above: bool = False

    @property
    def passed(self):
        if not math.isfinite(self.measured):
            return False
        return self.measured > self.bound if self.above else self.measured <= self.bound



@dataclass
class Report:
    suite: str
    checks: list = field(default_factory=list)

    def add(self, name, measured, bound, above=False):
        self.checks.append(Check(name, float(measured), float(bound), above))

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def print(self):
        print(f"--- Verification suite: {self.suite} ---")
        for c in self.checks:
            rel = '>' if c.above else '<='
            status = 'PASS' if c.passed else 'FAIL'
            print(f"  [{status}] {c.name}: {c.measured:.3e} {rel} {c.bound:.1e}")
        print(f"--- {len(self.checks) - len(self.failures)}/{len(self.checks)} passed ---\n")

    def raise_on_failure(self):
        if not self.passed:
            names = ', '.join(c.name for c in self.failures)
            raise VerificationError(f"suite '{self.suite}' failed: {names}")




def _se_distance(est, analytic):
    dm = abs(est.mean - float(analytic.mean)) / max(est.mean_se, 1e-12)
    dv = abs(est.variance - float(analytic.variance)) / max(est.variance_se, 1e-12)
    return max(dm, dv)



def moments_suite(seed=0, n_samples=10**6):
    report = Report('moments')

    relu = moments.relu_moments(MomentPair.scalar(0, 1))
    report.add("relu(0,1) mean", abs(relu.mean.item() - 0.39894), 1e-4)
    report.add("relu(0,1) variance", abs(relu.variance.item() - 0.34085), 1e-4)
    relu = moments.relu_moments(MomentPair.scalar(3, 1))
    report.add("relu(3,1) mean", abs(relu.mean.item() - 3.00038), 1e-3)
    report.add("relu(3,1) variance", abs(relu.variance.item() - 0.99751), 1e-3)

    ops = {
        'relu': (lambda x: moments.relu_moments(x), {}),
        'leaky_relu': (lambda x: moments.leaky_relu_moments(x, 0.03), {'slope': 0.03}),
        'sigmoid': (lambda x: moments.sigmoid_moments(x), {}),
        'dropout': (lambda x: moments.dropout_moments(x, 0.8), {'keep_prob': 0.8}),
    }

    worst = {name: 0.0 for name in list(ops) + ['max_pair', 'linear']}
    for i, (a, sigma) in enumerate((a, s) for a in GRID_A for s in GRID_SIGMA):
        x = MomentPair.scalar(a * sigma, sigma ** 2)

        for name, (op, kwargs) in ops.items():
            est = mc_moments(name, x, n_samples, seed + i, **kwargs)
            worst[name] = max(worst[name], _se_distance(est, op(x)))

        other = MomentPair.scalar(0.5 * sigma, sigma ** 2)
        est = mc_max_pair(x, other, n_samples, seed + i)
        worst['max_pair'] = max(worst['max_pair'], _se_distance(est, moments.max_pair_moments(x, other)))

    gen = torch.Generator().manual_seed(seed)
    for trial in range(5):
        w = torch.randn(3, 4, generator=gen, dtype=torch.float64)
        x = MomentPair(torch.randn(4, generator=gen, dtype=torch.float64),
                       torch.rand(4, generator=gen, dtype=torch.float64) + 0.1)
        mean, var = mc_linear(w, x, n_samples, seed + trial)
        analytic = moments.linear_moments(x, w)
        # standard errors of the sample mean and variance of a Gaussian
        se_mean = (analytic.variance / n_samples).sqrt()
        se_var = analytic.variance * math.sqrt(2.0 / n_samples)
        dist = torch.maximum((mean - analytic.mean).abs() / se_mean, (var - analytic.variance).abs() / se_var)
        worst['linear'] = max(worst['linear'], dist.max().item())

    for name, value in worst.items():
        report.add(f"{name} vs Monte-Carlo (max standard errors)", value, 4.0)
    return report




def nll(net, batch, labels):
    return F.nll_loss(net(batch, training=True, update_running=False), labels)



def gradient_check(net, batch, labels, n_coords=10, h=1e-3, seed=0, detach_stats=False):
    """Max relative error between reverse-mode and central-difference gradients (float64)."""
    net = copy.deepcopy(net).double()
    batch = batch.double()
    net.set_detach_stats(detach_stats)

    grads = backward(nll(net, batch, labels), net)
    if detach_stats:
        net.freeze_norm_stats(True)

    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name, p in net.named_parameters():
        coords = torch.randperm(p.numel(), generator=gen)[:n_coords].tolist()
        base = p.detach().clone()

        def objective(x):
            with torch.no_grad():
                p.copy_(x)
                return nll(net, batch, labels).item()

        fd = finite_diff_grad(objective, base, h, coords).view(-1)[coords]
        with torch.no_grad():
            p.copy_(base)

        ad = grads[name].view(-1)[coords]
        scale = torch.maximum(torch.maximum(ad.abs(), fd.abs()), torch.full_like(ad, 1e-6))
        errors[name] = ((ad - fd).abs() / scale).max().item()

    net.freeze_norm_stats(False)
    return max(errors.values()), errors



def _normalized_preset(preset, mode, seed):
    torch.manual_seed(seed)
    net = init_weights(preset)
    if mode == 'none':
        return net
    init = 'bn-style' if mode == 'bn' else 'projecting'
    return introduce_normalization(net, mode, init, generator=torch.Generator().manual_seed(seed))



def gradients_suite(seed=0, n_coords=10):
    report = Report('gradients')
    gen = torch.Generator().manual_seed(seed)

    cases = [
        ('mnist_mlp', lambda: preset_mnist_mlp(), (1, 28, 28), 16, 1e-3),
        # leaky relu kinks call for a small step and few units
        ('cifar_cnn', lambda: preset_cifar_cnn(input_shape=(3, 8, 8)), (3, 8, 8), 4, 1e-6),
    ]

    for name, build, shape, n, h in cases:
        batch = torch.rand(n, *shape, generator=gen)
        labels = torch.randint(0, 10, (n,), generator=gen)

        for mode in ('none',) + NORM_MODES:
            for detach in ((False, True) if mode != 'none' else (False,)):
                net = _normalized_preset(build(), mode, seed)
                worst, _ = gradient_check(net, batch, labels, n_coords, h, seed, detach)
                report.add(f"{name}/{mode}/detach={detach} gradient rel. error", worst, 1e-3)
    return report




def _norm_probe(mode, weight, bias, batch, stats):
    net = NetworkSpec([Linear(*weight.shape[::-1]), Norm(weight.size(0), mode, eps=0.0)], (weight.size(1),), stats)
    net.double()
    with torch.no_grad():
        net.layers[0].weight.copy_(weight)
        net.layers[0].bias.copy_(bias)
    return net, net(batch, training=True)



def invariances_suite(seed=0):
    report = Report('invariances')
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64

    n_in, n_out = 8, 5
    batch = torch.randn(64, n_in, generator=gen, dtype=dtype) * 2 + 1
    stats = MomentPair(torch.ones(n_in, dtype=dtype), torch.full((n_in,), 4.0, dtype=dtype))
    weight = torch.randn(n_out, n_in, generator=gen, dtype=dtype)
    bias = torch.randn(n_out, generator=gen, dtype=dtype)

    for mode in NORM_MODES:
        net, ref = _norm_probe(mode, weight, bias, batch, stats)
        ref_grad = torch.autograd.grad(ref.pow(3).sum(), net.layers[0].weight)[0]

        worst, grad_change = 0.0, math.inf
        for alpha in (0.1, 2.0, 10.0):
            scaled, out = _norm_probe(mode, alpha * weight, bias + 3.0, batch, stats)
            worst = max(worst, (out - ref).abs().max().item())
            grad = torch.autograd.grad(out.pow(3).sum(), scaled.layers[0].weight)[0]
            grad_change = min(grad_change, (grad - ref_grad).norm().item())

        report.add(f"{mode} scale/bias invariance (max abs)", worst, 1e-5)
        report.add(f"{mode} gradient changes under rescaling (norm)", grad_change, 0.0, above=True)

    # batch variance is <w w^T, C>_F with the sample covariance C
    z = batch - batch.mean(dim=0)
    cov = z.T @ z / (len(batch) - 1)
    x = batch @ weight.T + bias
    frob = torch.einsum('oi,ij,oj->o', weight, cov, weight)
    report.add("batch variance equals <ww^T, C>_F", (x.var(dim=0) - frob).abs().max().item(), 1e-4)

    for mode in ('ap2', 'wn', 'bn'):
        net, _ = _norm_probe(mode, weight, bias, batch, stats)
        with torch.no_grad():
            diff = (net(batch, training=True) - net(batch, training=False)).abs().max().item()
        if mode == 'bn':
            report.add("bn train/eval outputs differ", diff, 0.0, above=True)
        else:
            report.add(f"{mode} train/eval outputs identical", diff, 0.0)

    _projection_checks(report, seed)
    _conversion_checks(report, seed)
    _collapse_checks(report, seed)
    return report



def _projection_checks(report, seed):
    torch.manual_seed(seed)
    stats = MomentPair(torch.tensor([0.13]), torch.tensor([0.095]))
    net = introduce_normalization(init_weights(preset_mnist_mlp(input_stats=stats)), 'ap2', 'projecting')

    entering = analytic_stats(net)
    dev = 0.0
    for idx, layer in enumerate(net.layers):
        if layer.kind == 'activation' and layer.name == 'sigmoid':
            dev = max(dev, entering[idx].mean.abs().max().item(), (entering[idx].variance - 1).abs().max().item())
    report.add("analytic stats entering every sigmoid are (0, 1)", dev, 0.0)

    gen = torch.Generator().manual_seed(seed)
    batch = 0.13 + math.sqrt(0.095) * torch.randn(10_000, 1, 28, 28, generator=gen)
    first = next(idx for idx, layer in enumerate(net.layers) if layer.kind == 'activation')
    with torch.no_grad():
        x = net(batch, upto=first)
    report.add("first hidden layer empirical |mean|", x.mean(dim=0).abs().max().item(), 0.05)
    var = x.var(dim=0)
    report.add("first hidden layer empirical var below 1.25", var.max().item(), 1.25)
    report.add("first hidden layer empirical var above 0.8", var.min().item(), 0.8, above=True)

    with torch.no_grad():
        for idx, layer in enumerate(net.layers):
            if layer.kind == 'activation' and layer.name == 'sigmoid' and idx != first:
                h = net(batch[:2000], upto=idx)
                log.info("deeper layer empirical stats", layer=idx,
                         mean_dev=h.mean(dim=0).abs().max().item(), var=h.var(dim=0).mean().item())



def _conversion_checks(report, seed):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    base = init_weights(preset_mnist_mlp()).double()

    for mode in ('ap2', 'wn'):
        normalized = introduce_normalization(base, mode, 'equivalence')
        stripped = strip_normalization(normalized)
        worst = 0.0
        with torch.no_grad():
            for _ in range(10):
                batch = torch.rand(32, 1, 28, 28, generator=gen, dtype=torch.float64)
                ref = base(batch)
                worst = max(worst, (normalized(batch) - ref).abs().max().item(),
                            (stripped(batch) - ref).abs().max().item())
        report.add(f"{mode} equivalence round trip (max abs)", worst, 1e-5)

    batch = torch.rand(128, 1, 28, 28, generator=gen, dtype=torch.float64)
    normalized = introduce_normalization(base, 'bn', 'equivalence', batch=batch)
    stripped = strip_normalization(normalized, batch=batch)
    with torch.no_grad():
        ref = base(batch)
        worst = max((normalized(batch, training=True) - ref).abs().max().item(),
                    (stripped(batch) - ref).abs().max().item())
    report.add("bn equivalence round trip on conversion batch (max abs)", worst, 1e-5)



def _collapse_checks(report, seed):
    torch.manual_seed(seed)
    net = introduce_normalization(init_weights(preset_cifar_cnn()), 'ap2', 'projecting').double()
    entering = analytic_stats(net)

    worst = 0.0
    for idx, layer in enumerate(net.layers):
        if layer.kind != 'conv':
            continue
        size = 2 * layer.kh + 1
        stats = entering[idx]
        mean_map = stats.mean.view(1, -1, 1, 1).expand(1, -1, size, size)
        var_map = stats.variance.view(1, -1, 1, 1).expand(1, -1, size, size)

        with torch.no_grad():
            mean = conv2d(mean_map, layer.weight, 1, 0) + layer.bias.view(1, -1, 1, 1)
            var = conv2d(var_map, layer.weight ** 2, 1, 0)
            collapsed = layer.propagate(stats, None)
        centre = mean.size(-1) // 2
        worst = max(worst, (mean[0, :, centre, centre] - collapsed.mean).abs().max().item(),
                    (var[0, :, centre, centre] - collapsed.variance).abs().max().item())
    report.add("cnn collapsed stats equal explicit spatial propagation", worst, 1e-6)

    net = net.float()
    batch = torch.rand(128, 3, 32, 32)
    with torch.no_grad():
        analytic_stats(net)
        net(batch[:8])
        start = time.perf_counter()
        analytic_stats(net)
        analytic_time = time.perf_counter() - start
        start = time.perf_counter()
        net(batch)
        forward_time = time.perf_counter() - start
    report.add("analytic pass cost / 128-batch forward", analytic_time / forward_time, 0.05)




SUITES = {
    'moments': moments_suite,
    'gradients': gradients_suite,
    'invariances': invariances_suite,
}



def run_suite(name, seed=0):
    report = SUITES[name](seed=seed)
    log.info("verification finished", suite=name, passed=report.passed, checks=len(report.checks))
    return report
