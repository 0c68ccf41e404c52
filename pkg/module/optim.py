import math, os, torch
import numpy as np
from scipy import optimize
from dataclasses import dataclass, field, fields
from typing import Optional
from torch.optim import Optimizer

from model.errors import ConfigError, NumericalError



@dataclass
class TrainConfig:
    preset: str = 'mnist_mlp'
    norm: str = 'none'
    init: str = 'none'
    dataset: str = 'blobs'
    data_dir: Optional[str] = None
    subset: int = 0
    batch_size: int = 128
    lr0: float = 1e-3
    epochs: int = 5
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_decay: float = 0.96
    noise_var: float = 0.0
    offset_range: int = 0
    hflip: bool = False
    lr_search: bool = False
    search_lo: float = -6.0
    search_hi: float = -2.0
    search_iters: int = 10
    search_epochs: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    orthonormal: bool = False
    detach_stats: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.norm not in ('none', 'bn', 'wn', 'ap2'):
            raise ConfigError(f"unknown norm '{self.norm}'")
        if self.init not in ('none', 'bn', 'ap2'):
            raise ConfigError(f"unknown init '{self.init}'")
        if not self.search_lo < self.search_hi:
            raise ConfigError("search bounds must satisfy lo < hi")


    @classmethod
    def from_file(cls, path):
        known = {f.name: f for f in fields(cls)}
        values = {}
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path} does not exist")

        with open(path) as fp:
            for lineno, line in enumerate(fp, 1):
                line = line.split('#', 1)[0].strip()
                if not line:
                    continue
                key, sep, value = (s.strip() for s in line.partition('='))
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                if key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
                values[key] = _parse_value(cls.__dataclass_fields__[key].default, value, key)

        return cls(**values)


    def override(self, **flags):
        known = {f.name for f in fields(self)}
        values = {f.name: getattr(self, f.name) for f in fields(self)}

        for key, value in flags.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            if value is not None:
                values[key] = value
        return TrainConfig(**values)


    def lr_at(self, epoch):
        return self.lr0 * self.lr_decay ** epoch


    def print_attr(self):
        for attribute, value in self.__dict__.items():
            print(f"* {attribute}: {value}")


    def dump(self, path):
        with open(path, 'w') as fp:
            for attribute, value in self.__dict__.items():
                if isinstance(value, tuple):
                    value = ','.join(str(v) for v in value)
                fp.write(f"{attribute} = {value}\n")



def _parse_value(default, value, key):
    try:
        if isinstance(default, bool):
            if value.lower() not in ('true', 'false', '1', '0'):
                raise ValueError(value)
            return value.lower() in ('true', '1')
        elif isinstance(default, int):
            return int(value)
        elif isinstance(default, float):
            return float(value)
        elif isinstance(default, tuple):
            return tuple(float(v) for v in value.split(','))
        elif default is None and value.lower() == 'none':
            return None
        return value
    except ValueError:
        raise ConfigError(f"invalid value '{value}' for config key '{key}'") from None




@dataclass
class RunningLoss:
    """Exponentially weighted loss; weights vanish to 0.1 over one epoch."""
    beta: float
    estimate: float = float('nan')
    count: int = 0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ConfigError(f"running loss beta must lie in (0, 1), got {self.beta}")

    @classmethod
    def for_epoch(cls, batches_per_epoch):
        return cls(beta=0.1 ** (1.0 / batches_per_epoch))

    def update(self, x):
        if not math.isfinite(x):
            raise NumericalError(f"non-finite loss {x} fed to the running mean")
        if self.count == 0:
            self.estimate = x
        else:
            self.estimate = self.beta * self.estimate + (1 - self.beta) * x
        self.count += 1
        return self



def running_loss_update(meter, x):
    return meter.update(x)




def adam_step(params, grads, state, lr_t, betas=(0.9, 0.999), eps=1e-8, names=None):
    """One bias-corrected Adam update, in place. ``state`` maps param index to its moments."""
    beta1, beta2 = betas

    for i, (p, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != p.shape:
            raise NumericalError(f"gradient shape {tuple(grad.shape)} does not match parameter {tuple(p.shape)}")
        if not torch.isfinite(grad).all():
            name = names[i] if names else f"#{i}"
            raise NumericalError(f"non-finite gradient for parameter {name}")

        st = state.setdefault(i, {})
        if not st:
            st['step'] = 0
            st['exp_avg'] = torch.zeros_like(p)
            st['exp_avg_sq'] = torch.zeros_like(p)

        st['step'] += 1
        exp_avg, exp_avg_sq = st['exp_avg'], st['exp_avg_sq']

        bias_correction1 = 1 - beta1 ** st['step']
        bias_correction2 = 1 - beta2 ** st['step']

        exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
        exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)

        denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
        with torch.no_grad():
            p.addcdiv_(exp_avg, denom, value=-lr_t / bias_correction1)

    return params, state



class Adam(Optimizer):
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        named_params = list(named_params)
        self.names = [name for name, _ in named_params]
        defaults = dict(lr=lr, betas=betas, eps=eps)
        super(Adam, self).__init__([p for _, p in named_params], defaults)


    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            params = group['params']
            state = {i: self.state[p] for i, p in enumerate(params)}
            adam_step(params, [p.grad for p in params], state, group['lr'],
                      group['betas'], group['eps'], self.names)
        return loss




@dataclass
class BrentResult:
    x: float
    fun: float
    nfev: int
    probes: list = field(default_factory=list)



def brent_min(f, lo, hi, max_iters=10, xtol=1e-5):
    """Bounded Brent minimization (golden section plus parabolic interpolation).

    One probe initializes, each iteration adds one more; ``max_iters`` bounds the
    iterations. Non-finite values are treated as +inf. Returns the best probe.
    """
    if not lo < hi:
        raise ConfigError(f"brent_min needs lo < hi, got [{lo}, {hi}]")

    probes = []

    def evaluate(x):
        x = float(x)
        fx = float(f(x))
        probes.append((x, fx))
        return fx if math.isfinite(fx) else math.inf

    with np.errstate(invalid='ignore', over='ignore'):
        optimize.minimize_scalar(evaluate, bounds=(lo, hi), method='bounded',
                                 options={'xatol': xtol, 'maxiter': max_iters + 1})

    if not any(math.isfinite(fp) for _, fp in probes):
        raise NumericalError(f"objective non-finite at every probe: {[round(p, 4) for p, _ in probes]}")

    best_x, best_f = min(((p, fp) for p, fp in probes if math.isfinite(fp)), key=lambda t: t[1])
    return BrentResult(best_x, best_f, len(probes), probes)
