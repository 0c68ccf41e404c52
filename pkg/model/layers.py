import copy, math, torch
import torch.nn as nn
import torch.nn.functional as F
import structlog
from dataclasses import dataclass
from typing import Optional

from .errors import (
    ConfigError, NumericalError, ShapeError, StateError, UnsupportedLayerError
)
from .moments import (
    MomentPair, affine_moments, dropout_moments, linear_moments, propagate_activation
)
from .tensor import conv2d, conv_output_size, matmul, reduce_spatial_sum


log = structlog.get_logger()

NORM_MODES = ('ap2', 'bn', 'wn', 'none')
NORM_INITS = ('equivalence', 'projecting', 'bn-style')
ACTIVATIONS = ('relu', 'leaky_relu', 'sigmoid', 'log_softmax')



class Layer(nn.Module):
    kind = None
    parameterized = False

    def out_shape(self, in_shape):
        return in_shape

    def propagate(self, stats, in_shape):
        raise UnsupportedLayerError(f"analytic pass does not support '{self.kind}' layers")

    def args(self):
        return []



class Linear(Layer):
    kind = 'linear'
    parameterized = True

    def __init__(self, n_in, n_out):
        super(Linear, self).__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = nn.Parameter(torch.randn(n_out, n_in) / math.sqrt(n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))

    @property
    def fan_in(self):
        return self.n_in

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"linear layer expects ({self.n_in},) inputs, got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        return matmul(x, self.weight.t()) + self.bias

    def weight_rows(self):
        return self.weight

    def propagate(self, stats, in_shape):
        return linear_moments(stats, self.weight, self.bias)

    def args(self):
        return [self.n_in, self.n_out]



class Conv(Layer):
    kind = 'conv'
    parameterized = True

    def __init__(self, c_in, c_out, kh, kw, stride=1, pad=0):
        super(Conv, self).__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kh, self.kw = kh, kw
        self.stride, self.pad = stride, pad

        self.weight = nn.Parameter(torch.randn(c_out, c_in, kh, kw) / math.sqrt(self.fan_in))
        self.bias = nn.Parameter(torch.zeros(c_out))

    @property
    def fan_in(self):
        return self.c_in * self.kh * self.kw

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"conv layer expects ({self.c_in}, H, W) inputs, got {tuple(in_shape)}")
        _, h, w = in_shape
        out_h = conv_output_size(h, self.kh, self.stride, self.pad)
        out_w = conv_output_size(w, self.kw, self.stride, self.pad)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv layer produces an empty output from {tuple(in_shape)}")
        return (self.c_out, out_h, out_w)

    def forward(self, x):
        return conv2d(x, self.weight, self.stride, self.pad) + self.bias.view(1, -1, 1, 1)

    def weight_rows(self):
        return self.weight.reshape(self.c_out, -1)

    def propagate(self, stats, in_shape):
        # statistics are constant over space: collapse the filter over its taps
        mean = matmul(reduce_spatial_sum(self.weight), stats.mean.reshape(-1, 1)).reshape(-1)
        variance = matmul(reduce_spatial_sum(self.weight, power=2), stats.variance.reshape(-1, 1))
        return MomentPair(mean + self.bias, variance.reshape(-1))

    def args(self):
        return [self.c_in, self.c_out, self.kh, self.kw, self.stride, self.pad]



class Activation(Layer):
    kind = 'activation'

    def __init__(self, name, slope=0.0):
        super(Activation, self).__init__()
        if name not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{name}'")
        self.name = name
        self.slope = float(slope)

    def forward(self, x):
        if self.name == 'relu':
            return F.relu(x)
        elif self.name == 'leaky_relu':
            return F.leaky_relu(x, self.slope)
        elif self.name == 'sigmoid':
            return torch.sigmoid(x)
        return F.log_softmax(x, dim=1)

    def propagate(self, stats, in_shape):
        if self.name == 'log_softmax':
            raise UnsupportedLayerError("log_softmax mixes units and has no moment rule")
        return propagate_activation(self.name, stats, slope=self.slope)

    def args(self):
        return [f"{self.name}:{self.slope!r}"] if self.name == 'leaky_relu' else [self.name]



class Dropout(Layer):
    kind = 'dropout'

    def __init__(self, keep_prob, post_scale=1.0):
        super(Dropout, self).__init__()
        if not 0 < keep_prob <= 1:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        self.keep_prob = float(keep_prob)
        self.post_scale = float(post_scale)

    def forward(self, x, training=False):
        if training:
            mask = torch.bernoulli(torch.full_like(x, self.keep_prob))
            return x * mask * self.post_scale
        return x * (self.keep_prob * self.post_scale)

    def propagate(self, stats, in_shape):
        return dropout_moments(stats, self.keep_prob, self.post_scale)

    def args(self):
        return [self.keep_prob, self.post_scale]



class Flatten(Layer):
    kind = 'flatten'

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.flatten(1)

    def propagate(self, stats, in_shape):
        if len(in_shape) == 1:
            return stats
        spatial = math.prod(in_shape[1:])
        return MomentPair(stats.mean.repeat_interleave(spatial), stats.variance.repeat_interleave(spatial))



class SpatialMean(Layer):
    kind = 'spatial_mean'

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"spatial mean expects (C, H, W) inputs, got {tuple(in_shape)}")
        return (in_shape[0],)

    def forward(self, x):
        return x.mean(dim=(2, 3))

    def propagate(self, stats, in_shape):
        return stats



@dataclass
class NormState:
    mode: str
    s: torch.Tensor
    b: torch.Tensor
    mu: Optional[torch.Tensor]
    sigma: Optional[torch.Tensor]
    bn_running_mu: torch.Tensor
    bn_running_var: torch.Tensor
    eps: float
    momentum: float



class Norm(Layer):
    """X' = (X - mu) / sigma * s + b with mode-specific (mu, sigma)."""
    kind = 'norm'

    def __init__(self, channels, mode='ap2', eps=1e-5, momentum=0.1):
        super(Norm, self).__init__()
        if mode not in NORM_MODES:
            raise ConfigError(f"unsupported normalization mode '{mode}'")

        self.channels = channels
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.detach_stats = False

        self.s = nn.Parameter(torch.ones(channels))
        self.b = nn.Parameter(torch.zeros(channels))
        self.register_buffer('running_mu', torch.zeros(channels))
        self.register_buffer('running_var', torch.ones(channels))
        self.register_buffer('num_batches_tracked', torch.zeros((), dtype=torch.long))

        self.mu, self.sigma = None, None
        self.frozen = None

    @property
    def state(self):
        return NormState(self.mode, self.s, self.b, self.mu, self.sigma,
                         self.running_mu, self.running_var, self.eps, self.momentum)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"norm layer over {self.channels} channels got {tuple(in_shape)}")
        return in_shape

    @staticmethod
    def per_channel(v, x):
        return v.view(1, -1, *([1] * (x.dim() - 2)))

    def forward(self, x, mu, sigma):
        self.mu, self.sigma = mu.detach(), sigma.detach()
        mu, sigma = self.per_channel(mu, x), self.per_channel(sigma, x)
        return (x - mu) / sigma * self.per_channel(self.s, x) + self.per_channel(self.b, x)

    def propagate(self, stats, in_shape):
        if self.mode == 'none':
            return affine_moments(stats, self.s, self.b)
        # the normalized quantity has zero mean and unit variance
        return MomentPair(self.b, self.s * self.s)

    def args(self):
        return [self.channels, self.eps, self.momentum, int(self.num_batches_tracked)]



@dataclass
class NormContext:
    batch: Optional[torch.Tensor] = None
    stats: Optional[list] = None
    training: bool = False
    update_running: bool = True



def estimate_norm_stats(net, layer_index, mode, context):
    """(mu, sigma) used by the norm layer at ``layer_index``."""
    layer = net.layers[layer_index]

    if mode == 'bn':
        mu, sigma = _batch_norm_stats(layer, context)
    elif mode == 'wn':
        prev = _preceding(net, layer_index)
        mu = prev.bias
        sigma = prev.weight_rows().pow(2).sum(dim=1).sqrt()
    elif mode == 'ap2':
        if context.stats is None:
            context.stats = analytic_stats(net)
        pre = context.stats[layer_index]
        mu, sigma = pre.mean, (pre.variance + layer.eps).sqrt()
    elif mode == 'none':
        mu, sigma = torch.zeros_like(layer.s), torch.ones_like(layer.s)
    else:
        raise ConfigError(f"unsupported normalization mode '{mode}'")

    if layer.detach_stats:
        mu, sigma = mu.detach(), sigma.detach()
    return mu, sigma



def _batch_norm_stats(layer, context):
    if not context.training:
        if int(layer.num_batches_tracked) == 0:
            raise StateError("batch norm evaluated before any running statistics update")
        return layer.running_mu, (layer.running_var + layer.eps).sqrt()

    x = context.batch
    dims = [0] + list(range(2, x.dim()))
    mu = x.mean(dim=dims)
    var = x.var(dim=dims, unbiased=False)

    if context.update_running:
        n = x.numel() // x.size(1)
        with torch.no_grad():
            unbiased = var * n / max(n - 1, 1)
            layer.running_mu.mul_(1 - layer.momentum).add_(layer.momentum * mu)
            layer.running_var.mul_(1 - layer.momentum).add_(layer.momentum * unbiased)
            layer.num_batches_tracked += 1

    return mu, (var + layer.eps).sqrt()



def _preceding(net, layer_index):
    prev = net.layers[layer_index - 1] if layer_index > 0 else None
    if prev is None or not prev.parameterized:
        raise UnsupportedLayerError(f"norm layer {layer_index} is not preceded by a linear/conv layer")
    return prev




class NetworkSpec(nn.Module):
    def __init__(self, layers, input_shape, input_stats=None):
        super(NetworkSpec, self).__init__()

        self.layers = nn.ModuleList(layers)
        self.input_shape = tuple(input_shape)

        if input_stats is None:
            channels = self.input_shape[0]
            input_stats = MomentPair(torch.zeros(channels), torch.ones(channels))
        self.register_buffer('input_mean', input_stats.mean.clone().float())
        self.register_buffer('input_var', input_stats.variance.clone().float())

        self.validate()


    @property
    def input_stats(self):
        return MomentPair(self.input_mean, self.input_var)

    def set_input_stats(self, stats):
        if len(stats) != self.input_shape[0]:
            raise ShapeError(f"input stats of {len(stats)} channels for input {self.input_shape}")
        with torch.no_grad():
            self.input_mean.copy_(stats.mean)
            self.input_var.copy_(stats.variance)


    def validate(self):
        if len(self.input_mean) != self.input_shape[0]:
            raise ShapeError(f"input stats of {len(self.input_mean)} channels for input {self.input_shape}")

        shape, norm_seen = self.input_shape, False
        for idx, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {idx} ({layer.kind}): {e}") from None

            if layer.parameterized:
                norm_seen = False
            elif layer.kind == 'norm':
                if norm_seen:
                    raise ShapeError(f"layer {idx}: two norm layers without a linear/conv layer between")
                norm_seen = True
            elif layer.kind == 'activation' and layer.name == 'log_softmax' and idx != len(self.layers) - 1:
                raise ShapeError(f"layer {idx}: log_softmax is only allowed as the final layer")
        return shape


    def shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes


    def norm_layers(self):
        return [(idx, layer) for idx, layer in enumerate(self.layers) if layer.kind == 'norm']


    def set_detach_stats(self, flag):
        for _, layer in self.norm_layers():
            layer.detach_stats = flag


    def freeze_norm_stats(self, flag=True):
        """Reuse the (mu, sigma) of the last forward as constants until unfrozen."""
        for _, layer in self.norm_layers():
            layer.frozen = (layer.mu, layer.sigma) if flag else None


    def forward(self, batch, training=False, upto=None, update_running=True):
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch of shape {tuple(batch.shape)} does not match input {self.input_shape}")

        x = batch
        context = NormContext(training=training, update_running=update_running)
        if any(layer.mode == 'ap2' for _, layer in self.norm_layers()):
            context.stats = analytic_stats(self)

        for idx, layer in enumerate(self.layers):
            if upto is not None and idx == upto:
                return x

            if layer.kind == 'norm' and layer.frozen is not None:
                x = layer(x, *layer.frozen)
            elif layer.kind == 'norm':
                context.batch = x
                mu, sigma = estimate_norm_stats(self, idx, layer.mode, context)
                x = layer(x, mu, sigma)
            elif layer.kind == 'dropout':
                x = layer(x, training)
            else:
                x = layer(x)

            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activations after layer {idx} ({layer.kind})")
        return x




def analytic_stats(net):
    """Moments entering every layer, starting from the dataset statistics.

    Entry k holds the stats entering layer k. When the final layer has a moment
    rule an extra entry holds the output stats; a final log_softmax has none.
    """
    shapes = net.shapes()
    stats = [net.input_stats]

    for idx, layer in enumerate(net.layers):
        is_head = idx == len(net.layers) - 1 and layer.kind == 'activation' and layer.name == 'log_softmax'
        if is_head:
            break
        try:
            stats.append(layer.propagate(stats[-1], shapes[idx]))
        except UnsupportedLayerError as e:
            raise UnsupportedLayerError(f"layer {idx}: {e}") from None
    return stats




def _norm_stats_for_conversion(net, batch):
    """(mu, sigma) of every norm layer, computed on the unmodified network."""
    if any(layer.mode == 'bn' for _, layer in net.norm_layers()):
        if batch is None:
            raise ConfigError("converting a batch-normalized network requires a conversion batch")
        net(batch, training=True, update_running=False)
        return {idx: (layer.mu, layer.sigma) for idx, layer in net.norm_layers()}

    context = NormContext(stats=analytic_stats(net))
    return {idx: estimate_norm_stats(net, idx, layer.mode, context) for idx, layer in net.norm_layers()}



def introduce_normalization(net, mode, init='projecting', batch=None, generator=None,
                            eps=1e-5, momentum=0.1):
    """Insert a norm layer after every linear/conv layer of an unnormalized network."""
    if mode not in NORM_MODES:
        raise ConfigError(f"unsupported normalization mode '{mode}'")
    if init not in NORM_INITS:
        raise ConfigError(f"unsupported normalization init '{init}'")
    if net.norm_layers():
        raise UnsupportedLayerError("network already contains norm layers")
    if mode == 'bn' and init == 'equivalence' and batch is None:
        raise ConfigError("equivalence-preserving batch norm requires a statistics batch")

    layers = []
    for layer in copy.deepcopy(net.layers):
        layers.append(layer)
        if layer.parameterized:
            channels = layer.n_out if layer.kind == 'linear' else layer.c_out
            layers.append(Norm(channels, mode, eps, momentum))

    out = NetworkSpec(layers, net.input_shape, net.input_stats)
    out.to(net.input_mean.dtype)

    with torch.no_grad():
        for idx, layer in out.norm_layers():
            if init == 'bn-style':
                layer.s.copy_(torch.rand(layer.channels, generator=generator))
            elif init == 'equivalence':
                # upstream norms are already identities, so later stats see the original network
                context = NormContext(training=True, update_running=False)
                if mode == 'bn':
                    context.batch = out(batch, training=True, upto=idx, update_running=False)
                mu, sigma = estimate_norm_stats(out, idx, mode, context)
                layer.s.copy_(sigma)
                layer.b.copy_(mu)
                if mode == 'bn':
                    layer.running_mu.copy_(mu)
                    layer.running_var.copy_(sigma ** 2 - layer.eps)
                    layer.num_batches_tracked.fill_(1)

    log.info("normalization introduced", mode=mode, init=init, norm_layers=len(out.norm_layers()))
    return out



def strip_normalization(net, batch=None):
    """Fold every norm layer into the preceding linear/conv layer."""
    for idx, _ in net.norm_layers():
        _preceding(net, idx)

    with torch.no_grad():
        stats = _norm_stats_for_conversion(net, batch)

        layers = []
        for idx, layer in enumerate(net.layers):
            if layer.kind != 'norm':
                layers.append(copy.deepcopy(layer))
                continue

            mu, sigma = stats[idx]
            gain = layer.s / sigma
            prev = layers[-1]
            prev.weight.mul_(gain.view(-1, *([1] * (prev.weight.dim() - 1))))
            prev.bias.copy_((prev.bias - mu) * gain + layer.b)

    out = NetworkSpec(layers, net.input_shape, net.input_stats)
    out.to(net.input_mean.dtype)
    log.info("normalization stripped", norm_layers=len(stats))
    return out
