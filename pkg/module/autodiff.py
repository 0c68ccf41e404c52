"""Reverse-mode gradients over the autograd tape.

The tape is torch's autograd graph recorded by ``NetworkSpec.forward``. AP2
statistics are built from the parameters inside that graph, so gradients flow
through mu(W) and sigma(W) unless a norm layer has ``detach_stats`` set.
"""

import torch
from collections import OrderedDict, namedtuple

from model.errors import AutodiffError, StateError
from model.layers import NormContext, estimate_norm_stats


TapeNode = namedtuple('TapeNode', 'name inputs')




def trace(loss):
    """Autograd nodes of ``loss`` in reverse topological order, each exactly once."""
    if loss.grad_fn is None:
        raise StateError("loss has no recorded graph; run forward with gradients enabled first")

    order, seen = [], set()

    def visit(fn):
        if fn is None or fn in seen:
            return
        seen.add(fn)
        for child, _ in fn.next_functions:
            visit(child)
        order.append(fn)

    visit(loss.grad_fn)
    return [TapeNode(type(fn).__name__, [type(c).__name__ for c, _ in fn.next_functions if c is not None])
            for fn in reversed(order)]



def backward(loss, net, retain_graph=False):
    """Gradients of a scalar loss w.r.t. every trainable parameter, keyed by name."""
    if loss.dim() != 0:
        raise AutodiffError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")

    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    if loss.grad_fn is None:
        if loss.requires_grad:
            return OrderedDict((n, torch.zeros_like(p)) for n, p in named)
        raise StateError("backward called before a forward pass recorded a graph")

    grads = torch.autograd.grad(loss, [p for _, p in named], retain_graph=retain_graph, allow_unused=True)

    out = OrderedDict()
    for (name, p), g in zip(named, grads):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise AutodiffError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        out[name] = g
    return out



def apply_grads(net, grads):
    for name, p in net.named_parameters():
        if name in grads:
            p.grad = grads[name]



def grad_norm_layer(upstream, net, layer_index, batch, detach_stats=False, training=True):
    """Gradients of <upstream, norm(batch)> for one norm layer.

    Returns gradients for the layer input, s, b and every upstream parameter that
    feeds mu and sigma (empty when the statistics are detached).
    """
    layer = net.layers[layer_index]
    x = batch.detach().requires_grad_(True)

    saved = layer.detach_stats
    layer.detach_stats = detach_stats
    try:
        context = NormContext(batch=x, training=training, update_running=False)
        mu, sigma = estimate_norm_stats(net, layer_index, layer.mode, context)
        out = layer(x, mu, sigma)
    finally:
        layer.detach_stats = saved

    upstream_params = [(n, p) for n, p in net.named_parameters()
                       if p.requires_grad and not n.startswith(f'layers.{layer_index}.')]
    targets = [x, layer.s, layer.b] + [p for _, p in upstream_params]
    grads = torch.autograd.grad(out, targets, grad_outputs=upstream, allow_unused=True)

    result = OrderedDict(input=grads[0], s=grads[1], b=grads[2])
    for (name, _), g in zip(upstream_params, grads[3:]):
        if g is not None:
            result[name] = g
    return result
