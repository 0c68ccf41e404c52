import math, torch
import torch.nn as nn

from .errors import ConfigError
from .layers import Activation, Conv, Flatten, Linear, NetworkSpec, SpatialMean


CNN_KSIZE = [3, 3, 3, 3, 3, 3, 3, 1, 1]
CNN_STRIDE = [1, 1, 2, 1, 1, 2, 1, 1, 1]
CNN_DEPTH = [96, 96, 96, 192, 192, 192, 192, 192, 10]




def preset_mnist_mlp(input_shape=(1, 28, 28), classes=10, hidden=20, depth=6, input_stats=None):
    n_in = math.prod(input_shape)
    layers = [Flatten()]

    for _ in range(depth):
        layers += [Linear(n_in, hidden), Activation('sigmoid')]
        n_in = hidden

    layers += [Linear(n_in, classes), Activation('log_softmax')]
    return NetworkSpec(layers, input_shape, input_stats)



def preset_cifar_cnn(input_shape=(3, 32, 32), classes=10, slope=0.03, input_stats=None):
    depth = CNN_DEPTH[:-1] + [classes]
    c_in, layers = input_shape[0], []

    for idx, (k, stride, c_out) in enumerate(zip(CNN_KSIZE, CNN_STRIDE, depth)):
        layers.append(Conv(c_in, c_out, k, k, stride=stride, pad=k // 2))
        if idx < len(depth) - 1:
            layers.append(Activation('leaky_relu', slope))
        c_in = c_out

    layers += [SpatialMean(), Activation('log_softmax')]
    return NetworkSpec(layers, input_shape, input_stats)



def init_weights(net, orthonormal=False, generator=None):
    """Zero-mean normal weights with std 1/sqrt(fan_in), or orthonormal rows; zero biases."""
    with torch.no_grad():
        for layer in net.layers:
            if not layer.parameterized:
                continue

            if orthonormal:
                nn.init.orthogonal_(layer.weight, generator=generator)
            else:
                layer.weight.normal_(0, 1 / math.sqrt(layer.fan_in), generator=generator)
            layer.bias.zero_()
    return net



def build_preset(name, input_shape=None, classes=10, input_stats=None):
    if name == 'mnist_mlp':
        return preset_mnist_mlp(input_shape or (1, 28, 28), classes, input_stats=input_stats)
    elif name == 'cifar_cnn':
        return preset_cifar_cnn(input_shape or (3, 32, 32), classes, input_stats=input_stats)
    raise ConfigError(f"unknown preset '{name}'")
