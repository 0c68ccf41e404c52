from .layers import NetworkSpec, Norm, analytic_stats, introduce_normalization, strip_normalization
from .moments import MomentPair
from .presets import build_preset, init_weights, preset_cifar_cnn, preset_mnist_mlp
