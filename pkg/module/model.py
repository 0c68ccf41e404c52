import os, torch
import numpy as np
import structlog

from model.errors import DataError
from model.layers import Activation, Conv, Dropout, Flatten, Linear, NetworkSpec, Norm, SpatialMean
from model.moments import MomentPair


log = structlog.get_logger()

MANIFEST = 'manifest.txt'
PARAM_ROLES = {
    'linear': ('weight', 'bias'),
    'conv': ('weight', 'bias'),
    'norm': ('s', 'b', 'running_mu', 'running_var')
}




def print_model_desc(net):
    def count_params(net):
        return sum(p.numel() for p in net.parameters() if p.requires_grad)

    def check_size(net):
        param_size = sum(p.nelement() * p.element_size() for p in net.parameters())
        buffer_size = sum(b.nelement() * b.element_size() for b in net.buffers())
        return (param_size + buffer_size) / 1024**2

    print(f"--- Model Params: {count_params(net):,}")
    print(f"--- Model  Size : {check_size(net):.3f} MB\n")




def write_f32(path, tensor):
    tensor.detach().cpu().numpy().astype('<f4').tofile(path)


def read_f32(path, shape=None):
    if not os.path.exists(path):
        raise DataError(f"missing parameter file {path}")
    data = np.fromfile(path, dtype='<f4')

    if shape is not None:
        if data.size != int(np.prod(shape)):
            raise DataError(f"{path}: {data.size} values, expected shape {tuple(shape)}", data.size * 4)
        data = data.reshape(shape)
    return torch.from_numpy(data.astype(np.float32))



def _layer_line(idx, layer):
    args = ','.join(str(a) if not isinstance(a, float) else repr(a) for a in layer.args()) or '-'
    mode = layer.mode if layer.kind == 'norm' else '-'
    return f"{idx} {layer.kind} {args} {mode}"



def _parse_ints(values, lineno, what):
    try:
        return tuple(int(v) for v in values)
    except ValueError:
        raise DataError(f"{MANIFEST} line {lineno}: {what} must be integers, got {' '.join(values)}") from None



def _build_layer(kind, args, mode, lineno):
    try:
        if kind == 'linear':
            return Linear(int(args[0]), int(args[1]))
        elif kind == 'conv':
            return Conv(*(int(a) for a in args))
        elif kind == 'activation':
            name, _, slope = args[0].partition(':')
            return Activation(name, float(slope or 0.0))
        elif kind == 'dropout':
            return Dropout(float(args[0]), float(args[1]))
        elif kind == 'flatten':
            return Flatten()
        elif kind == 'spatial_mean':
            return SpatialMean()
        elif kind == 'norm':
            layer = Norm(int(args[0]), mode, float(args[1]), float(args[2]))
            layer.num_batches_tracked.fill_(int(args[3]))
            return layer
    except (IndexError, ValueError) as e:
        raise DataError(f"{MANIFEST} line {lineno}: malformed {kind} arguments ({e})") from None
    raise DataError(f"{MANIFEST} line {lineno}: unknown layer kind '{kind}'")




def save_model(net, model_dir):
    os.makedirs(model_dir, exist_ok=True)

    lines = ['# input ' + ' '.join(str(d) for d in net.input_shape)]
    lines += [_layer_line(idx, layer) for idx, layer in enumerate(net.layers)]
    with open(os.path.join(model_dir, MANIFEST), 'w') as f:
        f.write('\n'.join(lines) + '\n')

    write_f32(os.path.join(model_dir, 'input_mean.f32'), net.input_mean)
    write_f32(os.path.join(model_dir, 'input_var.f32'), net.input_var)

    for idx, layer in enumerate(net.layers):
        for role in PARAM_ROLES.get(layer.kind, ()):
            write_f32(os.path.join(model_dir, f'p{idx}_{role}.f32'), getattr(layer, role))

    log.info("model saved", path=model_dir, layers=len(net.layers))



def load_model(model_dir):
    path = os.path.join(model_dir, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} in {model_dir}")

    input_shape, layers = None, []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if fields[0] == '#':
                if fields[1:2] == ['input']:
                    input_shape = _parse_ints(fields[2:], lineno, 'input dimensions')
                continue
            if len(fields) != 4 or _parse_ints(fields[:1], lineno, 'layer index')[0] != len(layers):
                raise DataError(f"{MANIFEST} line {lineno}: expected 'index kind args mode'")

            _, kind, args, mode = fields
            layers.append(_build_layer(kind, args.split(',') if args != '-' else [], mode, lineno))

    if input_shape is None:
        raise DataError(f"{MANIFEST} has no '# input' header")

    stats = MomentPair(read_f32(os.path.join(model_dir, 'input_mean.f32'), (input_shape[0],)),
                       read_f32(os.path.join(model_dir, 'input_var.f32'), (input_shape[0],)))

    with torch.no_grad():
        for idx, layer in enumerate(layers):
            for role in PARAM_ROLES.get(layer.kind, ()):
                target = getattr(layer, role)
                target.copy_(read_f32(os.path.join(model_dir, f'p{idx}_{role}.f32'), target.shape))

    net = NetworkSpec(layers, input_shape, stats)
    log.info("model loaded", path=model_dir, layers=len(layers))
    return net
