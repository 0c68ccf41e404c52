import os, sys, logging, argparse, torch
import structlog

from transformers import set_seed

from model import (
    analytic_stats,
    build_preset,
    init_weights,
    introduce_normalization,
    strip_normalization
)
from model.errors import (
    AP2Error, ConfigError, DataError, NumericalError, ShapeError, VerificationError
)
from model.moments import MomentPair, propagate_activation
from module import (
    Dataset,
    Tester,
    Trainer,
    TrainConfig,
    load_cifar10_dir,
    load_mnist_dir,
    load_model,
    lr_search,
    print_model_desc,
    read_f32,
    run_suite,
    save_model,
    subset,
    synthetic_blobs,
    write_csv
)
from module.verify import SUITES


log = structlog.get_logger()

EXIT_CODES = [
    (ConfigError, 2),
    (ShapeError, 2),
    (DataError, 3),
    (NumericalError, 4),
    (VerificationError, 5)
]
BLOBS = dict(n_train=5000, n_valid=1000, classes=10, dim=20)
PLOT_NONLINEARITIES = {'relu': 'relu', 'lrelu': 'leaky_relu', 'sigmoid': 'sigmoid'}




class Config(object):
    """Settings shared by every command; training commands carry a TrainConfig on top."""
    def __init__(self, args):

        self.command = args.command
        self.seed = getattr(args, 'seed', None) or 0
        self.out = getattr(args, 'out', None)

        if self.command == 'train':
            base = TrainConfig.from_file(args.config) if args.config else TrainConfig()
            self.train = base.override(
                preset=args.preset, norm=args.norm, init=args.init, dataset=args.dataset,
                data_dir=args.data_dir, subset=args.subset, batch_size=args.batch_size,
                lr0=args.lr, epochs=args.epochs, seed=args.seed, noise_var=args.noise,
                offset_range=args.offset_range, hflip=args.hflip, lr_search=args.lr_search,
                orthonormal=args.orthonormal, detach_stats=args.detach_stats
            )
            self.seed = self.train.seed


    def print_attr(self):
        for attribute, value in self.__dict__.items():
            if attribute != 'train':
                print(f"* {attribute}: {value}")
        if hasattr(self, 'train'):
            self.train.print_attr()




def load_datasets(name, data_dir=None, seed=0, n_subset=0, noise_var=0.0):
    """(train, valid) datasets; valid is the standard test split."""
    if name == 'blobs':
        train = synthetic_blobs(BLOBS['n_train'], BLOBS['classes'], BLOBS['dim'], seed)
        valid = synthetic_blobs(BLOBS['n_valid'], BLOBS['classes'], BLOBS['dim'], seed + 1)
    elif name in ('mnist', 'cifar10'):
        if not data_dir or not os.path.isdir(data_dir):
            raise DataError(f"dataset '{name}' needs an existing --data-dir, got {data_dir!r}")
        loader = load_mnist_dir if name == 'mnist' else load_cifar10_dir
        train, valid = loader(data_dir, 'train'), loader(data_dir, 'test')
    else:
        raise ConfigError(f"unknown dataset '{name}'")

    if n_subset:
        train = subset(train, n_subset)
    if noise_var:
        # analytic input stats must include the augmentation noise
        train = Dataset(train.images, train.labels, train.classes, noise_var)

    log.info("dataset loaded", dataset=name, train=len(train), valid=len(valid), shape=train.shape)
    return train, valid




def build_network(config, train_data):
    """Random network normalized according to the init protocol (init=None / BN / AP2)."""
    net = build_preset(config.preset, train_data.shape, train_data.classes, train_data.stats)
    init_weights(net, config.orthonormal, torch.Generator().manual_seed(config.seed))

    batch = train_data.images[:config.batch_size]
    norm_kw = dict(eps=config.bn_eps, momentum=config.bn_momentum)

    if config.init == 'none':
        if config.norm == 'none':
            return net
        return introduce_normalization(net, config.norm, 'equivalence', batch=batch, **norm_kw)

    init = 'bn-style' if config.init == 'bn' else 'projecting'
    seeded = introduce_normalization(net, config.init, init, generator=torch.Generator().manual_seed(config.seed),
                                     **norm_kw)
    if config.norm == config.init:
        return seeded

    plain = strip_normalization(seeded, batch=batch)
    if config.norm == 'none':
        return plain
    return introduce_normalization(plain, config.norm, 'equivalence', batch=batch, **norm_kw)




def cmd_train(config):
    cfg = config.train
    train_data, valid_data = load_datasets(cfg.dataset, cfg.data_dir, cfg.seed, cfg.subset, cfg.noise_var)

    net = build_network(cfg, train_data)
    print_model_desc(net)

    if cfg.lr_search:
        cfg = cfg.override(lr0=lr_search(net, train_data, cfg))
        set_seed(cfg.seed)

    out = config.out or 'runs/latest'
    os.makedirs(out, exist_ok=True)
    cfg.dump(os.path.join(out, 'config.txt'))

    trainer = Trainer(cfg, net, train_data, valid_data, record_dir=out)
    trainer.train()

    save_model(net, os.path.join(out, 'model'))
    Tester(net, valid_data).test()



def _input_stats(args, net):
    if args.standard_input_stats:
        channels = net.input_shape[0]
        return MomentPair(torch.zeros(channels), torch.ones(channels))
    if args.dataset:
        train, _ = load_datasets(args.dataset, args.data_dir, args.seed or 0)
        return train.stats
    return net.input_stats



def cmd_stats(args):
    net = load_model(args.model)
    net.set_input_stats(_input_stats(args, net))

    with torch.no_grad():
        stats = analytic_stats(net)

    rows = []
    for k, pair in enumerate(stats):
        kind = 'input' if k == 0 else net.layers[k - 1].kind
        for channel, (mean, var) in enumerate(zip(pair.mean.reshape(-1).tolist(), pair.variance.reshape(-1).tolist())):
            rows.append({'layer': k - 1, 'kind': kind, 'channel': channel, 'mean': mean, 'variance': var})

    columns = ['layer', 'kind', 'channel', 'mean', 'variance']
    if args.csv:
        write_csv(args.csv, columns, rows)
    else:
        print(','.join(columns))
        for row in rows:
            print(f"{row['layer']},{row['kind']},{row['channel']},{row['mean']:.6g},{row['variance']:.6g}")



def _probe_batch(args, net):
    if args.batch:
        data = read_f32(args.batch)
        per_example = int(torch.tensor(net.input_shape).prod())
        if data.numel() % per_example:
            raise DataError(f"{args.batch}: {data.numel()} values is not a whole number of "
                            f"{net.input_shape} examples", data.numel() * 4)
        return data.view(-1, *net.input_shape)

    gen = torch.Generator().manual_seed(args.seed or 0)
    shape = (64,) + net.input_shape
    mean = net.input_mean.view(1, -1, *([1] * (len(shape) - 2)))
    std = net.input_var.sqrt().view_as(mean)
    return mean + std * torch.randn(shape, generator=gen)



def cmd_convert(args):
    net = load_model(args.model)
    batch = _probe_batch(args, net)

    if args.to == 'normalized':
        if args.mode == 'bn' and args.init == 'equivalence' and not args.batch:
            raise ConfigError("batch-norm conversion needs --batch")
        out = introduce_normalization(net, args.mode, args.init, batch=batch,
                                      generator=torch.Generator().manual_seed(args.seed or 0))
    else:
        if any(layer.mode == 'bn' for _, layer in net.norm_layers()) and not args.batch:
            raise ConfigError("folding batch norm needs --batch")
        out = strip_normalization(net, batch=batch)

    with torch.no_grad():
        before = net(batch, training=any(l.mode == 'bn' for _, l in net.norm_layers()), update_running=False)
        after = out(batch, training=any(l.mode == 'bn' for _, l in out.norm_layers()), update_running=False)
    print(f"max output deviation on probe batch: {(after - before).abs().max().item():.3e}")

    if args.init == 'projecting' and args.to == 'normalized':
        with torch.no_grad():
            pre, post = analytic_stats(net), analytic_stats(out)
        for idx, _ in out.norm_layers():
            src = idx - sum(1 for j, _ in out.norm_layers() if j < idx)
            print(f"  layer {idx}: before mean={pre[src].mean.mean().item():.4g} "
                  f"var={pre[src].variance.mean().item():.4g} | after mean={post[idx + 1].mean.mean().item():.4g} "
                  f"var={post[idx + 1].variance.mean().item():.4g}")

    save_model(out, args.out)



def parse_range(text):
    lo, sep, hi = text.partition('..')
    try:
        lo, hi = float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"--range expects LO..HI, got '{text}'") from None
    if not sep or not lo < hi:
        raise ConfigError(f"--range expects LO..HI with LO < HI, got '{text}'")
    return lo, hi



def moments_curve(nonlinearity, sigma, lo, hi, points=241, slope=0.03):
    name = PLOT_NONLINEARITIES.get(nonlinearity)
    if name is None:
        raise ConfigError(f"unknown nonlinearity '{nonlinearity}'")
    if sigma <= 0:
        raise ConfigError(f"--sigma must be positive, got {sigma}")

    mu = torch.linspace(lo, hi, points, dtype=torch.float64)
    out = propagate_activation(name, MomentPair(mu, torch.full_like(mu, sigma ** 2)), slope=slope)
    return [{'mu': m, 'mu_prime': mp, 'sigma_prime': sp}
            for m, mp, sp in zip(mu.tolist(), out.mean.tolist(), out.std.tolist())]



def cmd_moments_plot(args):
    lo, hi = parse_range(args.range)
    rows = moments_curve(args.nonlinearity, args.sigma, lo, hi, args.points, args.slope)
    columns = ['mu', 'mu_prime', 'sigma_prime']

    if args.out:
        write_csv(args.out, columns, rows)
    else:
        print(','.join(columns))
        for row in rows:
            print(','.join(repr(row[c]) for c in columns))



def cmd_verify(args):
    suites = list(SUITES) if args.suite == 'all' else [args.suite]
    failed = []
    for name in suites:
        report = run_suite(name, args.seed or 0)
        report.print()
        failed += [f"{name}:{c.name}" for c in report.failures]

    if failed:
        raise VerificationError(f"{len(failed)} verification checks failed: {', '.join(failed)}")




def build_parser():
    parser = argparse.ArgumentParser(prog='ap2', description="Analytic moment propagation normalization")
    parser.add_argument('-v', '--verbose', action='store_true', help="log info events to stderr")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help="train a preset network")
    p.add_argument('--config', default=None)
    p.add_argument('--preset', choices=['mnist_mlp', 'cifar_cnn'])
    p.add_argument('--norm', choices=['none', 'bn', 'wn', 'ap2'])
    p.add_argument('--init', choices=['none', 'bn', 'ap2'])
    p.add_argument('--dataset', choices=['mnist', 'cifar10', 'blobs'])
    p.add_argument('--data-dir', dest='data_dir')
    p.add_argument('--subset', type=int)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--noise', type=float)
    p.add_argument('--offset-range', dest='offset_range', type=int)
    p.add_argument('--hflip', action='store_true', default=None)
    p.add_argument('--epochs', type=int)
    lr = p.add_mutually_exclusive_group()
    lr.add_argument('--lr', type=float)
    lr.add_argument('--lr-search', dest='lr_search', action='store_true', default=None)
    p.add_argument('--orthonormal', action='store_true', default=None)
    p.add_argument('--detach-stats', dest='detach_stats', action='store_true', default=None)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('stats', help="print analytic per-layer statistics of a model")
    p.add_argument('model')
    source = p.add_mutually_exclusive_group()
    source.add_argument('--dataset', choices=['mnist', 'cifar10', 'blobs'])
    source.add_argument('--standard-input-stats', dest='standard_input_stats', action='store_true')
    p.add_argument('--data-dir', dest='data_dir')
    p.add_argument('--csv')
    p.add_argument('--seed', type=int)

    p = sub.add_parser('convert', help="introduce or strip normalization")
    p.add_argument('model')
    p.add_argument('--to', choices=['normalized', 'unnormalized'], required=True)
    p.add_argument('--mode', choices=['ap2', 'bn', 'wn', 'none'], default='ap2')
    p.add_argument('--init', choices=['equivalence', 'projecting', 'bn-style'], default='equivalence')
    p.add_argument('--batch')
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)

    p = sub.add_parser('moments-plot', help="mean/std transfer curves of a nonlinearity")
    p.add_argument('--nonlinearity', choices=list(PLOT_NONLINEARITIES), default='relu')
    p.add_argument('--sigma', type=float, default=1.0)
    p.add_argument('--range', default='-6..6')
    p.add_argument('--points', type=int, default=241)
    p.add_argument('--slope', type=float, default=0.03)
    p.add_argument('--out')

    p = sub.add_parser('verify', help="run the verification suites")
    p.add_argument('--suite', choices=list(SUITES) + ['all'], default='all')
    p.add_argument('--seed', type=int)

    return parser



def configure_logging(verbose):
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(logging.INFO if verbose else logging.WARNING),
        logger_factory=structlog.PrintLoggerFactory(sys.stderr)
    )



def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = Config(args)
        set_seed(config.seed)

        if args.command == 'train':
            config.print_attr()
            cmd_train(config)
        elif args.command == 'stats':
            cmd_stats(args)
        elif args.command == 'convert':
            cmd_convert(args)
        elif args.command == 'moments-plot':
            cmd_moments_plot(args)
        elif args.command == 'verify':
            cmd_verify(args)

    except AP2Error as e:
        code = next((c for cls, c in EXIT_CODES if isinstance(e, cls)), 1)
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0




if __name__ == '__main__':
    sys.exit(main())
