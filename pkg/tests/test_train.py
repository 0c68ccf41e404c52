import copy, csv, math
import pytest
import torch

from model.errors import NumericalError
from model.layers import introduce_normalization
from module import search as search_module
from module.optim import TrainConfig
from module.search import Search, lr_search
from module.test import Tester
from module.train import TRAIN_COLUMNS, VALID_COLUMNS, Trainer


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture
def config():
    return TrainConfig(batch_size=128, lr0=1e-2, epochs=2, seed=3)


class TestTrainer:

    def test_records(self, small_mlp, blobs, config, tmp_path):
        net = introduce_normalization(small_mlp, 'ap2', init='projecting')
        Trainer(config, net, blobs, valid_data=blobs, record_dir=tmp_path, verbose=False).train()

        train = read_rows(tmp_path / 'train.csv')
        assert list(train[0].keys()) == TRAIN_COLUMNS
        assert len(train) == 2 * 4
        assert [int(r['batch']) for r in train[:4]] == [1, 2, 3, 4]
        assert float(train[4]['lr']) == pytest.approx(1e-2 * 0.96)

        valid = read_rows(tmp_path / 'valid.csv')
        assert list(valid[0].keys()) == VALID_COLUMNS
        assert len(valid) == 2

    def test_bn_eval_column(self, small_mlp, blobs, config, tmp_path):
        net = introduce_normalization(small_mlp, 'bn', init='bn-style', generator=torch.Generator().manual_seed(0))
        Trainer(config, net, blobs, record_dir=tmp_path, verbose=False).train()

        train = read_rows(tmp_path / 'train.csv')
        assert 'bn_eval_loss' in train[0]
        assert train[0]['bn_eval_loss'] == ''
        assert math.isfinite(float(train[3]['bn_eval_loss']))

    def test_deterministic(self, small_mlp, blobs, config, tmp_path):
        net = introduce_normalization(small_mlp, 'ap2', init='projecting')
        for run in ('a', 'b'):
            Trainer(config, copy.deepcopy(net), blobs, record_dir=tmp_path / run, verbose=False).train()
        assert (tmp_path / 'a' / 'train.csv').read_text() == (tmp_path / 'b' / 'train.csv').read_text()

    def test_running_loss(self, small_mlp, blobs, config):
        trainer = Trainer(config, small_mlp, blobs, verbose=False)
        trainer.train()
        rows = trainer.train_records
        beta = trainer.running.beta
        assert rows[0]['running_loss'] == rows[0]['loss']
        assert rows[1]['running_loss'] == pytest.approx(beta * rows[0]['loss'] + (1 - beta) * rows[1]['loss'])
        assert rows[-1]['running_loss'] == pytest.approx(trainer.running.estimate)

    def test_loss_decreases(self, small_mlp, blobs):
        net = introduce_normalization(small_mlp, 'ap2', init='projecting')
        before, _ = Tester(net, blobs).evaluate()
        Trainer(TrainConfig(batch_size=32, lr0=1e-2, epochs=3, seed=0), net, blobs, verbose=False).train()
        after, _ = Tester(net, blobs).evaluate()
        assert after < before

    def test_non_finite(self, small_mlp, blobs, config):
        with torch.no_grad():
            small_mlp.layers[1].weight[0, 0] = float('nan')
        with pytest.raises(NumericalError):
            Trainer(config, small_mlp, blobs, verbose=False).train()


class TestTester:

    def test_evaluate(self, small_mlp, blobs):
        loss, accuracy = Tester(small_mlp, blobs, batch_size=100).evaluate()
        assert loss > 0
        assert 0.0 <= accuracy <= 1.0

    def test_batch_size_independent(self, small_mlp, blobs):
        a = Tester(small_mlp, blobs, batch_size=7).evaluate()
        b = Tester(small_mlp, blobs, batch_size=512).evaluate()
        assert a[0] == pytest.approx(b[0], rel=1e-6) and a[1] == b[1]


class QuadraticTrainer:
    """Stand-in whose final loss is a parabola in log10(lr) that diverges above 0.1."""

    def __init__(self, config, model, train_data, verbose=False):
        self.u = math.log10(config.lr0)

    def train(self):
        if self.u > -1:
            raise NumericalError("diverged")
        return (self.u + 3) ** 2 + 1


class TestSearch:

    @pytest.fixture(autouse=True)
    def quadratic(self, monkeypatch):
        monkeypatch.setattr(search_module, 'Trainer', QuadraticTrainer)

    def test_finds_minimum(self, small_mlp, blobs):
        lr = lr_search(small_mlp, blobs, TrainConfig(search_lo=-6.0, search_hi=0.0))
        assert abs(math.log10(lr) + 3) < 0.1

    def test_divergence_sentinel(self, small_mlp, blobs):
        search = Search(TrainConfig(search_lo=-6.0, search_hi=0.0), small_mlp, blobs)
        assert search.objective(-2.0) == pytest.approx(2.0)
        assert search.objective(0.0) == pytest.approx(20.0)
        assert math.isnan(search.records[-1][1])

    def test_all_diverged(self, small_mlp, blobs):
        with pytest.raises(NumericalError, match="every lr probe diverged"):
            lr_search(small_mlp, blobs, TrainConfig(search_lo=-0.5, search_hi=0.0))


@pytest.mark.slow
def test_lr_search_beats_endpoints(small_mlp, blobs):
    config = TrainConfig(batch_size=128, search_lo=-6.0, search_hi=-2.0, search_epochs=5, search_iters=10, seed=0)
    net = introduce_normalization(small_mlp, 'ap2', init='projecting')
    search = Search(config, net, blobs)
    best_lr = search.search()

    best = min(l for _, l in search.records if math.isfinite(l))
    assert len(search.records) <= config.search_iters + 1
    # bounded probes stay a tolerance step inside the interval
    assert best <= search.objective(config.search_lo) * 1.02
    assert best <= search.objective(config.search_hi) * 1.02
    assert config.search_lo <= math.log10(best_lr) <= config.search_hi
