import copy, math
import structlog
from transformers import set_seed

from model.errors import NumericalError
from module.optim import brent_min
from module.train import Trainer


log = structlog.get_logger()



class Search:
    """Brent search over log10(lr) of the running training loss after a fixed horizon.

    Every probe trains a fresh copy of the initial network with the same seed,
    so probes see identical initial weights and data order.
    """

    def __init__(self, config, model, train_data):

        self.config = config
        self.model = copy.deepcopy(model)
        self.train_data = train_data
        self.records = []


    def objective(self, u):
        config = self.config.override(lr0=10.0 ** u, epochs=self.config.search_epochs)
        set_seed(config.seed)

        try:
            trainer = Trainer(config, copy.deepcopy(self.model), self.train_data, verbose=False)
            loss = trainer.train()
        except NumericalError:
            loss = float('nan')

        self.records.append((u, loss))
        log.info("lr probe", log10_lr=round(u, 4), loss=loss, diverged=not math.isfinite(loss))

        if math.isfinite(loss):
            return loss
        # divergent probes get a finite penalty so the search routes around them
        finite = [l for _, l in self.records if math.isfinite(l)]
        return 10 * max(finite) if finite else float('inf')


    def search(self):
        try:
            result = brent_min(self.objective, self.config.search_lo, self.config.search_hi,
                               max_iters=self.config.search_iters, xtol=1e-2)
        except NumericalError:
            probed = ', '.join(f"{u:.3f}" for u, _ in self.records)
            raise NumericalError(f"every lr probe diverged (log10 lr probed: {probed})") from None

        finite = [(u, l) for u, l in self.records if math.isfinite(l)]
        if not finite:
            probed = ', '.join(f"{u:.3f}" for u, _ in self.records)
            raise NumericalError(f"every lr probe diverged (log10 lr probed: {probed})")

        best_u, best_loss = min(finite, key=lambda t: t[1])
        log.info("lr search finished", lr=10.0 ** best_u, loss=best_loss, probes=result.nfev)
        return 10.0 ** best_u



def lr_search(model, train_data, config):
    return Search(config, model, train_data).search()
