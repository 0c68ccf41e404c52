import csv, math, os, time, torch
import torch.nn.functional as F
import torch.optim as optim
import structlog

from model.errors import NumericalError
from module.autodiff import apply_grads, backward
from module.data import AugmentConfig, augment, load_dataloader
from module.optim import Adam, RunningLoss
from module.test import Tester


log = structlog.get_logger()

TRAIN_COLUMNS = ['epoch', 'batch', 'loss', 'running_loss', 'lr']
VALID_COLUMNS = ['epoch', 'val_loss', 'val_accuracy']



def fmt(value):
    if value is None:
        return ''
    return repr(float(value)) if isinstance(value, float) else str(value)



def write_csv(path, columns, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])




class TrainerBase:
    def __init__(self, config):

        self.seed = config.seed
        self.n_epochs = config.epochs
        self.batch_size = config.batch_size
        self.augment_cfg = AugmentConfig(config.offset_range, config.noise_var, config.hflip)


    @staticmethod
    def measure_time(start_time, end_time):
        elapsed_time = end_time - start_time
        elapsed_min = int(elapsed_time / 60)
        elapsed_sec = int(elapsed_time - (elapsed_min * 60))
        return f"{elapsed_min}m {elapsed_sec}s"


    def augment_generator(self, epoch):
        return torch.Generator().manual_seed(self.seed * 7919 + epoch + 1)




class Trainer(TrainerBase):
    def __init__(self, config, model, train_data, valid_data=None, record_dir=None, verbose=True):

        super(Trainer, self).__init__(config)

        self.model = model
        self.train_data = train_data
        self.valid_data = valid_data
        self.record_dir = record_dir
        self.verbose = verbose

        self.model.set_detach_stats(config.detach_stats)
        self.optimizer = Adam(self.model.named_parameters(), lr=config.lr0,
                              betas=tuple(config.betas), eps=config.adam_eps)
        self.scheduler = optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=config.lr_decay)

        batches = math.ceil(len(train_data) / self.batch_size)
        self.running = RunningLoss.for_epoch(batches)
        self.has_bn = any(layer.mode == 'bn' for _, layer in model.norm_layers())

        self.train_records, self.valid_records = [], []


    def print_epoch(self, record_dict):
        print(f"""Epoch {record_dict['epoch']}/{self.n_epochs} | \
              Time: {record_dict['epoch_time']}""".replace(' ' * 14, ''))

        print(f"""  >> Running Loss: {record_dict['running_loss']:.4f} | \
              LR: {record_dict['lr']:.3g}""".replace(' ' * 14, ''))

        if 'val_loss' in record_dict:
            print(f"""  >> Valid Loss: {record_dict['val_loss']:.4f} | \
                  Valid Acc: {record_dict['val_accuracy']:.4f}""".replace(' ' * 18, ''))
        print()


    def train(self):
        for epoch in range(self.n_epochs):
            start_time = time.time()
            record_dict = {'epoch': epoch + 1, 'lr': self.optimizer.param_groups[0]['lr']}

            rows = self.train_epoch(epoch)
            record_dict['running_loss'] = self.running.estimate

            if self.has_bn:
                rows[-1]['bn_eval_loss'], _ = Tester(self.model, self.train_data).evaluate()

            if self.valid_data is not None:
                val_loss, val_acc = Tester(self.model, self.valid_data).evaluate()
                record_dict.update(val_loss=val_loss, val_accuracy=val_acc)
                self.valid_records.append({'epoch': epoch + 1, 'val_loss': val_loss, 'val_accuracy': val_acc})

            self.train_records.extend(rows)
            self.scheduler.step()

            record_dict['epoch_time'] = self.measure_time(start_time, time.time())
            log.info("epoch finished", epoch=epoch + 1, running_loss=self.running.estimate, lr=record_dict['lr'])
            if self.verbose:
                self.print_epoch(record_dict)

        if self.record_dir is not None:
            self.save_records()
        return self.running.estimate


    def train_epoch(self, epoch):
        rows = []
        lr = self.optimizer.param_groups[0]['lr']
        generator = self.augment_generator(epoch)
        dataloader = load_dataloader(self.train_data, self.batch_size, self.seed, epoch)

        for idx, (images, labels) in enumerate(dataloader):
            images = augment(images, self.augment_cfg, generator)

            out = self.model(images, training=True)
            loss = F.nll_loss(out, labels)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {idx + 1}")

            grads = backward(loss, self.model)
            apply_grads(self.model, grads)
            self.optimizer.step()

            self.running.update(loss.item())
            rows.append({'epoch': epoch + 1, 'batch': idx + 1, 'loss': loss.item(),
                         'running_loss': self.running.estimate, 'lr': lr})
        return rows


    def save_records(self):
        os.makedirs(self.record_dir, exist_ok=True)
        columns = TRAIN_COLUMNS + (['bn_eval_loss'] if self.has_bn else [])
        write_csv(os.path.join(self.record_dir, 'train.csv'), columns, self.train_records)

        if self.valid_data is not None:
            write_csv(os.path.join(self.record_dir, 'valid.csv'), VALID_COLUMNS, self.valid_records)
