from .data import Dataset, load_cifar10_dir, load_dataloader, load_mnist_dir, subset, synthetic_blobs
from .model import load_model, print_model_desc, read_f32, save_model
from .optim import TrainConfig
from .search import Search, lr_search
from .train import Trainer, write_csv
from .test import Tester
from .verify import run_suite
