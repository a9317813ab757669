from collections import defaultdict, deque
import datetime
import hashlib
import logging
import random
import time
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch

logger = logging.getLogger(__name__)


class SmoothedValue(object):
    """Track a series of values and provide access to smoothed values over a
    window or the global series average.
    """

    def __init__(self, window_size=20, fmt=None):
        if fmt is None:
            fmt = "{median:.4f} ({global_avg:.4f})"
        self.deque = deque(maxlen=window_size)
        self.total = 0.0
        self.count = 0
        self.fmt = fmt

    def update(self, value, n=1):
        self.deque.append(value)
        self.count += n
        self.total += value * n

    @property
    def median(self):
        return float(np.median(self.deque))

    @property
    def avg(self):
        return float(np.mean(self.deque))

    @property
    def global_avg(self):
        return self.total / self.count if self.count else 0.0

    @property
    def max(self):
        return max(self.deque)

    @property
    def value(self):
        return self.deque[-1]

    def __str__(self):
        return self.fmt.format(
            median=self.median,
            avg=self.avg,
            global_avg=self.global_avg,
            max=self.max,
            value=self.value)


class MetricLogger(object):
    def __init__(self, delimiter="  ", log=None):
        self.meters = defaultdict(SmoothedValue)
        self.delimiter = delimiter
        self.log = log or logger

    def update(self, **kwargs):
        for k, v in kwargs.items():
            if isinstance(v, torch.Tensor):
                v = v.item()
            if not isinstance(v, (float, int)):
                raise TypeError(f'meter {k} expects a number, got {type(v).__name__}')
            self.meters[k].update(v)

    def __getattr__(self, attr):
        if attr in self.__dict__.get('meters', {}):
            return self.meters[attr]
        if attr in self.__dict__:
            return self.__dict__[attr]
        raise AttributeError("'{}' object has no attribute '{}'".format(
            type(self).__name__, attr))

    def __str__(self):
        return self.delimiter.join("{}: {}".format(name, str(meter)) for name, meter in self.meters.items())

    def add_meter(self, name, meter):
        self.meters[name] = meter

    def log_every(self, iterable, print_freq, header=None):
        i = 0
        header = header or ''
        end = time.time()
        iter_time = SmoothedValue(fmt='{avg:.4f}')
        data_time = SmoothedValue(fmt='{avg:.4f}')
        space_fmt = ':' + str(len(str(len(iterable)))) + 'd'
        log_msg = self.delimiter.join([
            header,
            '[{0' + space_fmt + '}/{1}]',
            'eta: {eta}',
            '{meters}',
            'time: {time}',
            'data: {data}'
        ])
        for obj in iterable:
            data_time.update(time.time() - end)
            yield obj
            iter_time.update(time.time() - end)
            if i % print_freq == 0 or i == len(iterable) - 1:
                eta_seconds = iter_time.global_avg * (len(iterable) - i)
                eta_string = str(datetime.timedelta(seconds=int(eta_seconds)))
                self.log.info(log_msg.format(
                    i, len(iterable), eta=eta_string,
                    meters=str(self),
                    time=str(iter_time), data=str(data_time)))
            i += 1
            end = time.time()


def seed_everything(seed, threads=None, deterministic=False):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def config_digest(text: str) -> str:
    return hashlib.sha1(text.encode('utf-8')).hexdigest()[:8]


def make_run_dir(base_path, config_text: str, now=None) -> Path:
    """Create ``<base>/<YYYYmmdd-HHMMSS>-<sha1[:8]>``, suffixing ``-<n>`` if the name is taken."""
    now = now or datetime.datetime.now()
    base = Path(base_path)
    base.mkdir(parents=True, exist_ok=True)
    name = f"{now.strftime('%Y%m%d-%H%M%S')}-{config_digest(config_text)}"
    folder = base / name
    n = 1
    while True:
        try:
            folder.mkdir()
            return folder
        except FileExistsError:
            folder = base / f'{name}-{n}'
            n += 1


def save_result(history, result_path):
    """Plot loss and Dice curves from the per-epoch history records."""
    epochs = [h['epoch'] for h in history]
    train_loss = [h['train_loss'] for h in history]
    train_dice = [h['train_dice'] for h in history]
    val = [(h['epoch'], h['val_avg']) for h in history if h.get('val_avg') is not None]

    plt.figure(figsize=(12, 7))
    plt.subplot(1, 2, 1)
    plt.plot(epochs, train_dice)
    legend = ['Train_dice']
    if val:
        plt.plot([e for e, _ in val], [v / 100.0 for _, v in val])
        legend.append('Val_dice')
    plt.legend(legend)

    plt.subplot(1, 2, 2)
    plt.plot(epochs, train_loss)
    plt.legend(['Train_loss'])

    path = Path(result_path) / 'result.png'
    plt.savefig(path)
    plt.close()
    return path
