"""
    Training engine: seeded training loop with Adam or SGD, dropout, a hard epoch budget and early stopping.
"""
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from humanfriendly import format_timespan
from torch.utils.data import DataLoader

from .errors import DatasetError, DivergenceError, InsufficientDataError, SpecError
from .model import export_model

logger = logging.getLogger('lesiontl.training')

ADAM = 'adam'
SGD = 'sgd'
OPTIMIZER_KINDS = (ADAM, SGD)
DEFAULT_LEARNING_RATES = {ADAM: 1e-4, SGD: 1e-2}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

VAL_LOSS = 'val_loss'
VAL_ACCURACY = 'val_accuracy'
MONITORS = (VAL_LOSS, VAL_ACCURACY)

CONTINUE = 'continue'
STOP = 'stop'

HISTORY_COLUMNS = ['epoch', 'train_loss', 'train_accuracy', 'val_loss', 'val_accuracy']


@dataclass(frozen=True)
class EarlyStopSpec:
    monitor: str = VAL_LOSS
    patience: int = 10
    min_delta: float = 0.0
    restore_best: bool = True
    # Disabled early stopping runs the whole epoch budget.
    enabled: bool = True


@dataclass(frozen=True)
class TrainingConfig:
    optimizer_kind: str = ADAM
    # None picks the optimizer's default rate.
    learning_rate: float = None
    momentum: float = 0.9
    max_epochs: int = 100
    batch_size: int = 32
    early_stopping: EarlyStopSpec = field(default_factory=EarlyStopSpec)
    seed: int = 0
    checkpoint_every: int = 0

    @property
    def effective_learning_rate(self):
        if self.learning_rate is None:
            return DEFAULT_LEARNING_RATES[self.optimizer_kind]

        return self.learning_rate

    def as_dict(self):
        data = asdict(self)
        data['effective_learning_rate'] = self.effective_learning_rate
        if self.optimizer_kind == ADAM:
            data['adam_betas'] = list(ADAM_BETAS)
            data['adam_eps'] = ADAM_EPS

        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop('effective_learning_rate', None)
        data.pop('adam_betas', None)
        data.pop('adam_eps', None)
        data['early_stopping'] = EarlyStopSpec(**data.get('early_stopping', {}))
        return cls(**data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


class EarlyStopDecision(NamedTuple):
    decision: str
    best_epoch: int

    @property
    def stop(self):
        return self.decision == STOP


@dataclass
class TrainedModel:
    model: object
    history: list
    stopped_early: bool
    best_epoch: int
    config: TrainingConfig

    @property
    def best_record(self):
        return self.history[self.best_epoch - 1]


def make_optimizer(parameters, kind, learning_rate, momentum=0.0):
    """
        Adam with the standard decay coefficients, or SGD with momentum.
    """
    if learning_rate is None or not learning_rate > 0:
        raise SpecError('training.learning_rate', 'must be positive, got %r' % (learning_rate,))

    if kind == ADAM:
        return torch.optim.Adam(parameters, lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

    if kind == SGD:
        if not 0 <= momentum < 1:
            raise SpecError('training.momentum', 'must be within [0, 1)')

        return torch.optim.SGD(parameters, lr=learning_rate, momentum=momentum)

    raise SpecError('training.optimizer_kind', 'must be one of %s' % ', '.join(OPTIMIZER_KINDS))


def early_stop_check(history, spec):
    """
        An epoch improves when its monitored value beats the best so far by more than min_delta; any other epoch
        adds one to the wait. Stop once the wait reaches the patience (a patience of 0 still allows the one
        epoch that first fails to improve). best_epoch is the epoch of the last improvement, so ties go to the
        earliest epoch.
    """
    if not history:
        raise ValueError('early_stop_check needs at least one epoch of history')

    if spec.monitor == VAL_LOSS:
        improved = lambda value, best: value < best - spec.min_delta
    else:
        improved = lambda value, best: value > best + spec.min_delta

    best = None
    best_epoch = 0
    wait = 0
    for record in history:
        value = getattr(record, spec.monitor)
        if best is None or improved(value, best):
            best, best_epoch, wait = value, record.epoch, 0
        else:
            wait += 1

    if spec.enabled and wait >= max(spec.patience, 1):
        return EarlyStopDecision(STOP, best_epoch)

    return EarlyStopDecision(CONTINUE, best_epoch)


def _check_sets(train_set, val_set):
    if not len(train_set):
        raise InsufficientDataError('The training set is empty')

    if not len(val_set):
        raise InsufficientDataError('The validation set is empty')

    train_samples = getattr(train_set, 'samples', None)
    val_samples = getattr(val_set, 'samples', None)
    if train_samples is not None and val_samples is not None:
        if set(s.id for s in train_samples) & set(s.id for s in val_samples):
            raise DatasetError('Training and validation sets overlap')


def _validate_config(config):
    errors = {}
    if config.max_epochs < 1:
        errors['training.max_epochs'] = ['must be >= 1']

    if config.batch_size < 1:
        errors['training.batch_size'] = ['must be >= 1']

    if config.optimizer_kind not in OPTIMIZER_KINDS:
        errors['training.optimizer_kind'] = ['must be one of %s' % ', '.join(OPTIMIZER_KINDS)]

    if config.early_stopping.monitor not in MONITORS:
        errors['training.early_stopping.monitor'] = ['must be one of %s' % ', '.join(MONITORS)]

    if config.early_stopping.patience < 0:
        errors['training.early_stopping.patience'] = ['must be >= 0']

    if config.early_stopping.min_delta < 0:
        errors['training.early_stopping.min_delta'] = ['must be >= 0']

    if errors:
        raise SpecError(errors)


def _evaluate(model, loader):
    model.eval()
    total_loss = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for inputs, targets in loader:
            logits = model.logits(inputs)
            total_loss += F.cross_entropy(logits, targets, reduction='sum').item()
            correct += (logits.argmax(dim=1) == targets).sum().item()
            count += len(targets)

    return total_loss / count, correct / count


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _save_checkpoint(model, directory):
    export_model(model, directory)
    logger.debug('Wrote checkpoint %s', directory)


def train(model, train_set, val_set, config, checkpoint_dir=None):
    """
        Trains `model` for at most `config.max_epochs` epochs, stopping early when early_stop_check says so.

        Batch order and dropout masks are drawn from `config.seed` only, inside a forked RNG, so identical
        inputs give identical histories. Frozen parameters are never handed to the optimizer.
    """
    _validate_config(config)
    _check_sets(train_set, val_set)
    early_stopping = config.early_stopping

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(trainable, config.optimizer_kind, config.effective_learning_rate, config.momentum)

    history = []
    best_state = None
    stopped_early = False
    decision = None
    started = time.time()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        generator = torch.Generator().manual_seed(config.seed)
        loader = DataLoader(train_set, batch_size=config.batch_size, shuffle=True, generator=generator)
        val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False)

        for epoch in range(1, config.max_epochs + 1):
            model.train()
            total_loss = 0.0
            correct = 0
            count = 0
            for inputs, targets in loader:
                optimizer.zero_grad()
                logits = model.logits(inputs)
                loss = F.cross_entropy(logits, targets)
                if not torch.isfinite(loss):
                    raise DivergenceError(epoch, loss.item())

                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(targets)
                correct += (logits.detach().argmax(dim=1) == targets).sum().item()
                count += len(targets)

            val_loss, val_accuracy = _evaluate(model, val_loader)
            if not math.isfinite(val_loss):
                raise DivergenceError(epoch, val_loss)

            record = EpochRecord(epoch, total_loss / count, correct / count, val_loss, val_accuracy)
            history.append(record)
            decision = early_stop_check(history, early_stopping)
            if decision.best_epoch == epoch:
                best_state = _snapshot(model)

            logger.info('Epoch %d/%d: loss %.4f acc %.4f, val_loss %.4f val_acc %.4f', epoch, config.max_epochs,
                        record.train_loss, record.train_accuracy, record.val_loss, record.val_accuracy)

            if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                _save_checkpoint(model, os.path.join(checkpoint_dir, 'epoch_%d' % epoch))

            if decision.stop:
                stopped_early = True
                logger.info('Early stopping after epoch %d (best epoch %d, %s)', epoch, decision.best_epoch,
                            early_stopping.monitor)
                break

    if early_stopping.restore_best and best_state is not None:
        model.load_state_dict(best_state)

    model.eval()
    if checkpoint_dir:
        _save_checkpoint(model, os.path.join(checkpoint_dir, 'best'))

    logger.info('Trained %d epochs in %s', len(history), format_timespan(time.time() - started))
    return TrainedModel(model, history, stopped_early, decision.best_epoch, config)


def predict_proba(model, dataset, batch_size=32):
    """
        Class probabilities for every item of `dataset`, in order, with dropout disabled.
    """
    model.eval()
    rows = []
    with torch.no_grad():
        for inputs, _ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            rows.append(model(inputs).numpy())

    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))


def write_history_csv(history, path):
    frame = pd.DataFrame([asdict(r) for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def read_history_csv(path):
    frame = pd.read_csv(path, encoding='utf-8', float_precision='round_trip')
    return [EpochRecord(int(r.epoch), float(r.train_loss), float(r.train_accuracy), float(r.val_loss),
                        float(r.val_accuracy)) for r in frame.itertuples(index=False)]
