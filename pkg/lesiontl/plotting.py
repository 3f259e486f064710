import logging
import os
from dataclasses import asdict

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

from .errors import PlotError
from .training import HISTORY_COLUMNS

logger = logging.getLogger('lesiontl.plotting')

SIDECAR_COLUMNS = ['label'] + HISTORY_COLUMNS


def plot_learning_curves(histories, output, title=None, caption=None):
    """
        Validation accuracy and loss against epoch, one series per (label, history) pair.

        The CSV sidecar next to the image holds the exact plotted points and is the contract; the PNG is
        presentation only. Returns (image_path, sidecar_path).
    """
    histories = list(histories)
    if not histories:
        raise PlotError('No histories to plot')

    for label, history in histories:
        if not history:
            raise PlotError('History %r is empty' % label)

    base, _ = os.path.splitext(output)
    image_path = base + '.png'
    sidecar_path = base + '.csv'
    os.makedirs(os.path.dirname(image_path) or '.', exist_ok=True)

    rows = [dict(label=label, **asdict(record)) for label, history in histories for record in history]
    pd.DataFrame(rows, columns=SIDECAR_COLUMNS).to_csv(sidecar_path, index=False, encoding='utf-8',
                                                       lineterminator='\n')

    figure, (accuracy_axis, loss_axis) = plt.subplots(1, 2, figsize=(12, 4.5))
    for label, history in histories:
        epochs = [r.epoch for r in history]
        accuracy_axis.plot(epochs, [r.val_accuracy for r in history], marker='.', label=label)
        loss_axis.plot(epochs, [r.val_loss for r in history], marker='.', label=label)

    accuracy_axis.set_xlabel('epoch')
    accuracy_axis.set_ylabel('validation accuracy')
    loss_axis.set_xlabel('epoch')
    loss_axis.set_ylabel('validation loss')
    for axis in (accuracy_axis, loss_axis):
        axis.grid(alpha=0.3)
        axis.legend()

    if title:
        figure.suptitle(title)

    if caption:
        figure.text(0.5, 0.01, caption, ha='center', fontsize=8, wrap=True)

    figure.tight_layout(rect=(0, 0.05 if caption else 0, 1, 1))
    figure.savefig(image_path, dpi=120)
    plt.close(figure)
    logger.info('Wrote learning curves %s (%d series)', image_path, len(histories))
    return image_path, sidecar_path
