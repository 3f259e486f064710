import hashlib
import logging
import os
from importlib import import_module

import torch

from ..errors import SpecError, WeightLoadError

logger = logging.getLogger('lesiontl.backbone')

_builtin_backbones = {
    'vgg16': 'lesiontl.backbone.vgg.vgg16',
    'vgg19': 'lesiontl.backbone.vgg.vgg19',
    'alexnet_modified': 'lesiontl.backbone.alexnet.alexnet_modified',
}
_builder_cache = {}


class Backbone(object):
    """
        A convolutional feature extractor in torchvision layout (a Sequential of Conv2d / ReLU / MaxPool2d),
        the pooling that feeds the classifier head, and the flattened width that pooling produces.
    """
    __slots__ = ['name', 'features', 'pool', 'out_features', 'weights_digest']

    def __init__(self, name, features, pool, out_features, weights_digest=None):
        self.name = name
        self.features = features
        self.pool = pool
        self.out_features = out_features
        self.weights_digest = weights_digest

    def __repr__(self):
        return '<Backbone %s, %d features, weights %s>' % (self.name, self.out_features,
                                                            self.weights_digest or 'random')


def get_backbone_by_name(name):
    """
        Returns the builder for a backbone. Built-in names are `vgg16`, `vgg19` and `alexnet_modified`; anything
        with a dot in it is taken as a dotted path to a builder callable of the same signature.
    """
    path = _builtin_backbones.get(name, name)
    if '.' not in path:
        raise SpecError('model.backbone_id', 'unknown backbone %r (builtins: %s)' % (
            name, ', '.join(sorted(_builtin_backbones))))

    builder = _builder_cache.get(path)
    if builder is not None:
        return builder

    try:
        module_path, member_name = path.rsplit('.', 1)
        builder = getattr(import_module(module_path), member_name)

    except (ValueError, ImportError, AttributeError) as e:
        raise SpecError('model.backbone_id', 'could not import backbone %s: %s' % (path, e))

    _builder_cache[path] = builder
    return builder


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)

    return digest.hexdigest()


def load_pretrained(network, weights_path):
    """
        Loads a torchvision-format state dict into `network`. Returns the sha256 of the weight file.
    """
    if not os.path.isfile(weights_path):
        raise WeightLoadError('Pretrained weights not found at %s. Save the torchvision state dict there, or set '
                              'LESIONTL_CACHE / model.weights_path, or build with pretrained=false.' % weights_path)

    try:
        state_dict = torch.load(weights_path, map_location='cpu', weights_only=True)
        network.load_state_dict(state_dict)

    except Exception as e:
        raise WeightLoadError('Could not load pretrained weights from %s: %s' % (weights_path, e))

    digest = file_digest(weights_path)
    logger.info('Loaded pretrained weights %s (sha256 %s)', weights_path, digest[:12])
    return digest
