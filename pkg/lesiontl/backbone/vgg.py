from torchvision import models

from . import Backbone, load_pretrained

# 512 channels pooled to 7x7.
VGG_OUT_FEATURES = 512 * 7 * 7


def _vgg(constructor, name, weights_path):
    network = constructor(weights=None)
    digest = load_pretrained(network, weights_path) if weights_path else None
    return Backbone(name, network.features, network.avgpool, VGG_OUT_FEATURES, digest)


def vgg16(weights_path=None):
    return _vgg(models.vgg16, 'vgg16', weights_path)


def vgg19(weights_path=None):
    return _vgg(models.vgg19, 'vgg19', weights_path)
