from torchvision import models

from . import Backbone, load_pretrained

# 256 channels pooled to 6x6.
ALEXNET_OUT_FEATURES = 256 * 6 * 6


def alexnet_modified(weights_path=None):
    """
        AlexNet's five convolution layers. The "modified" part is the head lesiontl puts on top of them.
    """
    network = models.alexnet(weights=None)
    digest = load_pretrained(network, weights_path) if weights_path else None
    return Backbone('alexnet_modified', network.features, network.avgpool, ALEXNET_OUT_FEATURES, digest)
