import numpy as np
import pytest
from PIL import Image

from lesiontl.dataset import BENIGN, MELANOMA, LesionSample, preprocess_spec_for
from lesiontl.model import FreezePolicy, ModelSpec

TINY_BACKBONE = 'tests.tiny.tiny_backbone'
TINY_BACKBONE_WIDE = 'tests.tiny.tiny_backbone_wide'
GRADCHECK_BACKBONE = 'tests.tiny.gradcheck_backbone'

# Melanoma images are red, benign images are blue; per-image noise keeps every file's content unique.
CLASS_COLORS = {MELANOMA: (200, 30, 30), BENIGN: (30, 30, 200)}


def write_image(path, color, size=(32, 24), noise=8, seed=0):
    rng = np.random.default_rng(seed)
    width, height = size
    pixels = np.empty((height, width, 3), dtype=np.int16)
    pixels[...] = color
    pixels += rng.integers(-noise, noise + 1, size=pixels.shape, dtype=np.int16)
    Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8), 'RGB').save(str(path))
    return path


def make_lesion_tree(root, melanoma=10, benign=10, size=(32, 24), suffix='.png', seed=0):
    """
        Writes <root>/melanoma/ and <root>/benign/ with the given number of unique images each.
    """
    counter = seed * 100000
    for label, count in ((MELANOMA, melanoma), (BENIGN, benign)):
        class_dir = root / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            counter += 1
            write_image(class_dir / ('%s_%03d%s' % (label, i, suffix)), CLASS_COLORS[label], size, seed=counter)

    return root


@pytest.fixture
def lesion_tree(tmp_path):
    def factory(melanoma=10, benign=10, **kwargs):
        return make_lesion_tree(tmp_path / 'data', melanoma, benign, **kwargs)

    return factory


@pytest.fixture
def tiny_spec():
    return ModelSpec(TINY_BACKBONE, pretrained=False, head_widths=(16,), dropout_rate=0.0,
                     freeze=FreezePolicy(freeze_first_n=1))


@pytest.fixture
def preprocess():
    return preprocess_spec_for(TINY_BACKBONE)


def fake_samples(melanoma, benign, prefix='s'):
    samples = []
    for label, count in ((MELANOMA, melanoma), (BENIGN, benign)):
        for i in range(count):
            samples.append(LesionSample('%s-%s-%04d' % (prefix, label, i), '/nowhere/%s_%d.png' % (label, i), label))

    return samples


@pytest.fixture
def experiment_document(tmp_path, lesion_tree):
    """
        A small but complete experiment: 20 images, tiny backbone, one epoch.
    """
    root = lesion_tree(10, 10)
    return {
        'dataset_root': str(root),
        'output_dir': str(tmp_path / 'runs'),
        'seed': 3,
        'model': {
            'backbone_id': TINY_BACKBONE,
            'pretrained': False,
            'head_widths': [8, 4],
            'dropout_rate': 0.0,
            'freeze': {'freeze_first_n': 1},
        },
        'training': {
            'max_epochs': 1,
            'batch_size': 8,
            'learning_rate': 1e-3,
        },
    }
