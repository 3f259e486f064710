"""
    Dataset pipeline: ingest a two-class lesion image tree, balance it, and plan splits and folds.

    Expected layout::

        <root>/melanoma/*.{jpg,png}
        <root>/benign/*.{jpg,png}

    A first-level subdirectory named after a source (``isic``, ``mednode``) is also accepted below each class
    directory. Every sample id is a content hash, so the same picture shipped by two source archives is only
    counted once.
"""
import hashlib
import io
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch.utils.data import Dataset

from .errors import ConfigError, DatasetStructureError, EmptyClassError, ImageDecodeError, \
    InsufficientDataError, SpecError, StratificationError

logger = logging.getLogger('lesiontl.dataset')

MELANOMA = 'melanoma'
BENIGN = 'benign'
# Allocation order for splits and folds. Melanoma is the positive class.
LABELS = (MELANOMA, BENIGN)
CLASS_INDEX = {BENIGN: 0, MELANOMA: 1}
INDEX_CLASS = {v: k for k, v in CLASS_INDEX.items()}

SOURCES = ('isic', 'mednode', 'other')
IMAGE_SUFFIXES = ('.jpg', '.jpeg', '.png')
MANIFEST_COLUMNS = ['id', 'image_path', 'label', 'source']
REJECT_COLUMNS = ['path', 'reason']

TARGET_SIZE = 224
DEFAULT_BALANCING_RATIO = Fraction(112, 100)
ID_LENGTH = 16

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BACKBONE_IDS = ('vgg16', 'vgg19', 'alexnet_modified')


def exact_fraction(value):
    """
        Fraction from an int, float, string or Fraction without binary float noise: 0.3 -> 3/10.
    """
    if isinstance(value, Fraction):
        return value

    if isinstance(value, float):
        return Fraction(repr(value))

    return Fraction(value)


def round_half_up(value):
    return int(math.floor(exact_fraction(value) + Fraction(1, 2)))


@dataclass(frozen=True)
class LesionSample:
    id: str
    image_path: str
    label: str
    source: str = 'other'


@dataclass(frozen=True)
class Reject:
    path: str
    reason: str


@dataclass(frozen=True)
class DatasetManifest:
    """
        The labeled sample inventory after balancing, ordered by id. Single source of truth for splits and folds.
    """
    samples: tuple
    seed: int = 0
    balancing_ratio: Fraction = DEFAULT_BALANCING_RATIO
    rejects: tuple = field(default=(), compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetStructureError('Duplicate sample ids in manifest')

    @property
    def class_counts(self):
        counts = Counter(s.label for s in self.samples)
        return {label: counts.get(label, 0) for label in LABELS}

    @property
    def ids(self):
        return [s.id for s in self.samples]

    @property
    def labels_by_id(self):
        return {s.id: s.label for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, ids):
        wanted = set(ids)
        return DatasetManifest(tuple(s for s in self.samples if s.id in wanted), self.seed, self.balancing_ratio)

    def select(self, ids):
        """
            The samples for `ids`, in manifest order.
        """
        return self.subset(ids).samples


@dataclass(frozen=True)
class SplitPlan:
    train_ids: frozenset
    test_ids: frozenset
    test_fraction: float
    stratified: bool
    seed: int


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict
    stratified: bool = True
    seed: int = 0

    @property
    def ids(self):
        return frozenset(self.assignment)

    def fold(self, index):
        return frozenset(i for i, f in self.assignment.items() if f == index)

    def outside(self, index):
        return frozenset(i for i, f in self.assignment.items() if f != index)

    @property
    def sizes(self):
        counts = Counter(self.assignment.values())
        return [counts.get(f, 0) for f in range(self.k)]


@dataclass(frozen=True)
class PreprocessSpec:
    backbone_id: str
    channel_means: tuple = IMAGENET_MEAN
    channel_stds: tuple = IMAGENET_STD
    target_height: int = TARGET_SIZE
    target_width: int = TARGET_SIZE
    resize_mode: str = 'bilinear'

    def __post_init__(self):
        if (self.target_height, self.target_width) != (TARGET_SIZE, TARGET_SIZE):
            raise SpecError('preprocess.target_size', 'must be exactly %dx%d' % (TARGET_SIZE, TARGET_SIZE))

        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise SpecError('preprocess.channels', 'exactly 3 channel means and stds are required')

        if any(s <= 0 for s in self.channel_stds):
            raise SpecError('preprocess.channel_stds', 'must be strictly positive')

        if self.resize_mode != 'bilinear':
            raise SpecError('preprocess.resize_mode', 'only bilinear resizing is supported')

    def as_dict(self):
        return {
            'backbone_id': self.backbone_id,
            'channel_means': list(self.channel_means),
            'channel_stds': list(self.channel_stds),
            'target_height': self.target_height,
            'target_width': self.target_width,
            'resize_mode': self.resize_mode,
        }


def preprocess_spec_for(backbone_id):
    """
        All built-in backbones ship torchvision ImageNet weights, so they share its normalization statistics.
    """
    return PreprocessSpec(backbone_id=backbone_id)


def _infer_source(class_dir, path):
    relative = path.relative_to(class_dir)
    if len(relative.parts) > 1 and relative.parts[0].lower() in SOURCES:
        return relative.parts[0].lower()

    name = path.name.lower()
    if name.startswith('isic'):
        return 'isic'

    if 'mednode' in name or 'med_node' in name or 'med-node' in name:
        return 'mednode'

    return 'other'


def _fingerprint(path):
    """
        Returns (content id, None) for a decodable image, or (None, reason) for anything else.
    """
    try:
        data = path.read_bytes()
        with Image.open(io.BytesIO(data)) as image:
            image.load()

    except Exception as e:
        return None, '%s: %s' % (e.__class__.__name__, e)

    return hashlib.sha256(data).hexdigest()[:ID_LENGTH], None


def _scan_class(root, label):
    class_dir = root / label
    if not class_dir.is_dir():
        raise DatasetStructureError('Missing class directory %s' % class_dir)

    return class_dir, sorted(p for p in class_dir.rglob('*') if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def build_manifest(root, seed=0, balancing_ratio=DEFAULT_BALANCING_RATIO, workers=1):
    """
        Scans `root`, drops undecodable and duplicate images into the rejects report, and downsamples the
        majority class until it holds at most ceil(balancing_ratio * minority) samples. The retained majority
        subset depends only on `seed`.
    """
    root = Path(root)
    ratio = exact_fraction(balancing_ratio)
    if ratio < 1:
        raise ConfigError('dataset.balancing_ratio', 'must be >= 1')

    candidates = []
    for label in LABELS:
        class_dir, paths = _scan_class(root, label)
        candidates.extend((label, class_dir, p) for p in paths)

    paths = [p for _, _, p in candidates]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fingerprints = list(pool.map(_fingerprint, paths))

    else:
        fingerprints = [_fingerprint(p) for p in paths]

    rejects = []
    seen = {}
    by_label = {label: [] for label in LABELS}
    for (label, class_dir, path), (sample_id, reason) in zip(candidates, fingerprints):
        if sample_id is None:
            logger.warning('Rejecting undecodable image %s (%s)', path, reason)
            rejects.append(Reject(str(path), reason))
            continue

        if sample_id in seen:
            logger.warning('Rejecting duplicate image %s (same content as %s)', path, seen[sample_id])
            rejects.append(Reject(str(path), 'duplicate of %s' % seen[sample_id]))
            continue

        seen[sample_id] = path
        by_label[label].append(LesionSample(sample_id, str(path), label, _infer_source(class_dir, path)))

    for label in LABELS:
        if not by_label[label]:
            raise EmptyClassError(label)

    by_label = _balance(by_label, ratio, seed)
    samples = sorted((s for group in by_label.values() for s in group), key=lambda s: s.id)
    manifest = DatasetManifest(tuple(samples), seed, ratio, tuple(rejects))
    logger.info('Built manifest of %d samples from %s (%s), %d rejected', len(manifest), root,
                ', '.join('%s=%d' % kv for kv in manifest.class_counts.items()), len(rejects))
    return manifest


def _balance(by_label, ratio, seed):
    minority = min(len(v) for v in by_label.values())
    limit = int(math.ceil(ratio * minority))
    balanced = {}
    for label, group in by_label.items():
        if len(group) <= limit:
            balanced[label] = group
            continue

        ordered = sorted(group, key=lambda s: s.id)
        keep = np.random.default_rng(seed).choice(len(ordered), size=limit, replace=False)
        balanced[label] = [ordered[i] for i in sorted(keep)]
        logger.info('Downsampled %s from %d to %d samples (ratio %s)', label, len(group), limit, ratio)

    return balanced


def write_manifest(manifest, path):
    frame = pd.DataFrame([[s.id, s.image_path, s.label, s.source] for s in manifest.samples],
                         columns=MANIFEST_COLUMNS)
    frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def read_manifest(path, seed=0, balancing_ratio=DEFAULT_BALANCING_RATIO):
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise DatasetStructureError('Manifest %s lacks columns %s' % (path, ', '.join(sorted(missing))))

    samples = sorted((LesionSample(r.id, r.image_path, r.label, r.source) for r in frame.itertuples(index=False)),
                     key=lambda s: s.id)
    return DatasetManifest(tuple(samples), seed, exact_fraction(balancing_ratio))


def write_rejects(rejects, path):
    frame = pd.DataFrame([[r.path, r.reason] for r in rejects], columns=REJECT_COLUMNS)
    frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def _group_by_label(labels_by_id):
    groups = {}
    for sample_id in sorted(labels_by_id):
        groups.setdefault(labels_by_id[sample_id], []).append(sample_id)

    order = [l for l in LABELS if l in groups] + sorted(l for l in groups if l not in LABELS)
    return [(label, groups[label]) for label in order]


def split_train_test(manifest, test_fraction, stratified=True, seed=0):
    """
        Deterministic train/test partition with |test| = round(test_fraction * N).

        Stratified splits allocate per-class test counts by largest remainder, so each class is within one
        sample of its exact share.
    """
    fraction = exact_fraction(test_fraction)
    if not 0 <= fraction <= 1:
        raise ConfigError('split.test_fraction', 'must be within [0, 1]')

    if not len(manifest):
        raise InsufficientDataError('Cannot split an empty manifest')

    ids = sorted(manifest.ids)
    n_test = round_half_up(fraction * len(ids))
    rng = np.random.default_rng(seed)

    if not stratified:
        order = rng.permutation(len(ids))
        test_ids = frozenset(ids[i] for i in order[:n_test])

    else:
        test_ids = frozenset(_stratified_pick(manifest, fraction, n_test, rng))

    plan = SplitPlan(frozenset(ids) - test_ids, test_ids, float(test_fraction), bool(stratified), seed)
    logger.debug('Split %d samples into %d train / %d test (stratified=%s)', len(ids), len(plan.train_ids),
                 len(plan.test_ids), stratified)
    return plan


def _stratified_pick(manifest, fraction, n_test, rng):
    counts = manifest.class_counts
    if fraction > 0:
        for label in LABELS:
            if counts[label] < 1:
                raise StratificationError('Cannot stratify: class %s has no samples' % label)

    groups = _group_by_label(manifest.labels_by_id)
    shares = [(label, fraction * len(members)) for label, members in groups]
    quotas = {label: int(math.floor(share)) for label, share in shares}
    remaining = n_test - sum(quotas.values())
    by_remainder = sorted(range(len(shares)), key=lambda i: (-(shares[i][1] - quotas[shares[i][0]]), i))
    for i in by_remainder[:remaining]:
        quotas[shares[i][0]] += 1

    picked = []
    for label, members in groups:
        order = rng.permutation(len(members))
        picked.extend(members[i] for i in order[:quotas[label]])

    return picked


def carve_validation(manifest, val_fraction, seed=0):
    """
        Stratified (train_ids, val_ids) carve of a training side.
    """
    plan = split_train_test(manifest, val_fraction, stratified=True, seed=seed)
    if not plan.train_ids or not plan.test_ids:
        raise InsufficientDataError('Validation carve of %d samples at %s left an empty side' % (
            len(manifest), val_fraction))

    return plan.train_ids, plan.test_ids


def make_folds(labels_by_id, k, stratified=True, seed=0):
    """
        Assigns every id to one of `k` folds.

        Ids are laid out class by class (melanoma, then benign), seeded-shuffled within each class, and dealt
        round-robin with a single running counter. Fold sizes and per-class fold counts therefore differ by at
        most one, and folds 0..r-1 hold the extra samples when N = q*k + r.
    """
    if k < 2:
        raise ConfigError('kfold.k', 'must be >= 2')

    labels_by_id = dict(labels_by_id)
    if len(labels_by_id) < k:
        raise InsufficientDataError('Cannot make %d folds from %d samples' % (k, len(labels_by_id)))

    rng = np.random.default_rng(seed)
    if stratified:
        layout = []
        for _, members in _group_by_label(labels_by_id):
            layout.extend(members[i] for i in rng.permutation(len(members)))

    else:
        ids = sorted(labels_by_id)
        layout = [ids[i] for i in rng.permutation(len(ids))]

    assignment = {sample_id: position % k for position, sample_id in enumerate(layout)}
    plan = FoldPlan(k, assignment, bool(stratified), seed)
    logger.debug('Made %d folds of sizes %s', k, plan.sizes)
    return plan


def preprocess_image(path, spec):
    """
        Decodes `path` as RGB, resizes it bilinearly to 224x224 and normalizes every channel as
        (pixel / 255 - mean) / std. Returns a float32 array of shape (224, 224, 3).
    """
    try:
        with Image.open(path) as image:
            image = image.convert('RGB')

    except Exception as e:
        raise ImageDecodeError(str(path), e)

    size = (spec.target_width, spec.target_height)
    if image.size != size:
        image = image.resize(size, resample=Image.Resampling.BILINEAR)

    pixels = np.asarray(image, dtype=np.float32) / np.float32(255.0)
    means = np.asarray(spec.channel_means, dtype=np.float32)
    stds = np.asarray(spec.channel_stds, dtype=np.float32)
    return (pixels - means) / stds


class LesionDataset(Dataset):
    """
        Torch view of a list of samples: yields (CHW float tensor, class index), benign = 0, melanoma = 1.
    """

    def __init__(self, samples, spec):
        self.samples = list(samples)
        self.spec = spec

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        sample = self.samples[index]
        image = preprocess_image(sample.image_path, self.spec)
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))), CLASS_INDEX[sample.label]

    @property
    def targets(self):
        return [CLASS_INDEX[s.label] for s in self.samples]
