"""
    Model factory: a pretrained convolutional backbone joined to an AlexNet-style fully connected head with
    dropout and a softmax output, plus the freeze policy applied to it.
"""
import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import pandas as pd
import torch
from torch import nn

from .backbone import get_backbone_by_name
from .errors import AblationError, FreezePolicyError, SpecError
from .utils.env import cache_dir

logger = logging.getLogger('lesiontl.model')

WEIGHTS_FILE = 'weights.pt'
SPEC_FILE = 'model_spec.json'
SUMMARY_COLUMNS = ['name', 'kind', 'output_shape', 'params', 'trainable']
OUTPUT_INIT_STD = 0.01


@dataclass(frozen=True)
class FreezePolicy:
    # Count of the earliest weight-bearing backbone layers that are frozen.
    freeze_first_n: int = 3
    # Freeze every remaining backbone layer too ("normal" transfer learning).
    freeze_backbone_rest: bool = False


@dataclass(frozen=True)
class ModelSpec:
    backbone_id: str
    pretrained: bool = True
    num_classes: int = 2
    dropout_rate: float = 0.5
    head_widths: tuple = (4096, 4096)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    input_size: int = 224
    weights_path: str = None
    # Head layers left out of the network, by name. Used by ablation runs.
    ablated_layers: tuple = ()

    def as_dict(self):
        data = asdict(self)
        data['head_widths'] = list(self.head_widths)
        data['ablated_layers'] = list(self.ablated_layers)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['freeze'] = FreezePolicy(**data.get('freeze', {}))
        data['head_widths'] = tuple(data.get('head_widths', (4096, 4096)))
        data['ablated_layers'] = tuple(data.get('ablated_layers', ()))
        return cls(**data)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    output_shape: tuple
    parameter_count: int
    trainable: bool


@dataclass(frozen=True)
class ModelSummary:
    layers: tuple
    total_params: int
    trainable_params: int

    @property
    def names(self):
        return [l.name for l in self.layers]

    def layer(self, name):
        for info in self.layers:
            if info.name == name:
                return info

        raise KeyError(name)


class ConvBlock(nn.Module):
    kind = 'conv'

    def __init__(self, conv):
        super(ConvBlock, self).__init__()
        self.conv = conv
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.conv(x))


class DenseBlock(nn.Module):
    """
        Fully connected -> ReLU -> dropout. Stacked blocks put dropout between every pair of FC layers.
    """
    kind = 'dense'

    def __init__(self, in_features, out_features, dropout_rate):
        super(DenseBlock, self).__init__()
        self.linear = nn.Linear(in_features, out_features)
        self.relu = nn.ReLU()
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, x):
        return self.dropout(self.relu(self.linear(x)))


class OutputLayer(nn.Module):
    kind = 'output'

    def __init__(self, in_features, num_classes):
        super(OutputLayer, self).__init__()
        self.linear = nn.Linear(in_features, num_classes)
        nn.init.normal_(self.linear.weight, 0.0, OUTPUT_INIT_STD)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        return self.linear(x)


class LesionNet(nn.Module):
    """
        backbone -> avgpool -> flatten -> head -> output -> softmax.

        `forward` returns per-class probabilities; `logits` stops before the softmax and is what the loss uses.
    """

    def __init__(self, spec, backbone_layers, pool, head_layers, output, weights_digest=None):
        super(LesionNet, self).__init__()
        self.spec = spec
        self.weights_digest = weights_digest
        self.backbone = nn.Sequential(backbone_layers)
        self.avgpool = pool
        self.flatten = nn.Flatten()
        self.head = nn.Sequential(head_layers)
        self.output = output
        self.softmax = nn.Softmax(dim=1)
        self._output_shapes = None

    def logits(self, x):
        return self.output(self.head(self.flatten(self.avgpool(self.backbone(x)))))

    def forward(self, x):
        return self.softmax(self.logits(x))

    def named_layers(self):
        for name, layer in self.backbone.named_children():
            yield name, layer

        yield 'avgpool', self.avgpool
        yield 'flatten', self.flatten

        for name, layer in self.head.named_children():
            yield name, layer

        yield 'output', self.output

    def weight_bearing_backbone_layers(self):
        return [(name, layer) for name, layer in self.backbone.named_children() if isinstance(layer, ConvBlock)]

    def output_shapes(self):
        """
            Per-layer output shapes (batch dimension dropped), from one forward pass over a zero image.
        """
        if self._output_shapes is None:
            shapes = {}
            hooks = [layer.register_forward_hook(self._shape_hook(shapes, name))
                     for name, layer in self.named_layers()]
            was_training = self.training
            try:
                self.eval()
                with torch.no_grad():
                    self.logits(torch.zeros(1, 3, self.spec.input_size, self.spec.input_size))

            finally:
                self.train(was_training)
                for hook in hooks:
                    hook.remove()

            self._output_shapes = shapes

        return self._output_shapes

    @staticmethod
    def _shape_hook(shapes, name):
        def hook(module, inputs, output):
            shapes[name] = tuple(output.shape[1:])

        return hook


def _kind_of(layer):
    if hasattr(layer, 'kind'):
        return layer.kind

    if isinstance(layer, nn.MaxPool2d):
        return 'maxpool'

    if isinstance(layer, (nn.AdaptiveAvgPool2d, nn.AvgPool2d)):
        return 'avgpool'

    if isinstance(layer, nn.Flatten):
        return 'flatten'

    return layer.__class__.__name__.lower()


def _rename_features(features):
    """
        Regroups a torchvision feature Sequential into conv<stage>_<i> blocks and pool<stage> layers.
    """
    layers = OrderedDict()
    stage, index = 1, 0
    for module in features.children():
        if isinstance(module, nn.Conv2d):
            index += 1
            layers['conv%d_%d' % (stage, index)] = ConvBlock(module)

        elif isinstance(module, nn.ReLU):
            continue

        elif isinstance(module, nn.MaxPool2d):
            layers['pool%d' % stage] = module
            stage, index = stage + 1, 0

        else:
            raise SpecError('model.backbone_id', 'unsupported backbone layer %s' % module.__class__.__name__)

    return layers


def _validate_spec(spec):
    errors = {}
    if spec.num_classes < 2:
        errors['model.num_classes'] = ['must be >= 2']

    if not spec.head_widths:
        errors['model.head_widths'] = ['at least one fully connected layer is required']

    elif any(int(w) < 1 for w in spec.head_widths):
        errors['model.head_widths'] = ['widths must be positive']

    if not 0 <= spec.dropout_rate < 1:
        errors['model.dropout_rate'] = ['must be within [0, 1)']

    unknown = set(spec.ablated_layers) - set('fc%d' % j for j in range(1, len(spec.head_widths) + 1))
    if unknown:
        errors['model.ablated_layers'] = ['not head layers: %s' % ', '.join(sorted(unknown))]

    if errors:
        raise SpecError(errors)


# Convolutions in the torchvision feature stacks.
BUILTIN_CONV_LAYERS = {'vgg16': 13, 'vgg19': 16, 'alexnet_modified': 5}


def count_weight_bearing_layers(backbone_id):
    if backbone_id in BUILTIN_CONV_LAYERS:
        return BUILTIN_CONV_LAYERS[backbone_id]

    backbone = get_backbone_by_name(backbone_id)(None)
    return sum(1 for module in backbone.features if isinstance(module, nn.Conv2d))


def check_model_spec(spec):
    """
        Everything `build_model` would reject about `spec`, as {field: [messages]}, without loading weights.
        Dotted-path backbones are imported and built once.
    """
    errors = {}
    try:
        _validate_spec(spec)

    except SpecError as e:
        errors.update(e.error_dict)

    try:
        count = count_weight_bearing_layers(spec.backbone_id)

    except SpecError as e:
        errors.update(e.error_dict)
        return errors

    if not 0 <= spec.freeze.freeze_first_n <= count:
        errors['model.freeze.freeze_first_n'] = ['must be within [0, %d] for %s' % (count, spec.backbone_id)]

    return errors


def weights_path_for(spec):
    if spec.weights_path:
        return spec.weights_path

    return os.path.join(cache_dir(), '%s.pth' % spec.backbone_id)


def build_model(spec, seed=None):
    """
        Builds the network described by `spec` and applies its freeze policy.

        With `seed`, all random initialization happens under that seed without touching the global torch RNG.
        Returns (model, ModelSummary).
    """
    _validate_spec(spec)
    builder = get_backbone_by_name(spec.backbone_id)

    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)

        backbone = builder(weights_path_for(spec) if spec.pretrained else None)

        head = OrderedDict()
        in_features = backbone.out_features
        for j, width in enumerate(spec.head_widths, 1):
            name = 'fc%d' % j
            if name in spec.ablated_layers:
                continue

            head[name] = DenseBlock(in_features, int(width), spec.dropout_rate)
            in_features = int(width)

        output = OutputLayer(in_features, spec.num_classes)

    model = LesionNet(spec, _rename_features(backbone.features), backbone.pool, head, output,
                      backbone.weights_digest)
    summary = apply_freeze_policy(model, spec.freeze)
    logger.info('Built %s: %d layers, %s params (%s trainable)', spec.backbone_id, len(summary.layers),
                format(summary.total_params, ','), format(summary.trainable_params, ','))
    return model, summary


def apply_freeze_policy(model, policy):
    """
        Marks the first `freeze_first_n` weight-bearing backbone layers (and, with freeze_backbone_rest, the
        rest of the backbone) non-trainable. Everything else is made trainable.
    """
    layers = model.weight_bearing_backbone_layers()
    if not 0 <= policy.freeze_first_n <= len(layers):
        raise FreezePolicyError('model.freeze.freeze_first_n', 'must be within [0, %d] for %s' % (
            len(layers), model.spec.backbone_id))

    for parameter in model.parameters():
        parameter.requires_grad_(True)

    for i, (name, layer) in enumerate(layers):
        if i < policy.freeze_first_n or policy.freeze_backbone_rest:
            for parameter in layer.parameters():
                parameter.requires_grad_(False)

            logger.debug('Froze %s', name)

    model.freeze_policy = policy
    return summarize(model)


def frozen_parameter_names(model):
    return [name for name, p in model.named_parameters() if not p.requires_grad]


def summarize(model):
    shapes = model.output_shapes()
    layers = []
    for name, layer in model.named_layers():
        parameters = list(layer.parameters())
        layers.append(LayerInfo(name, _kind_of(layer), shapes[name], sum(p.numel() for p in parameters),
                                all(p.requires_grad for p in parameters)))

    total = sum(l.parameter_count for l in layers)
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return ModelSummary(tuple(layers), total, trainable)


def list_removable_head_layers(spec):
    """
        The head layers added on top of the pretrained backbone, in forward order. The output layer is never
        removable.
    """
    return ['fc%d' % j for j in range(1, len(spec.head_widths) + 1) if 'fc%d' % j not in spec.ablated_layers]


def without_head_layer(spec, name):
    if name not in list_removable_head_layers(spec):
        raise AblationError('%s is not a removable head layer of this model' % name)

    return replace(spec, ablated_layers=tuple(spec.ablated_layers) + (name,))


def write_summary_csv(summary, path):
    rows = [[l.name, l.kind, 'x'.join(str(d) for d in l.output_shape), l.parameter_count, l.trainable]
            for l in summary.layers]
    pd.DataFrame(rows, columns=SUMMARY_COLUMNS).to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def export_model(model, directory):
    """
        Writes weights plus the full ModelSpec, so the network can be rebuilt with `load_exported_model`.
    """
    os.makedirs(directory, exist_ok=True)
    torch.save(model.state_dict(), os.path.join(directory, WEIGHTS_FILE))
    with open(os.path.join(directory, SPEC_FILE), 'w', encoding='utf-8') as f:
        json.dump(model.spec.as_dict(), f, indent=2, sort_keys=True)
        f.write('\n')

    return directory


def load_exported_model(directory):
    with open(os.path.join(directory, SPEC_FILE), encoding='utf-8') as f:
        spec = ModelSpec.from_dict(json.load(f))

    model, _ = build_model(replace(spec, pretrained=False))
    model.load_state_dict(torch.load(os.path.join(directory, WEIGHTS_FILE), map_location='cpu', weights_only=True))
    model.spec = spec
    return model
