import hashlib
import math
from dataclasses import replace

import pandas as pd
import pytest
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from lesiontl.backbone import get_backbone_by_name
from lesiontl.errors import AblationError, FreezePolicyError, SpecError, WeightLoadError
from lesiontl.model import BUILTIN_CONV_LAYERS, FreezePolicy, ModelSpec, apply_freeze_policy, build_model, \
    check_model_spec, count_weight_bearing_layers, export_model, frozen_parameter_names, list_removable_head_layers, \
    load_exported_model, without_head_layer, write_summary_csv
from lesiontl.training import make_optimizer
from tests.conftest import GRADCHECK_BACKBONE, TINY_BACKBONE
from tests.tiny import tiny_backbone

VGG16_CONVS = [64, 64, 'M', 128, 128, 'M', 256, 256, 256, 'M', 512, 512, 512, 'M', 512, 512, 512, 'M']
VGG19_CONVS = [64, 64, 'M', 128, 128, 'M', 256, 256, 256, 256, 'M', 512, 512, 512, 512, 'M', 512, 512, 512, 512,
               'M']
# (kernel, out_channels) of AlexNet's five convolutions.
ALEXNET_CONVS = [(11, 64), (5, 192), (3, 384), (3, 256), (3, 256)]


def conv_params(k, c_in, c_out):
    return k * k * c_in * c_out + c_out


def fc_params(n_in, n_out):
    return n_in * n_out + n_out


def head_params(n_in, head_widths, num_classes=2):
    total = 0
    for width in head_widths:
        total += fc_params(n_in, width)
        n_in = width

    return total + fc_params(n_in, num_classes)


def vgg_conv_param_list(layout):
    params = []
    c_in = 3
    for c_out in layout:
        if c_out != 'M':
            params.append(conv_params(3, c_in, c_out))
            c_in = c_out

    return params


def test_tiny_summary_layout(tiny_spec):
    model, summary = build_model(tiny_spec, seed=0)

    assert summary.names == ['conv1_1', 'pool1', 'conv2_1', 'pool2', 'conv3_1', 'pool3', 'conv4_1', 'pool4',
                             'avgpool', 'flatten', 'fc1', 'output']
    assert summary.layer('pool4').output_shape == (8, 14, 14)
    assert summary.layer('flatten').output_shape == (32,)
    assert summary.layer('output').output_shape == (2,)
    assert summary.layer('fc1').kind == 'dense'
    assert summary.layers[-1].kind == 'output'


def test_tiny_parameter_count_oracle(tiny_spec):
    _, summary = build_model(tiny_spec, seed=0)
    convs = [conv_params(3, 3, 4), conv_params(3, 4, 4), conv_params(3, 4, 8), conv_params(3, 8, 8)]

    assert summary.total_params == sum(convs) + head_params(32, [16])
    assert summary.trainable_params == summary.total_params - convs[0]


def test_seeded_build_is_reproducible(tiny_spec):
    first, _ = build_model(tiny_spec, seed=11)
    second, _ = build_model(tiny_spec, seed=11)
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name


def test_output_is_a_probability_vector(tiny_spec):
    model, _ = build_model(replace(tiny_spec, dropout_rate=0.0), seed=0)
    model.eval()
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(100):
            probabilities = model(torch.randn(4, 3, 32, 32, generator=generator) * 3)
            assert torch.all(probabilities >= 0) and torch.all(probabilities <= 1)
            assert torch.allclose(probabilities.sum(dim=1), torch.ones(4), atol=1e-6)


def test_repeated_forward_passes_are_bit_identical(tiny_spec):
    model, _ = build_model(replace(tiny_spec, dropout_rate=0.5), seed=0)
    model.eval()
    x = torch.randn(3, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        assert torch.equal(model(x), model(x))


def test_untrained_loss_is_close_to_ln2(tiny_spec):
    model, _ = build_model(replace(tiny_spec, head_widths=(64, 64), dropout_rate=0.5), seed=0)
    model.eval()
    x = torch.randn(16, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    targets = torch.tensor([0, 1] * 8)
    with torch.no_grad():
        loss = F.cross_entropy(model.logits(x), targets).item()

    assert abs(loss - math.log(2)) < 0.1


def test_empty_head_is_a_spec_error(tiny_spec):
    with pytest.raises(SpecError) as e:
        build_model(replace(tiny_spec, head_widths=()))

    assert 'model.head_widths' in e.value.error_dict


def test_unknown_backbone():
    with pytest.raises(SpecError):
        get_backbone_by_name('resnet50')

    with pytest.raises(SpecError):
        get_backbone_by_name('tests.tiny.no_such_builder')


def test_freeze_policy_counts(tiny_spec):
    model, summary = build_model(tiny_spec, seed=0)

    summary = apply_freeze_policy(model, FreezePolicy(freeze_first_n=0))
    assert summary.trainable_params == summary.total_params
    assert frozen_parameter_names(model) == []

    summary = apply_freeze_policy(model, FreezePolicy(freeze_first_n=3))
    frozen = [l.name for l in summary.layers if l.parameter_count and not l.trainable]
    assert frozen == ['conv1_1', 'conv2_1', 'conv3_1']
    assert summary.layer('conv4_1').trainable

    summary = apply_freeze_policy(model, FreezePolicy(freeze_first_n=1, freeze_backbone_rest=True))
    frozen = [l.name for l in summary.layers if l.parameter_count and not l.trainable]
    assert frozen == ['conv1_1', 'conv2_1', 'conv3_1', 'conv4_1']
    assert summary.layer('fc1').trainable and summary.layer('output').trainable


def test_freeze_policy_beyond_layer_count(tiny_spec):
    with pytest.raises(FreezePolicyError) as e:
        build_model(replace(tiny_spec, freeze=FreezePolicy(freeze_first_n=5)))

    assert e.value.exit_code == 2


def test_frozen_weights_survive_optimization(tiny_spec):
    model, _ = build_model(replace(tiny_spec, freeze=FreezePolicy(freeze_first_n=3), dropout_rate=0.5), seed=0)
    before = {name: p.detach().clone() for name, p in model.named_parameters()}
    frozen = set(frozen_parameter_names(model))
    optimizer = make_optimizer([p for p in model.parameters() if p.requires_grad], 'adam', 1e-2)
    generator = torch.Generator().manual_seed(0)

    model.train()
    for _ in range(50):
        x = torch.randn(4, 3, 32, 32, generator=generator)
        y = torch.randint(0, 2, (4,), generator=generator)
        optimizer.zero_grad()
        F.cross_entropy(model.logits(x), y).backward()
        optimizer.step()

    for name, p in model.named_parameters():
        if name in frozen:
            assert torch.equal(p, before[name]), name

    assert not torch.equal(model.output.linear.weight, before['output.linear.weight'])
    assert not torch.equal(dict(model.named_parameters())['backbone.conv4_1.conv.weight'],
                           before['backbone.conv4_1.conv.weight'])


def test_gradients_match_central_differences():
    spec = ModelSpec(GRADCHECK_BACKBONE, pretrained=False, head_widths=(4,), dropout_rate=0.0, input_size=8,
                     freeze=FreezePolicy(freeze_first_n=0))
    model, _ = build_model(spec, seed=3)
    model.double().eval()
    generator = torch.Generator().manual_seed(5)
    x = torch.randn(3, 3, 8, 8, generator=generator, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    params = {name: p.detach().clone().requires_grad_(True) for name, p in model.named_parameters()}

    def loss_of(values):
        return F.nll_loss(torch.log(functional_call(model, values, (x,))), y)

    grads = torch.autograd.grad(loss_of(params), list(params.values()))
    step = 1e-4
    with torch.no_grad():
        for (name, p), analytic in zip(params.items(), grads):
            flat = p.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                upper = loss_of(params).item()
                flat[i] = original - step
                lower = loss_of(params).item()
                flat[i] = original
                numeric = (upper - lower) / (2 * step)
                a = analytic.view(-1)[i].item()
                assert abs(a - numeric) <= 1e-4 * max(abs(a), abs(numeric)) + 1e-8, (name, i, a, numeric)


def test_removable_head_layers():
    assert list_removable_head_layers(ModelSpec('vgg16')) == ['fc1', 'fc2']
    assert list_removable_head_layers(ModelSpec('vgg16', head_widths=(256,))) == ['fc1']


def test_ablated_model_has_one_layer_fewer(tiny_spec):
    spec = replace(tiny_spec, head_widths=(16, 8))
    _, baseline = build_model(spec, seed=0)

    for name in list_removable_head_layers(spec):
        ablated_spec = without_head_layer(spec, name)
        model, summary = build_model(ablated_spec, seed=0)
        assert len(summary.layers) == len(baseline.layers) - 1
        assert name not in summary.names
        assert summary.layer('output').output_shape == (2,)
        assert list_removable_head_layers(ablated_spec) == [n for n in ['fc1', 'fc2'] if n != name]

    _, restored = build_model(replace(without_head_layer(spec, 'fc1'), ablated_layers=()), seed=0)
    assert restored == baseline


def test_single_head_layer_can_be_ablated(tiny_spec):
    model, summary = build_model(without_head_layer(tiny_spec, 'fc1'), seed=0)
    assert summary.names[-2:] == ['flatten', 'output']
    assert model(torch.zeros(1, 3, 32, 32)).shape == (1, 2)
    assert list_removable_head_layers(model.spec) == []


def test_output_layer_is_not_removable(tiny_spec):
    with pytest.raises(AblationError):
        without_head_layer(tiny_spec, 'output')


def test_summary_csv(tiny_spec, tmp_path):
    _, summary = build_model(tiny_spec, seed=0)
    frame = pd.read_csv(write_summary_csv(summary, str(tmp_path / 'summary.csv')), dtype={'output_shape': str})

    assert list(frame.columns) == ['name', 'kind', 'output_shape', 'params', 'trainable']
    assert frame['name'].tolist() == summary.names
    assert frame.set_index('name').loc['pool4', 'output_shape'] == '8x14x14'
    assert frame['params'].sum() == summary.total_params


def test_export_round_trip(tiny_spec, tmp_path):
    model, _ = build_model(replace(tiny_spec, head_widths=(8, 4)), seed=4)
    model.eval()
    directory = export_model(model, str(tmp_path / 'model'))
    loaded = load_exported_model(directory)
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))

    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))

    assert loaded.spec == model.spec


def test_pretrained_weights_are_loaded_and_digested(tiny_spec, tmp_path):
    source = tiny_backbone()
    path = str(tmp_path / 'tiny.pth')
    torch.save(nn.ModuleDict({'features': source.features}).state_dict(), path)

    model, _ = build_model(replace(tiny_spec, pretrained=True, weights_path=path), seed=0)

    with open(path, 'rb') as f:
        assert model.weights_digest == hashlib.sha256(f.read()).hexdigest()

    assert torch.equal(model.backbone.conv1_1.conv.weight, source.features[0].weight)


def test_missing_pretrained_weights(tiny_spec, tmp_path):
    with pytest.raises(WeightLoadError) as e:
        build_model(replace(tiny_spec, pretrained=True, weights_path=str(tmp_path / 'absent.pth')))

    assert e.value.exit_code == 3


def test_weights_default_to_cache_dir(tiny_spec, tmp_path, monkeypatch):
    monkeypatch.setenv('LESIONTL_CACHE', str(tmp_path))
    with pytest.raises(WeightLoadError) as e:
        build_model(replace(tiny_spec, pretrained=True))

    assert str(tmp_path) in str(e.value)


@pytest.mark.slow
@pytest.mark.parametrize('backbone_id, layout', [('vgg16', VGG16_CONVS), ('vgg19', VGG19_CONVS)])
def test_vgg_parameter_count_oracle(backbone_id, layout):
    model, summary = build_model(ModelSpec(backbone_id, pretrained=False), seed=0)
    convs = vgg_conv_param_list(layout)
    total = sum(convs) + head_params(512 * 7 * 7, [4096, 4096])

    assert summary.total_params == total
    assert summary.trainable_params == total - sum(convs[:3])
    assert summary.layer('output').output_shape == (2,)
    assert [l.name for l in summary.layers if l.parameter_count and not l.trainable] == \
        ['conv1_1', 'conv1_2', 'conv2_1']


@pytest.mark.slow
def test_alexnet_parameter_count_oracle():
    _, summary = build_model(ModelSpec('alexnet_modified', pretrained=False), seed=0)
    convs = []
    c_in = 3
    for k, c_out in ALEXNET_CONVS:
        convs.append(conv_params(k, c_in, c_out))
        c_in = c_out

    assert summary.total_params == sum(convs) + head_params(256 * 6 * 6, [4096, 4096])
    assert summary.layer('flatten').output_shape == (256 * 6 * 6,)


@pytest.mark.slow
@pytest.mark.parametrize('backbone_id', sorted(BUILTIN_CONV_LAYERS))
def test_builtin_conv_counts_match_the_networks(backbone_id):
    features = get_backbone_by_name(backbone_id)(None).features
    assert sum(1 for m in features if isinstance(m, nn.Conv2d)) == BUILTIN_CONV_LAYERS[backbone_id]


def test_check_model_spec_collects_every_problem(tiny_spec):
    assert count_weight_bearing_layers(TINY_BACKBONE) == 4
    assert check_model_spec(tiny_spec) == {}
    assert check_model_spec(replace(tiny_spec, backbone_id='vgg19', freeze=FreezePolicy(freeze_first_n=17))) == \
        {'model.freeze.freeze_first_n': ['must be within [0, 16] for vgg19']}

    errors = check_model_spec(replace(tiny_spec, backbone_id='tests.tiny.no_such_backbone', head_widths=()))
    assert set(errors) == {'model.backbone_id', 'model.head_widths'}


@pytest.mark.slow
@pytest.mark.parametrize('backbone_id', ['vgg16', 'vgg19', 'alexnet_modified'])
def test_full_architectures_emit_probabilities(backbone_id):
    model, _ = build_model(ModelSpec(backbone_id, pretrained=False, dropout_rate=0.0), seed=0)
    model.eval()
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(100):
            probabilities = model(torch.randn(2, 3, 64, 64, generator=generator))
            assert torch.all(probabilities >= 0) and torch.all(probabilities <= 1)
            assert torch.allclose(probabilities.sum(dim=1), torch.ones(2, dtype=probabilities.dtype), atol=1e-6)

        x = torch.randn(8, 3, 64, 64, generator=generator)
        loss = F.cross_entropy(model.logits(x), torch.tensor([0, 1] * 4)).item()

    assert abs(loss - math.log(2)) < 0.1
