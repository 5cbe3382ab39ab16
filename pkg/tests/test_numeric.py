import pytest
import torch

from src.core.errors import ConfigurationError, TrainingError
from src.numeric import (
    Activation,
    DenseNet,
    OptimizerState,
    check_finite,
    finite_difference_check,
    forward,
    gradients,
    group_softmax,
    optimizer_step,
    stop_gradient,
    trainable,
)


def _net(seed: int = 0, **kwargs) -> DenseNet:
    return DenseNet([2, 3, 2], generator=torch.Generator().manual_seed(seed), **kwargs).double()


def test_dense_net_matches_hand_matrix_product() -> None:
    net = _net()
    x = torch.tensor([0.5, -0.5], dtype=torch.float64)
    first, second = net.linears
    hidden = [
        sum(first.weight[i, j].item() * x[j].item() for j in range(2)) + first.bias[i].item() for i in range(3)
    ]
    hidden = [h * torch.tanh(torch.nn.functional.softplus(torch.tensor(h))).item() for h in hidden]
    expected = [sum(second.weight[i, j].item() * hidden[j] for j in range(3)) + second.bias[i].item() for i in range(2)]

    assert forward(net, x).tolist() == pytest.approx(expected, abs=1e-12)


def test_equally_seeded_nets_are_identical() -> None:
    a, b = _net(3), _net(3)
    for pa, pb in zip(a.parameters(), b.parameters(), strict=True):
        assert torch.equal(pa, pb)


def test_forward_rejects_wrong_width() -> None:
    with pytest.raises(ConfigurationError):
        forward(_net(), torch.zeros(3, dtype=torch.float64))


def test_group_softmax_output_layer_gives_simplices() -> None:
    net = DenseNet([3, 4, 8], output_activation=Activation.SOFTMAX_GROUP, group_size=4, generator=torch.Generator().manual_seed(1))
    out = net(torch.randn(5, 3, generator=torch.Generator().manual_seed(2)))

    assert torch.allclose(out.reshape(5, 2, 4).sum(-1), torch.ones(5, 2), atol=1e-6)
    assert (out >= 0).all()


def test_group_softmax_rejects_indivisible_width() -> None:
    with pytest.raises(ConfigurationError):
        group_softmax(torch.zeros(6), 4)


def test_layers_describe_the_network() -> None:
    layers = _net().layers

    assert [(spec.in_features, spec.out_features) for spec in layers] == [(2, 3), (3, 2)]
    assert [spec.activation for spec in layers] == [Activation.MISH, Activation.LINEAR]


def test_gradients_match_finite_differences() -> None:
    net = _net(4)
    x = torch.randn(6, 2, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

    result = finite_difference_check(dict(net.named_parameters()), lambda: (net(x) ** 2).sum(), generator=torch.Generator().manual_seed(6))

    assert result.checked > 0
    assert result.max_relative_error <= 1e-3


def test_stop_gradient_blocks_the_graph() -> None:
    net = _net()
    x = torch.ones(2, dtype=torch.float64)

    grads = gradients(net, lambda: stop_gradient(net(x)).sum() + 0 * next(net.parameters()).sum())

    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_gradients_reject_non_scalar_loss() -> None:
    net = _net()
    with pytest.raises(ConfigurationError):
        gradients(net, lambda: net(torch.ones(2, dtype=torch.float64)))


def test_non_finite_loss_raises_training_error_with_context() -> None:
    net = _net()
    with pytest.raises(TrainingError) as info:
        gradients(net, lambda: net(torch.ones(2, dtype=torch.float64)).sum() * float('nan'), {'update': 7})

    assert info.value.context['update'] == 7
    assert 'update=7' in str(info.value)


def test_check_finite_accepts_finite_values() -> None:
    check_finite('x', torch.ones(3))
    with pytest.raises(TrainingError):
        check_finite('x', torch.tensor([1.0, float('inf')]))


def test_optimizer_step_reduces_a_quadratic() -> None:
    target = torch.tensor([1.0, -2.0])
    params = {'w': torch.zeros(2, requires_grad=True)}
    state = OptimizerState(params, lr=0.1)

    def loss() -> torch.Tensor:
        return ((params['w'] - target) ** 2).sum()

    start = float(loss())
    for _ in range(500):
        optimizer_step(state, params, gradients(params, loss))

    assert float(loss()) < start * 1e-2
    assert state.step_count == 500
    name, first, second = next(state.moments())
    assert name == 'w'
    assert first.shape == second.shape == (2,)


def test_optimizer_step_clips_and_reports_norm() -> None:
    params = {'w': torch.zeros(2, requires_grad=True)}
    state = OptimizerState(params)

    norm = optimizer_step(state, params, {'w': torch.tensor([3.0, 4.0])}, clip_norm=1.0)

    assert norm == pytest.approx(5.0)


def test_optimizer_step_rejects_mismatched_gradients() -> None:
    params = {'w': torch.zeros(2, requires_grad=True)}
    state = OptimizerState(params)

    with pytest.raises(ConfigurationError):
        optimizer_step(state, params, {'w': torch.zeros(3)})
    with pytest.raises(ConfigurationError):
        optimizer_step(state, {'v': params['w']}, {'v': torch.zeros(2)})


def test_trainable_excludes_prefixes() -> None:
    module = torch.nn.ModuleDict({'online': torch.nn.Linear(2, 2), 'target_copy': torch.nn.Linear(2, 2)})

    names = trainable(module, exclude=('target_',))

    assert set(names) == {'online.weight', 'online.bias'}


def test_zero_gradient_leaves_parameters_in_place() -> None:
    params = {'w': torch.tensor([0.5, -1.5], requires_grad=True)}
    state = OptimizerState(params, lr=0.1)

    optimizer_step(state, params, {'w': torch.zeros(2)})

    assert params['w'].tolist() == [0.5, -1.5]


def test_first_adam_step_moves_by_the_learning_rate() -> None:
    params = {'w': torch.zeros(1, dtype=torch.float64, requires_grad=True)}
    state = OptimizerState(params, lr=0.1)

    optimizer_step(state, params, {'w': torch.ones(1, dtype=torch.float64)})

    assert float(params['w']) == pytest.approx(-0.1)
    assert state.step_count == 1
