import numpy as np
import pytest
import torch

from blockprune.errors import ContractViolation, SpecError
from blockprune.gates import (
    ConvGate,
    ConvGateBank,
    ConvGateSpec,
    GateOutput,
    RecurGateBank,
    RecurGateSpec,
    conv_gate_forward,
    recur_gate_forward,
)
from blockprune.netcore import GateMask, LayerShape, build_network, micro_spec
from helpers import (
    np_batchnorm_eval,
    np_conv2d,
    np_lstm_cell_step,
    np_sigmoid,
    zero_module,
)


def test_gate_output_validates_open_interval():
    GateOutput(0.5)
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ContractViolation):
            GateOutput(bad)


def test_conv_gate_spec_validation():
    with pytest.raises(SpecError):
        ConvGateSpec(reduce_channels=0)
    with pytest.raises(SpecError):
        ConvGateSpec(fc_in=7)  # head width is pinned by the pooled channel count


def test_conv_gate_rejects_tiny_inputs():
    with pytest.raises(SpecError):
        ConvGate(LayerShape(8, 2, 2), ConvGateSpec())
    ConvGate(LayerShape(8, 4, 4), ConvGateSpec())  # smallest legal input


def test_conv_gate_zero_parameters_yield_half():
    gate = ConvGate(LayerShape(4, 8, 8), ConvGateSpec())
    zero_module(gate)
    gate.eval()
    marks = conv_gate_forward(gate, torch.randn(5, 4, 8, 8))
    assert torch.all(marks == 0.5)
    gate.train()
    marks = conv_gate_forward(gate, torch.randn(5, 4, 8, 8))
    assert torch.all(marks == 0.5)


def test_conv_gate_deterministic():
    gate = ConvGate(LayerShape(4, 8, 8), ConvGateSpec())
    gate.eval()
    x = torch.randn(3, 4, 8, 8)
    with torch.no_grad():
        assert torch.equal(gate(x), gate(x))


def test_conv_gate_matches_numpy_straightline_oracle():
    torch.manual_seed(3)
    gate = ConvGate(LayerShape(1, 4, 4), ConvGateSpec(reduce_channels=1)).double().eval()
    with torch.no_grad():
        gate.conv1.weight.copy_(torch.arange(9, dtype=torch.float64).reshape(1, 1, 3, 3) / 10)
        gate.conv2.weight.copy_(torch.ones(1, 1, 3, 3, dtype=torch.float64) * 0.2)
        gate.bn1.weight.fill_(1.3)
        gate.bn1.bias.fill_(-0.1)
        gate.bn2.weight.fill_(0.7)
        gate.bn2.bias.fill_(0.05)
        gate.fc.weight.fill_(2.0)
        gate.fc.bias.fill_(-0.3)
    x = torch.linspace(-1, 1, 16, dtype=torch.float64).reshape(1, 1, 4, 4)

    y = np_conv2d(x[0].numpy(), gate.conv1.weight.detach().numpy(), stride=2, pad=1)
    y = np_batchnorm_eval(y, np.zeros(1), np.ones(1), np.array([1.3]), np.array([-0.1]))
    y = np.maximum(y, 0)
    y = np_conv2d(y, gate.conv2.weight.detach().numpy(), stride=2, pad=1)
    y = np_batchnorm_eval(y, np.zeros(1), np.ones(1), np.array([0.7]), np.array([0.05]))
    y = np.maximum(y, 0)
    expected = np_sigmoid(2.0 * y.mean() - 0.3)

    with torch.no_grad():
        got = float(conv_gate_forward(gate, x))
    assert got == pytest.approx(float(expected), abs=1e-9)


def test_recur_gate_zero_parameters_yield_half_everywhere():
    spec = micro_spec(num_blocks=4)
    bank = RecurGateBank(spec, RecurGateSpec())
    zero_module(bank)
    bank.eval()
    x = torch.randn(3, 8, 16, 16)
    state = bank.begin(3, x.device)
    for l in range(4):
        marks, state = recur_gate_forward(bank, l, x, state)
        assert torch.all(marks == 0.5)


def test_recur_gate_block_one_mark_is_causal():
    spec = micro_spec(num_blocks=4)
    net = build_network(spec, seed=9, gate="recur")
    net.eval()
    mask = GateMask.initial(spec)
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        _, marks_before = net(x, mask)
        # permuting later blocks must not touch the first mark
        w2 = net.blocks[2].conv1.weight.detach().clone()
        net.blocks[2].conv1.weight.copy_(net.blocks[3].conv1.weight)
        net.blocks[3].conv1.weight.copy_(w2)
        _, marks_after = net(x, mask)
    assert torch.equal(marks_before[0], marks_after[0])
    assert not torch.equal(marks_before[3], marks_after[3])


def test_recur_gate_hidden_state_reset_between_passes():
    spec = micro_spec(num_blocks=3)
    net = build_network(spec, seed=4, gate="recur")
    net.eval()
    mask = GateMask.initial(spec)
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        _, first = net(x, mask)
        _, second = net(x, mask)
    assert all(torch.equal(first[l], second[l]) for l in first)


def test_recur_gate_rejects_foreign_hidden_state():
    spec = micro_spec(num_blocks=2)
    bank = RecurGateBank(spec, RecurGateSpec(hidden_dim=10))
    with pytest.raises(ContractViolation):
        bank.step(0, torch.randn(2, 8, 16, 16), (torch.zeros(2, 7), torch.zeros(2, 7)))


def test_recur_gate_matches_numpy_unroll_oracle():
    spec = micro_spec(num_blocks=2, channels=2, image_size=4)
    gspec = RecurGateSpec(embed_dim=2, hidden_dim=3)
    bank = RecurGateBank(spec, gspec).double().eval()
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for p in bank.parameters():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) - 0.5)
    x0 = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    x1 = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)

    state = bank.begin(1, x0.device)
    m0, state = recur_gate_forward(bank, 0, x0, state)
    m1, _ = recur_gate_forward(bank, 1, x1, state)

    def embed(l, x):
        conv = bank.embeds[l]
        pooled = x[0].numpy().mean(axis=(1, 2))
        return conv.weight.detach().numpy()[:, :, 0, 0] @ pooled + conv.bias.detach().numpy()

    h = np.zeros(3)
    c = np.zeros(3)
    w_ih = bank.cell.weight_ih.detach().numpy()
    w_hh = bank.cell.weight_hh.detach().numpy()
    b_ih = bank.cell.bias_ih.detach().numpy()
    b_hh = bank.cell.bias_hh.detach().numpy()
    head_w = bank.head.weight.detach().numpy()[0]
    head_b = float(bank.head.bias.detach()[0])
    h, c = np_lstm_cell_step(embed(0, x0), h, c, w_ih, w_hh, b_ih, b_hh)
    want0 = np_sigmoid(head_w @ h + head_b)
    h, c = np_lstm_cell_step(embed(1, x1), h, c, w_ih, w_hh, b_ih, b_hh)
    want1 = np_sigmoid(head_w @ h + head_b)

    assert float(m0) == pytest.approx(float(want0), abs=1e-9)
    assert float(m1) == pytest.approx(float(want1), abs=1e-9)


def _finite_difference_check(params: list[torch.Tensor], forward, rel_tol: float = 1e-3):
    """Central differences on a handful of coordinates vs autograd."""
    out = forward()
    grads = torch.autograd.grad(out, params)
    eps = 1e-6
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 3)):
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(forward())
                flat[i] = orig - eps
                down = float(forward())
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = float(g.reshape(-1)[i])
            assert an == pytest.approx(fd, rel=rel_tol, abs=1e-7)


def test_conv_gate_gradients_match_finite_differences():
    torch.manual_seed(0)
    gate = ConvGate(LayerShape(2, 4, 4), ConvGateSpec(reduce_channels=2)).double()
    gate.eval()  # fixed statistics so the loss is a clean function of parameters
    x = torch.randn(2, 2, 4, 4, dtype=torch.float64)
    params = [gate.conv1.weight, gate.fc.weight, gate.fc.bias]
    _finite_difference_check(params, lambda: gate(x).sum())


def test_recur_gate_gradients_match_finite_differences():
    torch.manual_seed(1)
    spec = micro_spec(num_blocks=2, channels=2, image_size=4)
    bank = RecurGateBank(spec, RecurGateSpec(embed_dim=2, hidden_dim=3)).double()
    bank.eval()
    x = torch.randn(2, 2, 4, 4, dtype=torch.float64)

    def forward():
        state = bank.begin(2, x.device)
        m0, state = bank.step(0, x, state)
        m1, _ = bank.step(1, x, state)
        return (m0 + 2 * m1).sum()

    params = [bank.cell.weight_ih, bank.head.weight, bank.embeds[0].weight]
    _finite_difference_check(params, forward)


def test_pruned_blocks_receive_no_gate_gradient():
    spec = micro_spec(num_blocks=3)
    net = build_network(spec, seed=2)
    mask = GateMask.initial(spec)
    mask.prune(1)
    net.train()
    logits, marks = net(torch.randn(2, 3, 16, 16), mask)
    assert 1 not in marks
    logits.sum().backward()
    assert net.gates.gates[1].fc.weight.grad is None
    assert net.gates.gates[0].fc.weight.grad is not None


def test_conv_gate_bank_step_is_stateless():
    spec = micro_spec(num_blocks=2)
    bank = ConvGateBank(spec, ConvGateSpec())
    bank.eval()
    assert bank.begin(4, torch.device("cpu")) is None
    x = torch.randn(4, 8, 16, 16)
    with torch.no_grad():
        m, state = bank.step(0, x, None)
    assert state is None
    assert m.shape == (4,)
