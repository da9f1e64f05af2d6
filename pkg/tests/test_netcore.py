import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from blockprune.errors import ContractViolation, SpecError
from blockprune.netcore import (
    BlockSpec,
    BlockState,
    GateMask,
    LayerShape,
    NetworkSpec,
    Shortcut,
    build_network,
    cifar_resnet_spec,
    gated_block_step,
    micro_spec,
)
from helpers import params_vector, staged_spec, zero_module


class _StubBlock(torch.nn.Module):
    """Constant-output block for scalar arithmetic checks."""

    def __init__(self, value: float, spec: BlockSpec):
        super().__init__()
        self.spec = spec
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


def _identity_stub(value: float) -> _StubBlock:
    shape = LayerShape(1, 1, 1)
    return _StubBlock(value, BlockSpec(index=0, in_shape=shape, out_shape=shape))


def _downsample_stub(value: float) -> _StubBlock:
    spec = BlockSpec(
        index=0,
        in_shape=LayerShape(1, 2, 2),
        out_shape=LayerShape(2, 1, 1),
        stride=2,
        shortcut=Shortcut.PAD_DOWNSAMPLE,
    )
    return _StubBlock(value, spec)


# ---------------------------------------------------------------------------
# structure types


@given(st.integers(max_value=0))
def test_layer_shape_rejects_nonpositive(bad):
    with pytest.raises(SpecError):
        LayerShape(bad, 4, 4)


def test_block_spec_stride_shape_consistency():
    with pytest.raises(SpecError):
        BlockSpec(
            index=0,
            in_shape=LayerShape(8, 16, 16),
            out_shape=LayerShape(8, 16, 16),
            stride=2,
        )
    with pytest.raises(SpecError):
        BlockSpec(
            index=0,
            in_shape=LayerShape(8, 16, 16),
            out_shape=LayerShape(16, 8, 8),
            stride=2,
            shortcut=Shortcut.IDENTITY,
        )


def test_network_spec_names_offending_pair():
    a = BlockSpec(index=0, in_shape=LayerShape(8, 16, 16), out_shape=LayerShape(8, 16, 16))
    b = BlockSpec(index=1, in_shape=LayerShape(16, 16, 16), out_shape=LayerShape(16, 16, 16))
    with pytest.raises(SpecError, match="blocks 0 -> 1"):
        NetworkSpec((a, b), 4, LayerShape(3, 16, 16))


def test_cifar_spec_block_counts():
    assert cifar_resnet_spec(32).num_blocks == 15
    assert cifar_resnet_spec(56).num_blocks == 27
    assert cifar_resnet_spec(110).num_blocks == 54
    assert cifar_resnet_spec(32).downsample_indices() == (5, 10)


def test_single_block_network():
    shape = LayerShape(4, 8, 8)
    spec = NetworkSpec(
        (BlockSpec(index=0, in_shape=shape, out_shape=shape),), 2, LayerShape(3, 8, 8)
    )
    net = build_network(spec, seed=1)
    assert len(net.blocks) == 1


def test_stage_numbers():
    spec = cifar_resnet_spec(32)
    assert spec.stage_of(0) == 1
    assert spec.stage_of(4) == 1
    assert spec.stage_of(5) == 2
    assert spec.stage_of(10) == 3
    assert spec.stage_of(14) == 3


def test_build_determinism_same_seed():
    spec = micro_spec()
    a = build_network(spec, seed=42)
    b = build_network(spec, seed=42)
    assert torch.equal(params_vector(a), params_vector(b))
    c = build_network(spec, seed=43)
    assert not torch.equal(params_vector(a), params_vector(c))


# ---------------------------------------------------------------------------
# gated step semantics


def test_gated_step_scalar_arithmetic():
    block = _identity_stub(2.0)
    x = torch.full((1, 1, 1, 1), 4.0)
    assert gated_block_step(block, x, torch.tensor([1.0]), BlockState.ACTIVE).item() == 2.0
    assert gated_block_step(block, x, torch.tensor([0.5]), BlockState.ACTIVE).item() == 3.0
    assert gated_block_step(block, x, None, BlockState.PRUNED) is x
    assert gated_block_step(block, x, None, BlockState.FIXED).item() == 2.0


def test_gated_step_pruned_downsample_is_contract_violation():
    block = _downsample_stub(2.0)
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ContractViolation):
        gated_block_step(block, x, None, BlockState.PRUNED)


def test_gated_step_active_requires_mark():
    block = _identity_stub(2.0)
    with pytest.raises(ContractViolation):
        gated_block_step(block, torch.zeros(1, 1, 1, 1), None, BlockState.ACTIVE)


# ---------------------------------------------------------------------------
# mask semantics


def test_initial_mask_exempts_downsample_blocks():
    spec = staged_spec()
    mask = GateMask.initial(spec)
    assert mask.exempt == {2, 4}
    assert mask.state(2) is BlockState.FIXED
    assert mask.active_indices() == (0, 1, 3, 5)


def test_mask_prune_is_absorbing_and_guards_exempt():
    mask = GateMask.initial(staged_spec())
    mask.prune(0)
    assert mask.state(0) is BlockState.PRUNED
    with pytest.raises(ContractViolation):
        mask.prune(0)
    with pytest.raises(ContractViolation):
        mask.prune(2)
    mask.fix_unpruned()
    assert mask.state(0) is BlockState.PRUNED
    assert mask.state(1) is BlockState.FIXED
    assert mask.all_settled()


def test_mask_construction_rejects_pruned_exempt():
    states = [BlockState.PRUNED, BlockState.ACTIVE]
    with pytest.raises(SpecError):
        GateMask(states, frozenset({0}))


# ---------------------------------------------------------------------------
# forward semantics


def test_forward_all_fixed_matches_plain_reference(micro):
    spec, net, mask = micro
    mask.fix_unpruned()
    net.eval()
    x = torch.randn(4, 3, 16, 16)
    with torch.no_grad():
        logits, marks = net(x, mask)
        h = net.stem(x)
        for block in net.blocks:
            h = block(h)
        ref = net.classifier(h)
    assert marks == {}
    assert float((logits - ref).abs().max()) <= 1e-6


def test_forward_all_pruned_reduces_to_stem_and_classifier(micro):
    spec, net, mask = micro
    for l in range(spec.num_blocks):
        mask.prune(l)
    net.eval()
    x = torch.randn(3, 3, 16, 16)
    with torch.no_grad():
        logits, marks = net(x, mask)
        ref = net.classifier(net.stem(x))
    assert marks == {}
    assert torch.equal(logits, ref)


def test_forward_forced_half_marks_matches_straightline_blend(micro):
    spec, net, mask = micro
    zero_module(net.gates)  # sigmoid(0) = 0.5 for every gate
    net.eval()
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        logits, marks = net(x, mask)
        h = net.stem(x)
        for block in net.blocks:
            h = block(h) * 0.5 + h * 0.5
        ref = net.classifier(h)
    assert all(torch.all(m == 0.5) for m in marks.values())
    assert float((logits - ref).abs().max()) <= 1e-6


def test_forward_marks_reported_only_for_active_blocks(micro):
    spec, net, mask = micro
    mask.prune(0)
    mask.prune(3)
    net.eval()
    with torch.no_grad():
        _, marks = net(torch.randn(2, 3, 16, 16), mask)
    assert sorted(marks) == [1, 2, 4, 5, 6, 7, 8]


def test_marks_strictly_inside_unit_interval(micro):
    spec, net, mask = micro
    net.eval()
    with torch.no_grad():
        _, marks = net(torch.randn(8, 3, 16, 16), mask)
    for m in marks.values():
        assert torch.all(m > 0) and torch.all(m < 1)


def test_pruned_block_parameters_do_not_affect_forward(micro):
    spec, net, mask = micro
    mask.prune(4)
    net.eval()
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        before, _ = net(x, mask)
        net.blocks[4].conv1.weight.add_(100.0)
        net.gates.gates[4].fc.bias.add_(5.0)
        after, _ = net(x, mask)
    assert torch.equal(before, after)


def test_forward_determinism_bitwise(micro):
    spec, net, mask = micro
    net.eval()
    x = torch.randn(4, 3, 16, 16)
    with torch.no_grad():
        a, marks_a = net(x, mask)
        b, marks_b = net(x, mask)
    assert torch.equal(a, b)
    assert all(torch.equal(marks_a[l], marks_b[l]) for l in marks_a)


def test_batch_invariance_fixed_statistics(micro):
    spec, net, mask = micro
    net = net.double().eval()
    x = torch.randn(10, 3, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        full, _ = net(x, mask)
        singles = torch.cat([net(x[i : i + 1], mask)[0] for i in range(10)])
    assert float((full - singles).abs().max()) <= 1e-6


def test_forward_rejects_wrong_input_shape(micro):
    spec, net, mask = micro
    with pytest.raises(SpecError):
        net(torch.randn(1, 3, 8, 8), mask)


def test_forward_rejects_wrong_mask_length(micro):
    spec, net, _ = micro
    other = GateMask.initial(micro_spec(num_blocks=4))
    with pytest.raises(SpecError):
        net(torch.randn(1, 3, 16, 16), other)


def test_forward_trace_records_io(micro):
    spec, net, mask = micro
    mask.prune(2)
    net.eval()
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        logits, _, trace = net(x, mask, trace=True)
    assert len(trace.block_inputs) == spec.num_blocks
    assert trace.block_outputs[2] is None
    assert torch.equal(trace.block_inputs[3], trace.block_inputs[2])  # pruned block is a pass-through
    assert trace.logits.shape == (2, spec.num_classes)
    assert torch.equal(trace.logits, logits)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**63 - 1))
def test_build_is_seed_deterministic(seed):
    spec = micro_spec(num_blocks=2)
    a = build_network(spec, seed)
    b = build_network(spec, seed)
    assert torch.equal(params_vector(a), params_vector(b))
