import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmseg.attention import ChannelAttention, SCAUnit, SpatialAttention

torch.manual_seed(0)


def rand(*shape):
    g = torch.Generator().manual_seed(sum(shape) * 7919)
    return torch.randn(*shape, generator=g)


class TestSpatialAttention:
    def test_zero_input_gives_zero_output(self):
        sa = SpatialAttention()
        x = torch.zeros(2, 4, 8, 8)
        assert torch.equal(sa(x), x)

    def test_shape_preserved(self):
        sa = SpatialAttention()
        x = rand(2, 8, 16, 16)
        assert sa(x).shape == x.shape

    def test_gate_open_interval(self):
        sa = SpatialAttention()
        g = sa.gate(rand(2, 4, 8, 8))
        assert g.shape == (2, 1, 8, 8)
        assert (g > 0).all() and (g < 1).all()

    def test_matches_independent_recomputation(self):
        # rebuild the gate by hand from the module's own conv weights
        sa = SpatialAttention(kernel_size=3)
        x = rand(2, 5, 9, 9)
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.max(dim=1, keepdim=True).values], dim=1)
        gate = torch.sigmoid(torch.nn.functional.conv2d(pooled, sa.conv.weight, padding=1))
        assert torch.equal(sa(x), x * gate)
        assert (sa(x).abs() <= x.abs() + 1e-7).all()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            SpatialAttention(kernel_size=4)

    def test_non_rank4_rejected(self):
        with pytest.raises(ValueError):
            SpatialAttention()(torch.zeros(3, 8, 8))


class TestChannelAttention:
    def test_zero_input_gives_zero_output(self):
        ca = ChannelAttention(16)
        x = torch.zeros(1, 16, 8, 8)
        assert torch.equal(ca(x), x)

    def test_shape_preserved(self):
        ca = ChannelAttention(16)
        x = rand(1, 16, 8, 8)
        assert ca(x).shape == (1, 16, 8, 8)

    def test_gate_open_interval_and_per_channel(self):
        ca = ChannelAttention(8)
        g = ca.gate(rand(3, 8, 5, 5))
        assert g.shape == (3, 8, 1, 1)
        assert (g > 0).all() and (g < 1).all()

    def test_batch_permutation_equivariant(self):
        ca = ChannelAttention(6)
        x = rand(4, 6, 7, 7)
        perm = torch.tensor([2, 0, 3, 1])
        assert torch.equal(ca(x)[perm], ca(x[perm]))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ChannelAttention(8)(rand(1, 4, 8, 8))

    def test_narrow_input_reduction_fallback(self):
        ca = ChannelAttention(8)  # default ratio 16 would empty the bottleneck
        assert ca.reduction_ratio == 4
        assert ca.mlp[0].out_features == 2

    def test_hidden_width_floor(self):
        ca = ChannelAttention(2)
        assert ca.mlp[0].out_features == 1

    def test_shared_bottleneck(self):
        # one MLP serves both pooled descriptors
        ca = ChannelAttention(16)
        x = rand(2, 16, 4, 4)
        avg = ca.mlp(x.mean(dim=(2, 3)))
        mx = ca.mlp(x.amax(dim=(2, 3)))
        expected = torch.sigmoid(avg + mx).view(2, 16, 1, 1)
        assert torch.equal(ca.gate(x), expected)


class TestSCAUnit:
    def test_composition_order_spatial_then_channel(self):
        unit = SCAUnit(8)
        x = rand(2, 8, 8, 8)
        assert torch.equal(unit(x), unit.channel(unit.spatial(x)))

    def test_zero_input(self):
        unit = SCAUnit(4)
        assert torch.equal(unit(torch.zeros(1, 4, 8, 8)), torch.zeros(1, 4, 8, 8))

    @given(
        b=st.integers(1, 3),
        c=st.sampled_from([2, 4, 8, 16]),
        h=st.integers(2, 12),
        w=st.integers(2, 12),
    )
    @settings(max_examples=30, deadline=None)
    def test_shape_preserved_property(self, b, c, h, w):
        unit = SCAUnit(c)
        x = torch.randn(b, c, h, w)
        out = unit(x)
        assert out.shape == x.shape
        assert (out.abs() <= x.abs() + 1e-6).all()

    def test_gradcheck_small(self):
        unit = SCAUnit(3, kernel_size=3).double()
        x = torch.randn(1, 3, 5, 5, dtype=torch.double, requires_grad=True)
        assert torch.autograd.gradcheck(unit, (x,), rtol=1e-3, atol=1e-8)
