"""Unit tests for the invertible layers and per-language stacks."""
import math

import pytest
import torch
import torch.nn as nn

from flowmt.errors import ConfigurationError, NumericError, UsageError
from flowmt.flows import (
    ActNorm,
    CouplingLayer,
    FlowStack,
    GlowLayer,
    InvertibleLinear,
    StandardNormal,
    transform_latent,
)

LN2 = math.log(2.0)
LN_2PI = math.log(2.0 * math.pi)


class _ConstNet(nn.Module):
    """Stand-in coupling net emitting fixed scale/shift values."""

    def __init__(self, s: float, t: float):
        super().__init__()
        self.s = s
        self.t = t

    def forward(self, x):
        shape = x.shape
        return (torch.full(shape, self.s, dtype=x.dtype),
                torch.full(shape, self.t, dtype=x.dtype))


def _perturb(module: nn.Module, seed: int, scale: float = 0.1) -> None:
    """Randomize parameters so the maps under test are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


# ---------------------------------------------------------------------------
# coupling layers


def test_fresh_coupling_is_identity():
    torch.manual_seed(0)
    layer = CouplingLayer(dim=6)
    z = torch.randn(7, 6)
    y, ld = layer(z)
    assert torch.allclose(y, z)
    assert torch.allclose(ld, torch.zeros(7))


def test_coupling_hand_example():
    # First half [0.5] passes through; second half gets scale e^{ln 2} and
    # shift 1, so [0.5, 1.0] -> [0.5, 3.0] with log-det ln 2.
    layer = CouplingLayer(dim=2)
    layer.net = _ConstNet(LN2, 1.0)
    y, ld = layer(torch.tensor([0.5, 1.0]))
    assert torch.allclose(y, torch.tensor([0.5, 3.0]))
    assert abs(ld.item() - LN2) < 1e-6

    z, ld_inv = layer.inverse(torch.tensor([0.5, 3.0]))
    assert torch.allclose(z, torch.tensor([0.5, 1.0]))
    assert abs(ld_inv.item() + LN2) < 1e-6


def test_coupling_flip_swaps_passthrough_half():
    layer = CouplingLayer(dim=2, flip=True)
    layer.net = _ConstNet(LN2, 1.0)
    # Now the second half [1.0] conditions and the first half transforms.
    y, _ = layer(torch.tensor([0.5, 1.0]))
    assert torch.allclose(y, torch.tensor([2.0, 1.0]))


def test_coupling_rejects_odd_dim():
    with pytest.raises(ConfigurationError):
        CouplingLayer(dim=5)


# ---------------------------------------------------------------------------
# actnorm and the invertible linear map


def test_actnorm_diag_example():
    an = ActNorm(2, data_init=False)
    with torch.no_grad():
        an.log_scale.copy_(torch.tensor([LN2, LN2]))
    y, ld = an(torch.tensor([1.0, -1.0]))
    assert torch.allclose(y, torch.tensor([2.0, -2.0]))
    assert abs(ld.item() - 2 * LN2) < 1e-6
    z, ld_inv = an.inverse(y)
    assert torch.allclose(z, torch.tensor([1.0, -1.0]))
    assert abs(ld_inv.item() + 2 * LN2) < 1e-6


def test_actnorm_data_init_standardizes_first_batch():
    torch.manual_seed(3)
    an = ActNorm(4)
    an.train()
    data = 5.0 + 2.0 * torch.randn(256, 4)
    out, _ = an.inverse(data)
    assert bool(an.initialized)
    assert out.mean(dim=0).abs().max() < 1e-4
    assert (out.std(dim=0, unbiased=False) - 1.0).abs().max() < 1e-3
    # A second pass must reuse the stored parameters, not re-initialize.
    before = an.bias.clone()
    an.inverse(torch.randn(64, 4) + 100.0)
    assert torch.equal(an.bias, before)


def test_invertible_linear_round_trip_and_logdet():
    torch.manual_seed(4)
    lin = InvertibleLinear(6).double()
    _perturb(lin, seed=41)
    z = torch.randn(50, 6, dtype=torch.float64)
    y, ld = lin(z)
    back, ld_inv = lin.inverse(y)
    assert (back - z).abs().max() < 1e-10
    assert torch.allclose(ld, -ld_inv)
    # The log-det must match the dense determinant of the assembled matrix.
    lower, upper = lin._factors()
    w = lin.perm @ lower @ upper
    _, logabsdet = torch.linalg.slogdet(w)
    assert abs(ld[0].item() - logabsdet.item()) < 1e-10


def test_glow_layer_diag_example():
    # Identity linear + identity coupling + actnorm scale [2, 2]:
    # [1, -1] -> [2, -2] with log-det 2 ln 2.
    torch.manual_seed(5)
    layer = GlowLayer(dim=2, data_init=False)
    with torch.no_grad():
        layer.actnorm.log_scale.copy_(torch.tensor([LN2, LN2]))
        layer.linear.lower.zero_()
        layer.linear.upper.zero_()
        layer.linear.log_diag.zero_()
        layer.linear.sign.fill_(1.0)
        layer.linear.perm.copy_(torch.eye(2))
    y, ld = layer(torch.tensor([1.0, -1.0]))
    assert torch.allclose(y, torch.tensor([2.0, -2.0]))
    assert abs(ld.item() - 2 * LN2) < 1e-6
    z, ld_inv = layer.inverse(y)
    assert torch.allclose(z, torch.tensor([1.0, -1.0]), atol=1e-6)
    assert abs(ld_inv.item() + 2 * LN2) < 1e-6


# ---------------------------------------------------------------------------
# stacks: round trips, antisymmetry, densities


@pytest.mark.parametrize("kind", ["realnvp", "glow"])
@pytest.mark.parametrize("dim", [4, 100])
def test_stack_round_trip(kind, dim):
    torch.manual_seed(10)
    stack = FlowStack(dim=dim, num_layers=3, kind=kind, data_init=False)
    # Keep triangular-factor noise well below 1/sqrt(dim) so the perturbed
    # linear maps stay well-conditioned in float32.
    _perturb(stack, seed=100 + dim, scale=0.1 if kind == "realnvp" else 0.02)
    stack.eval()
    z = torch.randn(1000, dim, generator=torch.Generator().manual_seed(7))
    eps, ld_f = stack(z)
    back, ld_b = stack.inverse(eps)
    assert (back - z).abs().max() < 1e-4
    assert (ld_f + ld_b).abs().max() < 1e-5


def test_stack_forward_uses_layers_in_reverse_order():
    # Two actnorm-style couplings would commute, so use shifts on opposite
    # halves with a flip to make order observable: base-to-data applies
    # layer 0 then layer 1, so data-to-base must undo layer 1 first.
    stack = FlowStack(dim=2, num_layers=2, kind="realnvp")
    stack.layers[0].net = _ConstNet(0.0, 1.0)   # shifts second half by 1
    stack.layers[1].net = _ConstNet(LN2, 0.0)   # doubles first half (flip)
    eps = torch.tensor([1.0, 1.0])
    z, _ = stack.inverse(eps)
    # layer 0: [1, 2]; layer 1 (flip): first half doubled -> [2, 2]
    assert torch.allclose(z, torch.tensor([2.0, 2.0]))
    back, _ = stack(z)
    assert torch.allclose(back, eps)


def test_identity_stack_log_prob_matches_standard_normal():
    torch.manual_seed(11)
    stack = FlowStack(dim=4, num_layers=3, kind="realnvp")
    lp = stack.log_prob(torch.zeros(4))
    assert abs(lp.item() - (-2.0 * LN_2PI)) < 1e-5
    # and against the closed form at a non-trivial point
    z = torch.randn(5, 4)
    expected = StandardNormal(4).log_prob(z)
    assert torch.allclose(stack.log_prob(z), expected, atol=1e-6)


def test_identity_stack_mle_loss_on_zeros():
    stack = FlowStack(dim=4, num_layers=2, kind="realnvp")
    loss = stack.mle_loss(torch.zeros(8, 4))
    assert abs(loss.item() - 2.0 * LN_2PI) < 1e-5


def test_mle_loss_is_permutation_invariant():
    torch.manual_seed(12)
    stack = FlowStack(dim=6, num_layers=3, kind="realnvp")
    _perturb(stack, seed=12)
    batch = torch.randn(32, 6)
    a = stack.mle_loss(batch)
    b = stack.mle_loss(batch[torch.randperm(32)])
    assert torch.allclose(a, b, atol=1e-6)


def test_mle_loss_rejects_empty_and_misshaped_batches():
    stack = FlowStack(dim=4, num_layers=1)
    with pytest.raises(UsageError):
        stack.mle_loss(torch.zeros(0, 4))
    with pytest.raises(UsageError):
        stack.mle_loss(torch.zeros(4))


def test_stack_reports_nonfinite_layer():
    stack = FlowStack(dim=4, num_layers=3, kind="realnvp")
    bad = torch.tensor([0.0, float("nan"), 0.0, 0.0])
    with pytest.raises(NumericError, match="layer 2"):
        stack(bad)


# ---------------------------------------------------------------------------
# numerical verification: finite differences in float64


def _fd_logdet(fn, z: torch.Tensor, h: float = 1e-5) -> float:
    """Central-difference Jacobian log-determinant of fn at z (1-D input)."""
    d = z.shape[0]
    jac = torch.zeros(d, d, dtype=torch.float64)
    for j in range(d):
        step = torch.zeros(d, dtype=torch.float64)
        step[j] = h
        hi, _ = fn(z + step)
        lo, _ = fn(z - step)
        jac[:, j] = (hi - lo) / (2 * h)
    _, logabsdet = torch.linalg.slogdet(jac)
    return logabsdet.item()


@pytest.mark.parametrize("kind", ["realnvp", "glow"])
def test_stack_logdet_matches_finite_differences(kind):
    torch.manual_seed(13)
    stack = FlowStack(dim=4, num_layers=3, kind=kind, data_init=False).double()
    _perturb(stack, seed=13)
    stack.eval()
    gen = torch.Generator().manual_seed(14)
    for _ in range(5):
        z = torch.randn(4, generator=gen, dtype=torch.float64)
        _, ld = stack(z)
        assert abs(ld.item() - _fd_logdet(stack, z)) < 1e-3


@pytest.mark.parametrize("kind", ["realnvp", "glow"])
def test_mle_gradients_match_finite_differences(kind):
    torch.manual_seed(15)
    stack = FlowStack(dim=4, num_layers=2, kind=kind, data_init=False).double()
    _perturb(stack, seed=15)
    stack.eval()
    batch = torch.randn(16, 4, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(16))
    stack.mle_loss(batch).backward()
    gen = torch.Generator().manual_seed(17)
    h = 1e-6
    for name, p in stack.named_parameters():
        flat = p.detach().reshape(-1)
        idxs = torch.randperm(flat.shape[0], generator=gen)[:3]
        for i in idxs:
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + h
                hi = stack.mle_loss(batch).item()
                flat[i] = orig - h
                lo = stack.mle_loss(batch).item()
                flat[i] = orig
            fd = (hi - lo) / (2 * h)
            an = p.grad.reshape(-1)[i].item()
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-3, f"{name}[{i}]: fd={fd} an={an}"


# ---------------------------------------------------------------------------
# cross-language latent transport


def _scaling_stack(scale: float) -> FlowStack:
    """A one-layer glow stack acting as z = scale * eps."""
    stack = FlowStack(dim=2, num_layers=1, kind="glow", data_init=False)
    layer = stack.layers[0]
    with torch.no_grad():
        layer.actnorm.log_scale.fill_(math.log(scale))
        layer.linear.lower.zero_()
        layer.linear.upper.zero_()
        layer.linear.log_diag.zero_()
        layer.linear.sign.fill_(1.0)
        layer.linear.perm.copy_(torch.eye(2))
    stack.eval()
    return stack


def test_transform_latent_scaling_example():
    # Source z = 2 eps, target z = 3 eps: [4, 4] -> eps [2, 2] -> [6, 6].
    src, tgt = _scaling_stack(2.0), _scaling_stack(3.0)
    out = transform_latent(src, tgt, torch.tensor([4.0, 4.0]))
    assert torch.allclose(out, torch.tensor([6.0, 6.0]), atol=1e-5)


def test_transform_latent_composition_is_identity():
    torch.manual_seed(18)
    src = FlowStack(dim=10, num_layers=3, kind="realnvp")
    tgt = FlowStack(dim=10, num_layers=3, kind="glow", data_init=False)
    _perturb(src, seed=18)
    _perturb(tgt, seed=19)
    src.eval(), tgt.eval()
    z = torch.randn(64, 10)
    back = transform_latent(tgt, src, transform_latent(src, tgt, z))
    assert (back - z).abs().max() < 1e-4


def test_transform_latent_same_stack_is_identity():
    torch.manual_seed(20)
    stack = FlowStack(dim=8, num_layers=3, kind="realnvp")
    _perturb(stack, seed=20)
    z = torch.randn(32, 8)
    assert (transform_latent(stack, stack, z) - z).abs().max() < 1e-4


def test_transform_latent_rejects_dim_mismatch():
    a = FlowStack(dim=4, num_layers=1)
    b = FlowStack(dim=6, num_layers=1)
    with pytest.raises(ConfigurationError):
        transform_latent(a, b, torch.zeros(4))


def test_stack_rejects_bad_construction():
    with pytest.raises(ConfigurationError):
        FlowStack(dim=4, num_layers=0)
    with pytest.raises(ConfigurationError):
        FlowStack(dim=4, num_layers=1, kind="planar")
