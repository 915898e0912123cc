import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vpbridge.errors import DomainError
from vpbridge.schedule import NoiseSchedule


def test_linear_endpoints_exact():
    s = NoiseSchedule.linear(50, 0.02)
    assert s.alpha_bar[0].item() == 1.0
    assert s.alpha_bar[-1].item() == pytest.approx(0.02, abs=1e-12)
    assert s.T == 50


def test_strictly_decreasing_enforced():
    with pytest.raises(DomainError):
        NoiseSchedule(torch.tensor([1.0, 0.5, 0.5, 0.1]))
    with pytest.raises(DomainError):
        NoiseSchedule(torch.tensor([0.99, 0.5, 0.1]))  # alpha_bar[0] != 1
    with pytest.raises(DomainError):
        NoiseSchedule(torch.tensor([1.0, 0.5, 0.0]))  # terminal zero


def test_subsample_keeps_endpoints_and_stride():
    full = NoiseSchedule.linear(200, 0.02)
    sub = full.subsample(50)
    assert sub.T == 50
    assert torch.equal(sub.alpha_bar, full.alpha_bar[::4])
    assert sub.alpha_bar[0].item() == 1.0
    assert sub.alpha_bar[-1].item() == full.alpha_bar[-1].item()


def test_subsample_requires_divisibility():
    with pytest.raises(DomainError):
        NoiseSchedule.linear(200).subsample(80)


def test_subsampled_linear_equals_direct_linear():
    # uniform stride through a linear schedule lands on the same grid
    sub = NoiseSchedule.linear(200, 0.02).subsample(50)
    direct = NoiseSchedule.linear(50, 0.02)
    assert torch.allclose(sub.alpha_bar, direct.alpha_bar, atol=1e-12)


def test_arc_schedule_is_uniform_in_angle():
    s = NoiseSchedule.arc(40, 0.02)
    theta = torch.arccos(s.alpha_bar.sqrt())
    steps = torch.diff(theta)
    assert s.alpha_bar[0].item() == 1.0
    assert s.alpha_bar[-1].item() == pytest.approx(0.02, abs=1e-9)
    assert torch.allclose(steps, steps[0].expand_as(steps), atol=1e-9)


def test_at_bounds():
    s = NoiseSchedule.linear(10)
    assert s.at(0) == 1.0
    with pytest.raises(DomainError):
        s.at(11)
    with pytest.raises(DomainError):
        s.at(-1)


def test_roundtrip_serialization():
    s = NoiseSchedule.arc(13, 0.05)
    back = NoiseSchedule.from_dict(s.to_dict())
    assert torch.equal(back.alpha_bar, s.alpha_bar)


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(1, 300), end=st.floats(1e-4, 0.9))
def test_linear_always_satisfies_invariants(steps, end):
    s = NoiseSchedule.linear(steps, end)
    ab = s.alpha_bar
    assert ab[0].item() == 1.0
    assert torch.all(ab[1:] < ab[:-1])
    assert ab[-1].item() > 0.0
    assert math.isclose(ab[-1].item(), end, rel_tol=0, abs_tol=1e-9)
