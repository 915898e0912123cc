import pytest
import torch
from hypothesis import given, settings, strategies as st

import vpbridge as vb
from vpbridge.attention import (
    AttentionKind,
    AttentionRecord,
    build_step_override,
)
from vpbridge.errors import ConfigurationError, DomainError, RenormalizationError


def _stochastic(j, k, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(j, k, generator=gen, dtype=dtype), dim=-1)


# --- column transform -------------------------------------------------------

def test_column_transform_swaps_1_and_yplus1():
    lam = vb.build_column_transform(6, 2)
    m = torch.arange(18, dtype=torch.float64).reshape(3, 6)
    out = m @ lam
    assert torch.equal(out[:, 1], m[:, 3])
    assert torch.equal(out[:, 3], m[:, 1])
    for col in (0, 2, 4, 5):
        assert torch.equal(out[:, col], m[:, col])


def test_column_transform_identity_for_y0():
    assert torch.equal(vb.build_column_transform(5, 0), torch.eye(5, dtype=torch.float64))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 2))))
def test_column_transform_is_permutation_and_involution(ky):
    k, y = ky
    lam = vb.build_column_transform(k, y)
    assert torch.equal(lam.sum(dim=0), torch.ones(k, dtype=torch.float64))
    assert torch.equal(lam.sum(dim=1), torch.ones(k, dtype=torch.float64))
    assert torch.equal(lam @ lam, torch.eye(k, dtype=torch.float64))
    assert torch.equal(lam @ lam.T, torch.eye(k, dtype=torch.float64))  # orthogonal


def test_column_transform_rejects_bad_y():
    with pytest.raises(DomainError):
        vb.build_column_transform(6, 5)


# --- mask --------------------------------------------------------------------

def test_mask_example():
    assert vb.build_mask(6, 2).tolist() == [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]


def test_mask_y0_all_ones():
    assert vb.build_mask(7, 0).tolist() == [1.0] * 7


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 2))))
def test_mask_zero_count_is_y(ky):
    k, y = ky
    mask = vb.build_mask(k, y)
    assert int((1.0 - mask).sum().item()) == y
    assert all(mask[i].item() == (0.0 if 1 <= i <= y else 1.0) for i in range(k))


# --- merge_cross -------------------------------------------------------------

def test_merge_full_before_when_mask_all_ones():
    mb, ma = _stochastic(4, 6, 1), _stochastic(4, 6, 2)
    lam = vb.build_column_transform(6, 0)
    out = vb.merge_cross(mb, ma, lam, torch.ones(6, dtype=torch.float64))
    assert torch.allclose(out, mb @ lam, atol=1e-12)


def test_merge_full_after_when_mask_all_zeros():
    mb, ma = _stochastic(4, 6, 3), _stochastic(4, 6, 4)
    lam = vb.build_column_transform(6, 2)
    out = vb.merge_cross(mb, ma, lam, torch.zeros(6, dtype=torch.float64))
    assert torch.allclose(out, ma, atol=1e-12)


def test_merge_matches_explicit_loop():
    j, k, y = 3, 6, 2
    mb, ma = _stochastic(j, k, 5), _stochastic(j, k, 6)
    lam = vb.build_column_transform(k, y)
    mask = vb.build_mask(k, y)
    expected = torch.zeros(j, k, dtype=torch.float64)
    for r in range(j):
        for c in range(k):
            acc = sum(mb[r, m].item() * lam[m, c].item() for m in range(k))
            expected[r, c] = acc * mask[c].item() + ma[r, c].item() * (1 - mask[c].item())
    got = vb.merge_cross(mb, ma, lam, mask, renormalize=False)
    assert (got - expected).abs().max().item() <= 1e-12


def test_merge_locality_pre_renormalization():
    j, k, y = 5, 8, 3
    lam = vb.build_column_transform(k, y)
    mask = vb.build_mask(k, y)
    mb, ma = _stochastic(j, k, 7), _stochastic(j, k, 8)
    base = vb.merge_cross(mb, ma, lam, mask, renormalize=False)
    ma2 = _stochastic(j, k, 9)
    out_ma = vb.merge_cross(mb, ma2, lam, mask, renormalize=False)
    mb2 = _stochastic(j, k, 10)
    out_mb = vb.merge_cross(mb2, ma, lam, mask, renormalize=False)
    for col in range(k):
        if mask[col] == 1.0:  # before-sourced column: immune to Ma
            assert torch.equal(base[:, col], out_ma[:, col])
        else:  # learnable column: immune to Mb
            assert torch.equal(base[:, col], out_mb[:, col])


def test_merge_end_slot_carries_before_end_column():
    j, k, y = 4, 8, 3
    mb, ma = _stochastic(j, k, 11), _stochastic(j, k, 12)
    out = vb.merge_cross(mb, ma, vb.build_column_transform(k, y), vb.build_mask(k, y),
                         renormalize=False)
    assert torch.equal(out[:, y + 1], mb[:, 1])


def test_merge_rows_sum_to_one_after_renormalization():
    mb, ma = _stochastic(6, 8, 13), _stochastic(6, 8, 14)
    out = vb.merge_cross(mb, ma, vb.build_column_transform(8, 3), vb.build_mask(8, 3))
    assert torch.allclose(out.sum(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-12)


def test_merge_shape_mismatch():
    with pytest.raises(DomainError):
        vb.merge_cross(_stochastic(3, 6), _stochastic(3, 5),
                       vb.build_column_transform(6, 1), vb.build_mask(6, 1))


def test_merge_gradient_flows_only_through_after_map():
    mb, ma = _stochastic(4, 6, 15), _stochastic(4, 6, 16)
    mb = mb.requires_grad_(True)
    ma = ma.clone().requires_grad_(True)
    out = vb.merge_cross(mb, ma, vb.build_column_transform(6, 2), vb.build_mask(6, 2))
    out.sum().backward()
    assert ma.grad is not None and ma.grad.abs().sum() > 0
    assert mb.grad is None  # detached inside the merge


def test_merge_gradient_matches_finite_differences():
    j, k, y = 3, 6, 2
    mb, ma = _stochastic(j, k, 17), _stochastic(j, k, 18)
    lam, mask = vb.build_column_transform(k, y), vb.build_mask(k, y)
    probe = torch.randn(j, k, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(19))

    def scalar(m):
        return (vb.merge_cross(mb, m, lam, mask) * probe).sum()

    leaf = ma.clone().requires_grad_(True)
    scalar(leaf).backward()
    h = 1e-6
    for idx in range(0, j * k, 5):
        r, c = divmod(idx, k)
        plus, minus = ma.clone(), ma.clone()
        plus[r, c] += h
        minus[r, c] -= h
        fd = (scalar(plus).item() - scalar(minus).item()) / (2 * h)
        ad = leaf.grad[r, c].item()
        assert abs(ad - fd) / max(abs(ad), abs(fd), 1e-6) < 1e-4


# --- merge_self ---------------------------------------------------------------

def test_merge_self_full_replacement_and_constant():
    mb, ma = _stochastic(5, 5, 20), _stochastic(5, 5, 21)
    out = vb.merge_self(mb, ma.clone().requires_grad_(True))
    assert torch.equal(out, mb)
    assert not out.requires_grad  # constant w.r.t. the live map
    assert torch.equal(vb.merge_self(mb, out), mb)  # idempotent
    with pytest.raises(DomainError):
        vb.merge_self(_stochastic(4, 4), _stochastic(5, 5))


# --- injection gate -----------------------------------------------------------

def test_should_inject_edges():
    assert not any(vb.should_inject(t, 50, 0.0) for t in range(1, 51))
    hits = [t for t in range(1, 51) if vb.should_inject(t, 50, 1.0)]
    assert hits == list(range(1, 50))  # every step except t = T
    hits = [t for t in range(1, 51) if vb.should_inject(t, 50, 0.7)]
    assert hits == list(range(1, 35))


def test_should_inject_raw_index_mode():
    assert vb.should_inject(3, 50, 10.0, normalized=False)
    assert not vb.should_inject(10, 50, 10.0, normalized=False)


def test_should_inject_domain():
    with pytest.raises(DomainError):
        vb.should_inject(0, 50, 0.5)


# --- intensity -----------------------------------------------------------------

def test_apply_intensity_identity_and_zero():
    m = _stochastic(4, 6, 22)
    assert torch.equal(vb.apply_intensity(m, 2, 1.0), m)
    out = vb.apply_intensity(m, 2, 0.0)
    assert torch.all(out[:, 1:3] == 0.0)
    assert torch.allclose(out.sum(dim=-1), torch.ones(4, dtype=torch.float64), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1_000_000))
def test_apply_intensity_rows_renormalized(seed):
    m = _stochastic(5, 7, seed)
    out = vb.apply_intensity(m, 3, 2.5)
    assert torch.allclose(out.sum(dim=-1), torch.ones(5, dtype=torch.float64), atol=1e-10)


def test_apply_intensity_zero_row_error():
    m = torch.zeros(2, 6, dtype=torch.float64)
    m[0, 0] = 1.0      # row 0 keeps mass outside the learnable columns
    m[1, 1] = 1.0      # row 1 holds everything in a learnable column
    with pytest.raises(RenormalizationError) as err:
        vb.apply_intensity(m, 2, 0.0)
    assert err.value.row == 1


# --- records and overrides ------------------------------------------------------

def test_record_validates_rows():
    rec = AttentionRecord()
    with pytest.raises(DomainError):
        rec.put(1, "att1", AttentionKind.CROSS, torch.full((2, 4), 0.5, dtype=torch.float64))
    with pytest.raises(DomainError):
        rec.put(1, "att1", AttentionKind.CROSS, -_stochastic(2, 4))
    rec.put(1, "att1", AttentionKind.CROSS, _stochastic(2, 4))
    assert rec.has(1, "att1", AttentionKind.CROSS)
    with pytest.raises(ConfigurationError):
        rec.get(2, "att1", AttentionKind.CROSS)


def test_record_completeness_check():
    rec = AttentionRecord()
    sites = [("att1", AttentionKind.CROSS), ("att1", AttentionKind.SELF)]
    rec.put(1, "att1", AttentionKind.CROSS, _stochastic(2, 4))
    with pytest.raises(ConfigurationError):
        rec.validate_complete([1], sites)
    rec.put(1, "att1", AttentionKind.SELF, _stochastic(2, 2))
    rec.validate_complete([1], sites)


def _plan(tau=1.0, lam=1.0, j=4, k=8):
    rec = AttentionRecord()
    for t in range(1, 11):
        rec.put(t, "att1", AttentionKind.CROSS, _stochastic(j, k, t))
        rec.put(t, "att1", AttentionKind.SELF, _stochastic(j, j, 100 + t))
    sites = frozenset({("att1", AttentionKind.CROSS), ("att1", AttentionKind.SELF)})
    return vb.InjectionPlan(rec, tau, sites, lam)


def test_injection_plan_validation():
    rec = AttentionRecord()
    with pytest.raises(ConfigurationError):
        vb.InjectionPlan(rec, 0.5, frozenset())
    with pytest.raises(ConfigurationError):
        vb.InjectionPlan(rec, 1.5, frozenset({("att1", AttentionKind.SELF)}))
    plan = _plan(tau=1.0)
    plan.validate_coverage(10)
    with pytest.raises(ConfigurationError):
        plan.validate_coverage(20)  # steps 11..19 not recorded


def test_build_step_override_injected_step():
    plan = _plan(tau=1.0)
    ov = build_step_override(plan, 3, 10, k=8, y=2)
    live_self = _stochastic(4, 4, 55)
    replaced = ov.ops[("att1", AttentionKind.SELF)](live_self)
    assert torch.equal(replaced, plan.source.get(3, "att1", AttentionKind.SELF))
    live_cross = _stochastic(4, 8, 56)
    merged = ov.ops[("att1", AttentionKind.CROSS)](live_cross)
    expected = vb.merge_cross(
        plan.source.get(3, "att1", AttentionKind.CROSS), live_cross,
        vb.build_column_transform(8, 2), vb.build_mask(8, 2),
    )
    assert torch.allclose(merged, expected, atol=1e-12)


def test_build_step_override_uninjected_step():
    plan = _plan(tau=0.0)
    assert build_step_override(plan, 5, 10, k=8, y=2) is None
    plan_scaled = _plan(tau=0.0, lam=0.5)
    ov = build_step_override(plan_scaled, 5, 10, k=8, y=2)
    assert ("att1", AttentionKind.SELF) not in ov.ops
    live = _stochastic(4, 8, 57)
    assert torch.allclose(
        ov.ops[("att1", AttentionKind.CROSS)](live),
        vb.apply_intensity(live, 2, 0.5), atol=1e-12,
    )
