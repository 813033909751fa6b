import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import brute_info_nce, finite_difference_check
from vtseg.contrastive import (
    ContrastiveBatch,
    ContrastiveLossConfig,
    Stage2Schedule,
    dual_level_loss,
    info_nce,
    stage2_schedule,
    top_third,
)

TAU = 0.07


def unit(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(b, d, generator=g, dtype=torch.float64), dim=-1)


def test_single_pair_is_zero():
    z = unit(1, 8, 0)
    assert info_nce(z, unit(1, 8, 1), TAU).item() == 0.0


def test_aligned_orthonormal_closed_form():
    e = torch.eye(2, dtype=torch.float64)
    expected = math.log1p(math.exp(-1 / TAU))
    assert abs(info_nce(e, e, TAU, symmetric=False).item() - expected) < 1e-9
    assert abs(info_nce(e, e, TAU).item() - expected) < 1e-9
    assert expected == pytest.approx(6.2e-7, rel=0.01)


def test_confused_closed_form():
    e = torch.eye(2, dtype=torch.float64)
    swapped = e.flip(0)
    assert abs(info_nce(e, swapped, TAU).item() - math.log1p(math.exp(1 / TAU))) < 1e-9


def test_matches_brute_force():
    for seed in range(5):
        a, p = unit(6, 5, seed), unit(6, 5, seed + 100)
        for sym in (True, False):
            assert info_nce(a, p, TAU, sym).item() == pytest.approx(brute_info_nce(a, p, TAU, sym), abs=1e-10)


def test_errors():
    with pytest.raises(ValueError):
        info_nce(torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValueError):
        info_nce(unit(2, 4, 0), unit(3, 4, 0))
    with pytest.raises(ValueError):
        ContrastiveLossConfig(temperature=0)
    with pytest.raises(ValueError):
        ContrastiveLossConfig(temperature=float("inf"))
    with pytest.raises(ValueError):
        ContrastiveBatch(unit(2, 4, 0), unit(3, 4, 0), unit(2, 4, 0))


def test_dual_level_composition():
    a, p, q = unit(5, 8, 1), unit(5, 8, 2), unit(5, 8, 3)
    batch = ContrastiveBatch(a, q, p)
    total = dual_level_loss(batch, ContrastiveLossConfig(lam=0.5)).item()
    sep = info_nce(a, q, TAU).item() + 0.5 * info_nce(p, q, TAU).item()
    assert abs(total - sep) < 1e-12
    assert dual_level_loss(batch, ContrastiveLossConfig(lam=0.0)).item() == pytest.approx(info_nce(a, q, TAU).item(), abs=1e-15)


def test_dual_level_aligned():
    e = torch.eye(2, dtype=torch.float64)
    total = dual_level_loss(ContrastiveBatch(e, e, e)).item()
    assert total == pytest.approx(1.5 * math.log1p(math.exp(-1 / TAU)), rel=1e-9)


def test_permutation_equivariance_and_rotation_invariance():
    a, p = unit(7, 6, 4), unit(7, 6, 5)
    perm = torch.randperm(7)
    assert info_nce(a[perm], p[perm]).item() == pytest.approx(info_nce(a, p).item(), abs=1e-12)
    q, _ = torch.linalg.qr(torch.randn(6, 6, dtype=torch.float64))
    assert info_nce(a @ q, p @ q).item() == pytest.approx(info_nce(a, p).item(), abs=1e-10)


def test_aligned_beats_shuffled():
    for seed in range(50):
        a = unit(6, 8, seed)
        shuffled = a[torch.roll(torch.arange(6), 1)]
        assert info_nce(a, a).item() < info_nce(a, shuffled).item()


def test_gradients():
    a, p, q = unit(4, 5, 7), unit(4, 5, 8), unit(4, 5, 9)
    assert finite_difference_check(lambda x, y: info_nce(x, y, TAU), [a, p]) >= 0.95
    assert finite_difference_check(lambda x, y, z: dual_level_loss(ContrastiveBatch(x, z, y)), [a, p, q]) >= 0.95


def test_full_schedule():
    s = Stage2Schedule()
    for epoch in range(1, 51):
        plan = stage2_schedule(epoch, 12, s)
        assert plan["audio_trainable"] is False
        assert plan["groups"]["fusion"] == 1e-4 and plan["groups"]["heads"] == 1e-4
        if epoch <= 20:
            assert plan["visual_layers"] == []
        elif epoch <= 30:
            assert plan["visual_layers"] == [12]
        else:
            assert plan["visual_layers"] == [9, 10, 11, 12]
        for k in plan["visual_layers"]:
            assert plan["groups"][f"visual_layer_{k}"] == 1e-5


def test_desk_depth_schedule():
    assert stage2_schedule(5, 6)["visual_layers"] == []
    assert stage2_schedule(25, 6)["visual_layers"] == [6]
    assert stage2_schedule(40, 6)["visual_layers"] == [5, 6]
    assert top_third(6) == [5, 6] and top_third(12) == [9, 10, 11, 12]
    with pytest.raises(ValueError):
        stage2_schedule(0, 6)


def test_scaled_schedule():
    s = Stage2Schedule().scaled(0.4)
    assert (s.epochs, s.top_layer_epoch, s.top_third_epoch) == (20, 9, 13)
    assert Stage2Schedule().scaled(1.0) == Stage2Schedule()
