"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the report lines.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import brute_asd, finite_difference_check
from vtseg.contrastive import (
    ContrastiveBatch,
    ContrastiveLossConfig,
    Stage2Schedule,
    dual_level_loss,
    info_nce,
    stage2_schedule,
)
from vtseg.dataio import generate_corpus, make_splits
from vtseg.encoders import DualEncoder, PatchFusion, fuse_patch_features
from vtseg.harness import runs
from vtseg.harness.config import RunConfig
from vtseg.harness.pipeline import OURS, prepare_data, train_segmenter, train_stage2
from vtseg.metrics import SpacingInfo, asd, dsc
from vtseg.priorgen import BBox, bbox_of_union
from vtseg.segmodel import CrossAttnLayer, SegModel, concat_inputs, seg_loss

TAU = 0.07
REPORT: dict[int, str] = {}


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\nacceptance summary")
    for n in sorted(REPORT):
        print(REPORT[n])


def brute_bbox(masks):
    rows, cols = [], []
    for m in masks:
        r, c = np.nonzero(m)
        rows.extend(r.tolist())
        cols.extend(c.tolist())
    if not rows:
        return None
    return BBox(min(rows), max(rows), min(cols), max(cols))


def test_criterion_01_bbox_oracle():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    exact = minimal = 0
    n = 1000
    for _ in range(n):
        h, w = rng.integers(1, 65, size=2)
        k = int(rng.integers(1, 6))
        masks = [rng.random((h, w)) < rng.choice([0.001, 0.01, 0.1, 0.5]) for _ in range(k)]
        got, ref = bbox_of_union(masks), brute_bbox(masks)
        exact += got == ref
        if got is None:
            minimal += not any(m.any() for m in masks)
            continue
        union = np.logical_or.reduce(masks)
        # minimal: every edge of the box touches a foreground pixel
        minimal += bool(union[got.row_min].any() and union[got.row_max].any()
                        and union[:, got.col_min].any() and union[:, got.col_max].any()
                        and union[got.row_min:got.row_max + 1, got.col_min:got.col_max + 1].sum() == union.sum())
    dt = time.perf_counter() - t0
    report(1, exact == n and minimal == n and dt < 10,
           f"bbox exact {exact}/{n}, minimal {minimal}/{n}, {dt:.2f} s")


def test_criterion_02_infonce_closed_forms():
    z = torch.randn(1, 8, dtype=torch.float64)
    b1 = info_nce(z, torch.randn(1, 8, dtype=torch.float64), TAU).item()
    e = torch.eye(2, dtype=torch.float64)
    expected = math.log1p(math.exp(-1 / TAU))
    per_dir = max(abs(info_nce(e, e, TAU, symmetric=False).item() - expected),
                  abs(info_nce(e, e.clone(), TAU, symmetric=False).item() - expected))
    g = torch.Generator().manual_seed(0)
    a, p, q = (torch.nn.functional.normalize(torch.randn(6, 8, generator=g, dtype=torch.float64), dim=-1)
               for _ in range(3))
    total = dual_level_loss(ContrastiveBatch(a, q, p), ContrastiveLossConfig(temperature=TAU, lam=0.5)).item()
    sep = info_nce(a, q, TAU).item() + 0.5 * info_nce(p, q, TAU).item()
    comp = abs(total - sep)
    report(2, b1 == 0.0 and per_dir < 1e-9 and comp <= 1e-12,
           f"B=1 loss {b1}, B=2 error {per_dir:.1e}, dual-level composition error {comp:.1e}")


def test_criterion_03_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    unit = lambda: torch.nn.functional.normalize(torch.randn(4, 6, dtype=torch.float64), dim=-1)  # noqa: E731
    fracs = {}
    fracs["info_nce"] = finite_difference_check(lambda x, y: info_nce(x, y, TAU), [unit(), unit()])
    fracs["dual_level"] = finite_difference_check(
        lambda x, y, w: dual_level_loss(ContrastiveBatch(x, w, y)), [unit(), unit(), unit()])
    gt = (torch.rand(2, 4, 6, 6) > 0.5).double()
    fracs["seg_loss"] = finite_difference_check(lambda x: seg_loss(x, gt, eps=1e-6), [torch.randn(2, 4, 6, 6)])
    lay = CrossAttnLayer(16, 4, ffn=True).double().eval()
    probe = torch.randn(2, 5, 16, dtype=torch.float64)
    fracs["cross_attention"] = finite_difference_check(
        lambda f_v, f_a: (lay(f_v, f_a) * probe).sum(), [torch.randn(2, 5, 16), torch.randn(2, 3, 16)])
    fusion = PatchFusion(8).double()
    fprobe = torch.randn(1, 9, 8, dtype=torch.float64)
    fracs["fuse_patch_features"] = finite_difference_check(
        lambda a, b, c: (fuse_patch_features([a, b, c], fusion.convs, (3, 3)).tokens * fprobe).sum(),
        [torch.randn(1, 9, 8) for _ in range(3)])
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.2f}" for k, v in fracs.items())
    report(3, all(v >= 0.95 for v in fracs.values()) and dt < 120, f"{detail}, {dt:.1f} s")


def test_criterion_04_cross_attention_invariants():
    torch.manual_seed(1)
    d = 16
    lay = CrossAttnLayer(d, 4, ffn=True).double().eval()
    f_v, f_a = torch.randn(2, 7, d, dtype=torch.float64), torch.randn(2, 9, d, dtype=torch.float64)
    perm = max((lay(f_v, f_a) - lay(f_v, f_a[:, torch.randperm(9)])).abs().max().item() for _ in range(5))

    plain = CrossAttnLayer(d, 4, ffn=False).double().eval()
    one = f_a[:, :1]
    analytic = torch.nn.functional.layer_norm(f_v + plain.attn.out(plain.attn.v(one)), (d,),
                                              plain.norm.weight, plain.norm.bias)
    single = (plain(f_v, one) - analytic).abs().max().item()
    same = (plain(f_v, one.expand(2, 6, d)) - analytic).abs().max().item()
    with torch.no_grad():
        plain.attn.out.weight.zero_()
        plain.attn.out.bias.zero_()
    ln = torch.nn.functional.layer_norm(f_v, (d,), plain.norm.weight, plain.norm.bias)
    zero = (plain(f_v, f_a) - ln).abs().max().item()
    report(4, perm <= 1e-5 and single <= 1e-10 and same <= 1e-10 and zero <= 1e-10,
           f"permutation {perm:.1e}, single token {single:.1e}, identical tokens {same:.1e}, zeroed {zero:.1e}")


def test_criterion_05_channel_inflation():
    cfg = RunConfig()
    torch.manual_seed(5)
    ref = DualEncoder(cfg.encoder(1)).eval()
    model = SegModel(cfg.segmodel()).eval()
    model.load_stage2(ref.state_dict())
    img = torch.rand(4, 1, 64, 64)
    worst = 0.0
    for prior in (torch.zeros(4, 4, 64, 64), torch.ones(4, 4, 64, 64), (torch.rand(4, 4, 64, 64) > 0.5).float()):
        a, ga = model.visual(concat_inputs(img, prior))
        b, gb = ref.visual(img)
        worst = max(worst, (ga - gb).abs().max().item(), *((x - y).abs().max().item() for x, y in zip(a, b)))
    report(5, worst <= 1e-6, f"max abs diff {worst:.1e}")


def test_criterion_06_metric_oracles():
    a = np.zeros((8, 8), bool)
    a[:4] = True
    half = np.zeros((8, 8), bool)
    half[:2] = True
    dsc_ok = dsc(a, a) == 1.0 and dsc(a, ~a) == 0.0 and dsc(half, a) == 2 * 16 / (16 + 32)
    rng = np.random.default_rng(2)
    n = matched = 0
    while n < 200:
        h, w = rng.integers(1, 33, size=2)
        p = rng.random((h, w)) < rng.uniform(0.02, 0.7)
        g = rng.random((h, w)) < rng.uniform(0.02, 0.7)
        if not (p.any() and g.any()):
            continue
        n += 1
        matched += asd(p, g, SpacingInfo(0.9)) == brute_asd(p, g, 0.9)
    spacing = SpacingInfo.from_native(2.4, 84, 224).mm_per_pixel
    report(6, dsc_ok and matched == n and spacing == pytest.approx(0.9, abs=1e-12),
           f"DSC cases {'exact' if dsc_ok else 'wrong'}, ASD exact {matched}/{n}, spacing {spacing:.6f} mm/px")


DESK_ROWS = ("image-only", "+bbox-prior", "w/-full-input", "ours")
DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    rows = runs.ablate(RunConfig(), out, seeds=DESK_SEEDS, rows=DESK_ROWS, progress=print)
    return rows, time.perf_counter() - t0, out


def _mean(rows, name, attr="dsc"):
    vals = [getattr(r, attr) for r in rows if r.name == name and r.error is None]
    return float(np.mean(vals)) if len(vals) == len(DESK_SEEDS) else float("nan")


@pytest.mark.slow
def test_criterion_07_desk_run(desk_run):
    rows, seconds, _ = desk_run
    base, prior, ours = (_mean(rows, n) for n in ("image-only", "+bbox-prior", "ours"))
    ok_gain = ours >= base + 2.0
    ok_prior = prior > base
    ok_time = seconds < 30 * 60
    report(7, ok_gain and ok_prior and ok_time,
           f"DSC image-only {base:.2f}, +bbox-prior {prior:.2f}, ours {ours:.2f} "
           f"(gain {ours - base:+.2f}); runtime {seconds / 60:.1f} min on {runs.host_descriptor()}")


@pytest.mark.slow
def test_criterion_08_image_only_robustness(desk_run):
    rows, _, _ = desk_run
    image_only, full = _mean(rows, "ours"), _mean(rows, "w/-full-input")
    lat_img = float(np.median([r.latency_ms for r in rows if r.name == "ours"]))
    lat_full = float(np.median([r.latency_ms for r in rows if r.name == "w/-full-input"]))
    reduction = 1 - lat_img / lat_full
    report(8, image_only >= full - 3.0 and lat_img < lat_full and reduction >= 0.10,
           f"DSC image-only {image_only:.2f} vs full {full:.2f}; latency per 50 frames "
           f"{lat_img:.1f} vs {lat_full:.1f} ms ({reduction:.0%} lower)")


SMALL = {
    "scale": 0.1,
    "data": {"n_speakers": 4, "n_tasks": 4, "frames_per_task": 10, "n_eval_speakers": 1, "n_eval_tasks": 1},
}


def _small(seed=0):
    cfg = RunConfig.from_dict({**SMALL, "seed": seed})
    d = cfg.data
    corpus = generate_corpus(d.n_speakers, d.n_tasks, d.frames_per_task, seed=seed)
    split = make_splits(corpus, "US-UT", seed, d.n_eval_speakers, d.n_eval_tasks)
    return cfg, corpus, split


def test_criterion_09_freeze_contracts():
    cfg, corpus, split = _small()
    data = prepare_data(corpus, split)
    s2 = train_stage2(cfg, data)
    res = train_segmenter(cfg, data, OURS, s2.state)
    trained = res.model.state_dict()
    frozen = set(res.model.frozen_parameter_names())
    checked = [k for k in s2.state if k in trained and k.split(".")[0] in ("visual", "audio", "fusion")
               and "prior_proj" not in k]
    identical = all(trained[k].numpy().tobytes() == s2.state[k].numpy().tobytes() for k in checked)
    covered = all(k in frozen for k in checked if k in dict(res.model.named_parameters()))
    sched = Stage2Schedule()
    flags_ok = True
    for epoch in range(1, sched.epochs + 1):
        plan = stage2_schedule(epoch, 12, sched)
        want = [] if epoch < 21 else [12] if epoch < 31 else [9, 10, 11, 12]
        flags_ok &= plan["audio_trainable"] is False and plan["visual_layers"] == want
    report(9, identical and covered and flags_ok and len(checked) > 0,
           f"{len(checked)} encoder/fusion tensors byte-identical: {identical}; "
           f"schedule flags match at every epoch: {flags_ok}")


def test_criterion_10_determinism(tmp_path):
    def once(tag):
        cfg, corpus, split = _small(seed=7)
        runs.synth(cfg, tmp_path / tag)
        manifest = (tmp_path / tag / "manifest.tsv").read_text()
        data = prepare_data(corpus, split)
        s2 = train_stage2(cfg, data)
        res = train_segmenter(cfg, data, OURS, s2.state)
        return (manifest, split.to_dict(), split.train, split.val, split.eval,
                [r["train_total"] for r in s2.log], [r["train_loss"] for r in res.log], res.best_epoch)

    a, b = once("a"), once("b")
    names = ["manifest", "split", "train", "val", "eval", "stage2 losses", "stage3 losses", "best epoch"]
    diffs = [n for n, x, y in zip(names, a, b) if x != y]
    report(10, not diffs, "identical " + ", ".join(names) if not diffs else f"differs: {diffs}")
