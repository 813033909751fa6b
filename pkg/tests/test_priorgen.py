import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtseg.phonology import LOWER_LIP, TONGUE, UPPER_LIP, VELUM, encode_phoneme
from vtseg.priorgen import (
    BBox,
    SubjectPriorTable,
    bbox_of_union,
    build_prior_table,
    load_prior_tables,
    neutral_prior,
    render_prior,
    save_prior_tables,
)


def brute_box(masks):
    """Scan every pixel of every mask, tracking extreme coordinates."""
    rmin = cmin = 10**9
    rmax = cmax = -1
    for m in masks:
        for r in range(m.shape[0]):
            for c in range(m.shape[1]):
                if m[r, c]:
                    rmin, rmax = min(rmin, r), max(rmax, r)
                    cmin, cmax = min(cmin, c), max(cmax, c)
    return None if rmax < 0 else BBox(rmin, rmax, cmin, cmax)


def pixel(h, w, r, c):
    m = np.zeros((h, w), np.uint8)
    m[r, c] = 1
    return m


def sample(phoneme, masks, subject="S00"):
    return SimpleNamespace(subject_id=subject, phoneme=phoneme, masks=masks)


def test_single_pixel():
    assert bbox_of_union([pixel(8, 8, 3, 5)]) == BBox(3, 3, 5, 5)


def test_two_pixels():
    assert bbox_of_union([pixel(8, 8, 1, 1), pixel(8, 8, 4, 6)]) == BBox(1, 4, 1, 6)


def test_empty():
    assert bbox_of_union([np.zeros((5, 5))] * 3) is None
    assert bbox_of_union([]) is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        bbox_of_union([np.zeros((4, 4)), np.zeros((4, 5))])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_box_matches_scan_and_is_minimal(h, w, n, seed):
    rng = np.random.default_rng(seed)
    masks = [rng.random((h, w)) < rng.uniform(0, 0.2) for _ in range(n)]
    box = bbox_of_union(masks)
    assert box == brute_box(masks)
    if box is None:
        return
    union = np.logical_or.reduce(masks)
    ind = box.indicator(h, w).astype(bool)
    assert not (union & ~ind).any()
    # every side touches a set pixel
    assert union[box.row_min].any() and union[box.row_max].any()
    assert union[:, box.col_min].any() and union[:, box.col_max].any()
    # order and duplication invariance
    assert bbox_of_union(masks[::-1] + masks[:1]) == box


def test_bbox_rejects_inverted():
    with pytest.raises(ValueError):
        BBox(3, 2, 0, 0)


def lip_stack(h, w, rows):
    m = np.zeros((4, h, w), np.uint8)
    m[LOWER_LIP, rows[0] : rows[1] + 1, 12] = 1
    return m


def test_table_single_frame():
    m = np.zeros((4, 32, 32), np.uint8)
    m[LOWER_LIP, 10, 12] = 1
    t = build_prior_table([sample("p", m)])
    assert t.get("labial", LOWER_LIP) == BBox(10, 10, 12, 12)


def test_table_two_frames_union():
    t = build_prior_table([sample("p", lip_stack(32, 32, (10, 11))), sample("b", lip_stack(32, 32, (12, 14)))])
    assert t.get("labial", LOWER_LIP) == BBox(10, 14, 12, 12)
    prior = render_prior(encode_phoneme("p"), t, 32, 32)
    assert np.array_equal(prior[LOWER_LIP], BBox(10, 14, 12, 12).indicator(32, 32))
    assert (prior[TONGUE] == 1).all()
    # the upper lip never had a mask in these frames
    assert (prior[UPPER_LIP] == 1).all()


def test_silence_only_table_empty():
    m = np.ones((4, 8, 8), np.uint8)
    t = build_prior_table([sample("sil", m), sample("sil", m)])
    assert len(t) == 0
    for ph in ("p", "s", "aa", "sil"):
        assert np.array_equal(render_prior(encode_phoneme(ph), t, 8, 8), neutral_prior(8, 8))


def test_table_errors():
    with pytest.raises(ValueError):
        build_prior_table([])
    m = np.zeros((4, 8, 8), np.uint8)
    with pytest.raises(ValueError, match="several subjects"):
        build_prior_table([sample("p", m, "A"), sample("p", m, "B")])


def test_silence_renders_neutral():
    t = build_prior_table([sample("p", lip_stack(16, 16, (2, 3)))])
    assert np.array_equal(render_prior(encode_phoneme("sil"), t, 16, 16), neutral_prior(16, 16))


def test_neutral():
    p = neutral_prior(8, 8)
    assert p.shape == (4, 8, 8) and (p.sum(axis=(1, 2)) == 64).all()
    assert np.array_equal(render_prior(encode_phoneme("t"), None, 8, 8), p)
    with pytest.raises(ValueError):
        neutral_prior(0, 3)


def test_render_geometry_mismatch():
    t = SubjectPriorTable("S", 16, 16, {("labial", LOWER_LIP): BBox(0, 1, 0, 1)})
    with pytest.raises(ValueError):
        render_prior(encode_phoneme("p"), t, 32, 32)


def test_table_matches_per_attribute_brute_force(tiny_corpus):
    spk = tiny_corpus.subjects[0]
    samples = [s for s in tiny_corpus.samples if s.subject_id == spk]
    t = build_prior_table(samples)
    from vtseg.phonology import default_inventory

    inv = default_inventory()
    for c in range(4):
        for a in inv.attributes_for_channel(c):
            frames = [s.masks[c] for s in samples if a in inv.encode(s.phoneme).attributes()]
            assert t.get(a, c) == brute_box(frames) if frames else t.get(a, c) is None


def test_render_monotone_in_attributes(tiny_corpus):
    from vtseg.phonology import PhonologicalVector

    spk = tiny_corpus.subjects[1]
    t = build_prior_table([s for s in tiny_corpus.samples if s.subject_id == spk])
    rng = np.random.default_rng(0)
    h, w = tiny_corpus.height, tiny_corpus.width
    for _ in range(50):
        bits = (rng.random(15) < 0.3).astype(int)
        extra = bits.copy()
        extra[rng.integers(15)] = 1
        a = render_prior(PhonologicalVector(bits), t, h, w)
        b = render_prior(PhonologicalVector(extra), t, h, w)
        for c in range(4):
            if not (a[c] == 1).all():
                assert (b[c] >= a[c]).all()


def test_each_channel_is_box_or_neutral(tiny_corpus):
    spk = tiny_corpus.subjects[0]
    t = build_prior_table([s for s in tiny_corpus.samples if s.subject_id == spk])
    for ph in ("p", "f", "s", "k", "m", "aa", "uw"):
        pr = render_prior(encode_phoneme(ph), t, tiny_corpus.height, tiny_corpus.width)
        for c in range(4):
            box = bbox_of_union([pr[c]])
            assert box is not None
            assert np.array_equal(pr[c], box.indicator(*pr[c].shape))


def test_tables_round_trip(tmp_path, tiny_corpus):
    tables = []
    for spk in tiny_corpus.subjects[:2]:
        tables.append(build_prior_table([s for s in tiny_corpus.samples if s.subject_id == spk]))
    tables.append(SubjectPriorTable("EMPTY", 8, 8))
    path = tmp_path / "priors.tsv"
    save_prior_tables(tables, path)
    back = load_prior_tables(path)
    assert set(back) == {t.subject_id for t in tables}
    for t in tables:
        assert back[t.subject_id].boxes == t.boxes
        assert (back[t.subject_id].height, back[t.subject_id].width) == (t.height, t.width)
