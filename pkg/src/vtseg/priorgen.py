"""Bounding-box priors from phonological attributes.

For every subject and every (attribute, articulator) pair we take the union of
that articulator's ground-truth masks over all training frames whose phoneme
carries the attribute, and keep its minimum enclosing rectangle. At render
time the boxes of a phoneme's attributes are merged per channel.
"""

from __future__ import annotations

import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .phonology import (
    ATTRIBUTE_INDEX,
    N_ARTICULATORS,
    PhonemeInventory,
    PhonologicalVector,
    default_inventory,
)


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel rectangle."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if not (0 <= self.row_min <= self.row_max and 0 <= self.col_min <= self.col_max):
            raise ValueError(f"invalid box {self}")

    def union(self, other: "BBox") -> "BBox":
        return BBox(
            min(self.row_min, other.row_min),
            max(self.row_max, other.row_max),
            min(self.col_min, other.col_min),
            max(self.col_max, other.col_max),
        )

    def contains(self, other: "BBox") -> bool:
        return (
            self.row_min <= other.row_min
            and self.row_max >= other.row_max
            and self.col_min <= other.col_min
            and self.col_max >= other.col_max
        )

    def indicator(self, height: int, width: int) -> np.ndarray:
        if self.row_max >= height or self.col_max >= width:
            raise ValueError(f"box {self} exceeds frame {height}x{width}")
        out = np.zeros((height, width), dtype=np.float32)
        out[self.row_min : self.row_max + 1, self.col_min : self.col_max + 1] = 1.0
        return out


def bbox_of_union(masks: Sequence[np.ndarray]) -> BBox | None:
    """Minimum rectangle around the pixel-wise union; ``None`` when empty."""
    masks = [np.asarray(m) for m in masks]
    if not masks:
        return None
    shape = masks[0].shape
    if len(shape) != 2 or any(m.shape != shape for m in masks):
        raise ValueError(f"masks must share one 2-D shape, got {[m.shape for m in masks]}")
    union = np.logical_or.reduce([m != 0 for m in masks])
    rows = np.flatnonzero(union.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(union.any(axis=0))
    return BBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


@dataclass
class SubjectPriorTable:
    subject_id: str
    height: int
    width: int
    boxes: dict[tuple[str, int], BBox] = field(default_factory=dict)

    def __len__(self):
        return len(self.boxes)

    def get(self, attribute: str, channel: int) -> BBox | None:
        return self.boxes.get((attribute, channel))


def build_prior_table(samples, inventory: PhonemeInventory | None = None) -> SubjectPriorTable:
    """Fold one subject's annotated frames into a prior table.

    ``samples`` are objects with ``subject_id``, ``phoneme`` and ``masks``
    (4 x H x W) attributes.
    """
    inventory = inventory or default_inventory()
    samples = list(samples)
    if not samples:
        raise ValueError("cannot build a prior table from zero samples")
    subjects = {s.subject_id for s in samples}
    if len(subjects) != 1:
        raise ValueError(f"samples span several subjects: {sorted(subjects)}")
    height, width = np.asarray(samples[0].masks).shape[-2:]

    boxes: dict[tuple[str, int], BBox] = {}
    # running per-(attribute, channel) box; equivalent to boxing the full union
    for s in samples:
        vec = inventory.encode(s.phoneme)
        if vec.is_silence:
            continue
        masks = np.asarray(s.masks)
        if masks.shape != (N_ARTICULATORS, height, width):
            raise ValueError(f"mask stack shape {masks.shape} inconsistent with {height}x{width}")
        present = vec.attributes()
        for c in range(N_ARTICULATORS):
            relevant = inventory.attributes_for_channel(c)
            attrs = [a for a in present if a in relevant]
            if not attrs:
                continue
            box = bbox_of_union([masks[c]])
            if box is None:
                continue
            for a in attrs:
                prev = boxes.get((a, c))
                boxes[(a, c)] = box if prev is None else prev.union(box)
    return SubjectPriorTable(subjects.pop(), int(height), int(width), boxes)


def neutral_prior(height: int, width: int) -> np.ndarray:
    if height <= 0 or width <= 0:
        raise ValueError("prior geometry must be positive")
    return np.ones((N_ARTICULATORS, height, width), dtype=np.float32)


def render_prior(
    phon: PhonologicalVector,
    table: SubjectPriorTable | None,
    height: int,
    width: int,
    inventory: PhonemeInventory | None = None,
) -> np.ndarray:
    """4 x H x W prior map; channels without evidence fall back to all-ones."""
    inventory = inventory or default_inventory()
    out = neutral_prior(height, width)
    if table is None or phon.is_silence:
        return out
    if (table.height, table.width) != (height, width):
        raise ValueError(
            f"table geometry {table.height}x{table.width} does not match {height}x{width}"
        )
    present = phon.attributes()
    for c in range(N_ARTICULATORS):
        relevant = inventory.attributes_for_channel(c)
        merged = None
        for a in present:
            if a not in relevant:
                continue
            box = table.get(a, c)
            if box is not None:
                merged = box if merged is None else merged.union(box)
        if merged is not None:
            out[c] = merged.indicator(height, width)
    return out


def save_prior_tables(tables: Iterable[SubjectPriorTable], path: str | Path) -> None:
    buf = io.StringIO()
    buf.write("subject\tattribute\tchannel\trow_min\trow_max\tcol_min\tcol_max\theight\twidth\n")
    for t in tables:
        for (attr, chan), b in sorted(t.boxes.items(), key=lambda kv: (ATTRIBUTE_INDEX[kv[0][0]], kv[0][1])):
            buf.write(
                f"{t.subject_id}\t{attr}\t{chan}\t{b.row_min}\t{b.row_max}\t"
                f"{b.col_min}\t{b.col_max}\t{t.height}\t{t.width}\n"
            )
        if not t.boxes:
            # keep empty tables visible so the subject round-trips
            buf.write(f"{t.subject_id}\t-\t-\t-\t-\t-\t-\t{t.height}\t{t.width}\n")
    Path(path).write_text(buf.getvalue())


def load_prior_tables(path: str | Path) -> dict[str, SubjectPriorTable]:
    tables: dict[str, SubjectPriorTable] = {}
    rows = defaultdict(list)
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if line.strip():
            f = line.split("\t")
            rows[f[0]].append(f)
    for subject, fields in rows.items():
        h, w = int(fields[0][7]), int(fields[0][8])
        t = SubjectPriorTable(subject, h, w)
        for f in fields:
            if f[1] == "-":
                continue
            t.boxes[(f[1], int(f[2]))] = BBox(int(f[3]), int(f[4]), int(f[5]), int(f[6]))
        tables[subject] = t
    return tables
