"""Phoneme inventory and the 15 phonological attributes.

Attributes are grouped into voicing, manner and place. Every attribute also
implicates a subset of the four articulator channels (tongue, velum, upper
lip, lower lip); the prior generator walks that map in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

N_ATTRIBUTES = 15
N_ARTICULATORS = 4
ARTICULATORS = ("tongue", "velum", "upper_lip", "lower_lip")
TONGUE, VELUM, UPPER_LIP, LOWER_LIP = range(N_ARTICULATORS)
SILENCE = "sil"


@dataclass(frozen=True)
class PhonAttribute:
    name: str
    dimension: str
    index: int


_ATTRIBUTE_SPEC = (
    ("voiced", "voicing"),
    ("stop", "manner"),
    ("fricative", "manner"),
    ("affricate", "manner"),
    ("nasal", "manner"),
    ("approximant", "manner"),
    ("vowel", "manner"),
    ("labial", "place"),
    ("labiodental", "place"),
    ("dental", "place"),
    ("alveolar", "place"),
    ("postalveolar", "place"),
    ("palatal", "place"),
    ("velar", "place"),
    ("glottal", "place"),
)

ATTRIBUTES: tuple[PhonAttribute, ...] = tuple(
    PhonAttribute(name, dim, i) for i, (name, dim) in enumerate(_ATTRIBUTE_SPEC)
)
ATTRIBUTE_INDEX = {a.name: a.index for a in ATTRIBUTES}

# Voicing is laryngeal and implicates no imaged articulator. Every manner
# attribute moves the velum (raised for oral sounds, lowered for nasals).
DEFAULT_ARTICULATOR_MAP: dict[str, frozenset[int]] = {
    "voiced": frozenset(),
    "stop": frozenset({VELUM}),
    "fricative": frozenset({VELUM}),
    "affricate": frozenset({VELUM}),
    "nasal": frozenset({VELUM}),
    "approximant": frozenset({VELUM}),
    "vowel": frozenset({VELUM}),
    "labial": frozenset({UPPER_LIP, LOWER_LIP}),
    "labiodental": frozenset({LOWER_LIP}),
    "dental": frozenset({TONGUE}),
    "alveolar": frozenset({TONGUE}),
    "postalveolar": frozenset({TONGUE}),
    "palatal": frozenset({TONGUE}),
    "velar": frozenset({TONGUE}),
    "glottal": frozenset({TONGUE}),
}


class UnknownPhonemeError(KeyError):
    def __init__(self, label):
        super().__init__(label)
        self.label = label

    def __str__(self):
        return f"unknown phoneme label {self.label!r}"


class PhonologicalVector(tuple):
    """Immutable 15-bit multi-hot descriptor."""

    def __new__(cls, bits):
        bits = tuple(int(b) for b in bits)
        if len(bits) != N_ATTRIBUTES or any(b not in (0, 1) for b in bits):
            raise ValueError(f"expected {N_ATTRIBUTES} binary values, got {bits!r}")
        return super().__new__(cls, bits)

    @property
    def is_silence(self) -> bool:
        return not any(self)

    def attributes(self) -> list[str]:
        return [ATTRIBUTES[i].name for i, b in enumerate(self) if b]

    def as_array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float32)

    @classmethod
    def from_names(cls, names) -> "PhonologicalVector":
        bits = [0] * N_ATTRIBUTES
        for n in names:
            bits[ATTRIBUTE_INDEX[n]] = 1
        return cls(bits)


@dataclass(frozen=True)
class PhonemeInventory:
    entries: Mapping[str, PhonologicalVector]
    articulator_map: Mapping[str, frozenset[int]] = field(
        default_factory=lambda: dict(DEFAULT_ARTICULATOR_MAP)
    )

    def __post_init__(self):
        for a in ATTRIBUTES:
            chans = self.articulator_map.get(a.name)
            if chans is None:
                raise ValueError(f"attribute {a.name!r} missing from articulator map")
            if not chans and a.dimension != "voicing":
                raise ValueError(f"attribute {a.name!r} implicates no articulator")
        for label, vec in self.entries.items():
            if label == SILENCE:
                if not vec.is_silence:
                    raise ValueError("silence must encode as the all-zero vector")
                continue
            dims = {ATTRIBUTES[i].dimension for i, b in enumerate(vec) if b}
            if "manner" not in dims or "place" not in dims:
                raise ValueError(f"phoneme {label!r} needs a manner and a place bit")

    @property
    def labels(self) -> list[str]:
        return list(self.entries)

    @property
    def speech_labels(self) -> list[str]:
        return [k for k in self.entries if k != SILENCE]

    def encode(self, label: str) -> PhonologicalVector:
        if label == SILENCE:
            return PhonologicalVector([0] * N_ATTRIBUTES)
        try:
            return self.entries[label]
        except KeyError:
            raise UnknownPhonemeError(label) from None

    def attributes_for_channel(self, channel: int) -> frozenset[str]:
        if not 0 <= int(channel) < N_ARTICULATORS:
            raise ValueError(f"articulator channel must be in 0..3, got {channel}")
        return frozenset(
            name for name, chans in self.articulator_map.items() if channel in chans
        )

    def dumps(self) -> str:
        rows = [f"{k}\t{''.join(str(b) for b in v)}" for k, v in self.entries.items()]
        return "\n".join(rows) + "\n"


def parse_inventory(text: str) -> dict[str, PhonologicalVector]:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or len(parts[1]) != N_ATTRIBUTES:
            raise ValueError(f"inventory line {lineno}: expected 'label bits', got {line!r}")
        entries[parts[0]] = PhonologicalVector(parts[1])
    entries.setdefault(SILENCE, PhonologicalVector([0] * N_ATTRIBUTES))
    return entries


def load_inventory(path: str | Path | None = None) -> PhonemeInventory:
    """Load the plain-text inventory; ``None`` selects the bundled table."""
    if path is None:
        text = resources.files("vtseg.data").joinpath("inventory.tsv").read_text()
    else:
        text = Path(path).read_text()
    return PhonemeInventory(parse_inventory(text))


_DEFAULT: PhonemeInventory | None = None


def default_inventory() -> PhonemeInventory:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_inventory()
    return _DEFAULT


def encode_phoneme(label: str, inventory: PhonemeInventory | None = None) -> PhonologicalVector:
    return (inventory or default_inventory()).encode(label)


def attributes_for_channel(channel: int, inventory: PhonemeInventory | None = None) -> frozenset[str]:
    return (inventory or default_inventory()).attributes_for_channel(channel)
