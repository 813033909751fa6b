"""Synthetic vocal-tract phantoms, preprocessing and evaluation splits.

The generator draws a sagittal midline phantom per speaker: a deformable
tongue (body + tip ellipses), a velum flap, two lip bars and a handful of
static tissues with similar intensity, so articulator boundaries are only
partly visible in the image. Each speaker reads the same set of task scripts
(phoneme sequences); articulators glide between per-phoneme target poses and
the audio track is a three-sinusoid formant mixture of the active phoneme.

On disk a corpus is one directory per speaker/task::

    <root>/meta.json
    <root>/manifest.tsv                  relpath, sha256
    <root>/<speaker>/<task>/frames/00000.png   raw uint16 intensities
    <root>/<speaker>/<task>/masks/00000.png    uint8, bit c = articulator c
    <root>/<speaker>/<task>/alignment.tsv      frame_index, phoneme, start_sample
    <root>/<speaker>/<task>/audio.wav          float32 mono

Real corpora can be dropped into the same layout and read with
:func:`load_corpus`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.io import wavfile

from .phonology import (
    N_ARTICULATORS,
    SILENCE,
    PhonemeInventory,
    default_inventory,
)

log = logging.getLogger(__name__)

SPLIT_TAGS = ("SS-UT", "US-ST", "US-UT")
PHANTOM_FOV_MM = 201.6  # 84 px at 2.4 mm


class GenerationError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


class DegenerateSubjectError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # H x W float32 in [0, 1]
    audio: np.ndarray  # 3 * window float32
    phoneme: str
    masks: np.ndarray  # 4 x H x W uint8
    subject_id: str
    task_id: str
    frame_index: int

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject_id, self.task_id, self.frame_index)


@dataclass
class Utterance:
    """Raw (pre-normalization) recording of one speaker reading one task."""

    subject_id: str
    task_id: str
    frames: np.ndarray  # n x h x w uint16
    masks: np.ndarray  # n x 4 x h x w uint8
    phonemes: list[str]
    waveform: np.ndarray  # float32
    start_samples: list[int]


@dataclass
class Corpus:
    utterances: list[Utterance]
    samples: list[SegSample]
    sample_rate: int
    fps: float
    height: int
    width: int
    native_spacing_mm: float
    native_size: int
    speakers: dict = field(default_factory=dict)

    def by_key(self) -> dict[tuple[str, str, int], SegSample]:
        return {s.key: s for s in self.samples}

    @property
    def subjects(self) -> list[str]:
        return sorted({u.subject_id for u in self.utterances})

    @property
    def tasks(self) -> list[str]:
        return sorted({u.task_id for u in self.utterances})

    @property
    def spacing_mm(self) -> float:
        return self.native_spacing_mm * self.native_size / self.height


# --------------------------------------------------------------------------
# preprocessing


def window_length(sample_rate: int, fps: float) -> int:
    return int(math.floor(sample_rate / fps))


def frame_start(frame_index: int, sample_rate: int, fps: float) -> int:
    return int(math.floor(frame_index * sample_rate / fps))


def audio_context(waveform: np.ndarray, frame_index: int, fps: float, sample_rate: int) -> np.ndarray:
    """[previous | aligned | following] windows around a frame, zero-padded."""
    win = window_length(sample_rate, fps)
    start = frame_start(frame_index, sample_rate, fps)
    lo, hi = start - win, start + 2 * win
    out = np.zeros(3 * win, dtype=np.float32)
    src_lo, src_hi = max(lo, 0), min(hi, len(waveform))
    if src_hi > src_lo:
        out[src_lo - lo : src_hi - lo] = waveform[src_lo:src_hi]
    return out


def downsample_indices(n_frames: int, src_fps: float, dst_fps: float) -> np.ndarray:
    """Indices of source frames nearest to a ``dst_fps`` clock."""
    if dst_fps > src_fps:
        raise ValueError("cannot upsample frame rate")
    duration = n_frames / src_fps
    t = np.arange(int(math.floor(duration * dst_fps + 1e-9))) / dst_fps
    return np.clip(np.round(t * src_fps).astype(int), 0, n_frames - 1)


def _resize(arr: np.ndarray, height: int, width: int, mode: str) -> np.ndarray:
    if arr.shape[-2:] == (height, width):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    lead = t.shape[:-2]
    t = t.reshape(1, -1, *t.shape[-2:])
    kw = {"align_corners": False} if mode == "bilinear" else {}
    t = F.interpolate(t, size=(height, width), mode=mode, **kw)
    return t.reshape(*lead, height, width).numpy()


def preprocess_frame(raw_image: np.ndarray, subject_stats: tuple[float, float], height: int, width: int) -> np.ndarray:
    """Bilinear resize to ``height`` x ``width``, then per-subject min/max scaling."""
    lo, hi = float(subject_stats[0]), float(subject_stats[1])
    if not hi > lo:
        raise DegenerateSubjectError(f"subject intensity range is degenerate (min={lo}, max={hi})")
    img = _resize(np.asarray(raw_image, dtype=np.float64), height, width, "bilinear")
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def resize_masks(masks: np.ndarray, height: int, width: int) -> np.ndarray:
    return (_resize(masks.astype(np.float64), height, width, "nearest") > 0.5).astype(np.uint8)


def subject_stats(frames: Sequence[np.ndarray]) -> tuple[float, float]:
    return (float(min(f.min() for f in frames)), float(max(f.max() for f in frames)))


def build_samples(utterances: Sequence[Utterance], sample_rate: int, fps: float, height: int, width: int) -> list[SegSample]:
    by_subject: dict[str, list[Utterance]] = {}
    for u in utterances:
        by_subject.setdefault(u.subject_id, []).append(u)
    samples = []
    for subject in sorted(by_subject):
        utts = by_subject[subject]
        stats = subject_stats([u.frames for u in utts])
        for u in utts:
            for i in range(len(u.frames)):
                samples.append(
                    SegSample(
                        image=preprocess_frame(u.frames[i], stats, height, width),
                        audio=audio_context(u.waveform, i, fps, sample_rate),
                        phoneme=u.phonemes[i],
                        masks=resize_masks(u.masks[i], height, width),
                        subject_id=u.subject_id,
                        task_id=u.task_id,
                        frame_index=i,
                    )
                )
    return samples


# --------------------------------------------------------------------------
# phantom geometry
#
# Coordinates are normalized (row, col) in [0, 1]; the face looks left.

REST_BODY = (0.63, 0.50)
BODY_RADII = (0.13, 0.21)
TIP_RADII = (0.045, 0.075)
UPPER_LIP_ROW = 0.45
LIP_THICKNESS = 0.065
LIP_COLS = (0.10, 0.235)
VELUM_ANCHOR = (0.335, 0.63)
VELUM_LENGTH = 0.16
VELUM_RADIUS = 0.03
TONGUE_FLOOR = 0.80

VOWEL_APERTURE = 0.14
ROUNDED_APERTURE = 0.035
LABIODENTAL_APERTURE = 0.03

# place -> tongue tip target (row, col); None keeps the tip on the body
_TIP_TARGET = {
    "dental": (0.43, 0.255),
    "alveolar": (0.39, 0.30),
    "postalveolar": (0.40, 0.36),
    "palatal": (0.44, 0.40),
    "velar": (0.46, 0.55),
}
_BODY_TARGET = {
    "palatal": (0.57, 0.44),
    "velar": (0.56, 0.58),
    "postalveolar": (0.60, 0.47),
    "glottal": (0.66, 0.52),
}


@dataclass(frozen=True)
class Pose:
    body_row: float
    body_col: float
    tip_row: float
    tip_col: float
    velum_angle: float  # radians below horizontal, pointing back
    lip_gap: float
    lip_protrusion: float
    lip_retraction: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.body_row, self.body_col, self.tip_row, self.tip_col, self.velum_angle,
             self.lip_gap, self.lip_protrusion, self.lip_retraction]
        )

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(*[float(x) for x in a])


def _label_jitter(label: str, n: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(label.encode()))
    return rng.uniform(-scale, scale, size=n)


def target_pose(label: str, inventory: PhonemeInventory | None = None) -> Pose:
    """Articulatory target of a phoneme, derived from its attribute bits."""
    inventory = inventory or default_inventory()
    attrs = set(inventory.encode(label).attributes())
    body_r, body_c = REST_BODY
    # tip rests on the front of the body
    tip_r, tip_c = body_r - 0.07, body_c - 0.17
    velum = math.radians(15.0)
    gap, protr, retr = 0.09, 0.0, 0.0

    if not attrs:  # silence: relaxed, velum lowered for nasal breathing
        return Pose(body_r + 0.02, body_c, tip_r + 0.03, tip_c, math.radians(60.0), 0.05, 0.0, 0.0)

    for place, target in _BODY_TARGET.items():
        if place in attrs:
            body_r, body_c = target
            tip_r, tip_c = body_r - 0.07, body_c - 0.17
    closure = attrs & {"stop", "nasal", "affricate"}
    for place, (tr, tc) in _TIP_TARGET.items():
        if place in attrs:
            lift = 0.0 if closure else 0.03
            if "vowel" in attrs or "approximant" in attrs:
                lift = 0.07
            tip_r, tip_c = tr + lift, tc
            if place == "velar":
                body_r = min(body_r, 0.54 + lift / 2)
    if "vowel" in attrs:
        gap = VOWEL_APERTURE
        if "velar" in attrs and "labial" not in attrs:
            body_r += 0.04  # open back vowel lowers the tongue
    if "nasal" in attrs:
        velum = math.radians(62.0)
    if "labial" in attrs:
        if closure:
            gap = 0.0
        else:
            gap, protr = ROUNDED_APERTURE, 0.03
    if "labiodental" in attrs:
        gap, retr = LABIODENTAL_APERTURE, 0.03

    j = _label_jitter(label, 4, 0.012)
    return Pose(body_r + j[0], body_c + j[1], tip_r + j[2], tip_c + j[3], velum, gap, protr, retr)


@dataclass
class SyntheticSpeaker:
    subject_id: str
    shift: tuple[float, float]
    scale: float
    tongue_scale: float
    lip_thickness: float
    gain: float
    offset: float
    formant_factor: float
    rate: float  # mean phoneme duration in frames
    formants: dict[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)


def _formants_for(pose: Pose, label: str, attrs: set[str], factor: float):
    f1 = 280.0 + 2600.0 * pose.lip_gap + 2400.0 * (pose.body_row - 0.56)
    f2 = 1500.0 + 5200.0 * (0.50 - pose.body_col) + 900.0 * (0.36 - pose.tip_col)
    f3 = 2500.0 - 9000.0 * pose.lip_protrusion + 1800.0 * (0.45 - pose.tip_row)
    if "nasal" in attrs:
        f1 = 250.0
    j = _label_jitter(label + "/f", 3, 60.0)
    freqs = np.clip(np.array([f1, f2, f3]) + j, 150.0, 7000.0) * factor
    amp = 1.0 if "voiced" in attrs else 0.45
    if "stop" in attrs:
        amp *= 0.6
    amps = amp * np.array([1.0, 0.6, 0.35])
    return tuple((float(f), float(a)) for f, a in zip(freqs, amps))


def make_speaker(index: int, seed: int, inventory: PhonemeInventory | None = None) -> SyntheticSpeaker:
    inventory = inventory or default_inventory()
    rng = np.random.default_rng([seed, 7, index])
    spk = SyntheticSpeaker(
        subject_id=f"S{index:02d}",
        shift=(float(rng.uniform(-0.035, 0.035)), float(rng.uniform(-0.035, 0.035))),
        scale=float(rng.uniform(0.92, 1.06)),
        tongue_scale=float(rng.uniform(0.92, 1.08)),
        lip_thickness=float(rng.uniform(0.055, 0.075)),
        gain=float(rng.uniform(700.0, 1400.0)),
        offset=float(rng.uniform(50.0, 400.0)),
        formant_factor=float(rng.uniform(0.9, 1.1)),
        rate=float(rng.uniform(1.4, 2.2)),
    )
    for label in inventory.speech_labels:
        attrs = set(inventory.encode(label).attributes())
        spk.formants[label] = _formants_for(target_pose(label, inventory), label, attrs, spk.formant_factor)
    return spk


def _ellipse(rr, cc, center, radii):
    return ((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2 <= 1.0


def _capsule(rr, cc, p0, p1, radius):
    d = np.array(p1) - np.array(p0)
    t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / float(d @ d)
    t = np.clip(t, 0.0, 1.0)
    return (rr - p0[0] - t * d[0]) ** 2 + (cc - p0[1] - t * d[1]) ** 2 <= radius**2


def _grid(size: int, speaker: SyntheticSpeaker):
    y = (np.arange(size) + 0.5) / size
    rr, cc = np.meshgrid(y, y, indexing="ij")
    # undo the speaker placement so shapes are drawn in anatomy coordinates
    rr = (rr - 0.5 - speaker.shift[0]) / speaker.scale + 0.5
    cc = (cc - 0.5 - speaker.shift[1]) / speaker.scale + 0.5
    return rr, cc


def articulator_masks(pose: Pose, speaker: SyntheticSpeaker, size: int) -> np.ndarray:
    rr, cc = _grid(size, speaker)
    ts = speaker.tongue_scale
    body = _ellipse(rr, cc, (pose.body_row, pose.body_col), (BODY_RADII[0] * ts, BODY_RADII[1] * ts))
    tip = _ellipse(rr, cc, (pose.tip_row, pose.tip_col), TIP_RADII)
    # bridge so the tip never detaches from the body
    bridge = _capsule(rr, cc, (pose.tip_row + 0.01, pose.tip_col + 0.02),
                      (pose.body_row - 0.02, pose.body_col - 0.05), 0.045)
    tongue = (body | tip | bridge) & (rr <= TONGUE_FLOOR)

    end = (VELUM_ANCHOR[0] + VELUM_LENGTH * math.sin(pose.velum_angle),
           VELUM_ANCHOR[1] + VELUM_LENGTH * math.cos(pose.velum_angle))
    velum = _capsule(rr, cc, VELUM_ANCHOR, end, VELUM_RADIUS)

    thick = speaker.lip_thickness
    c0 = LIP_COLS[0] - pose.lip_protrusion + pose.lip_retraction
    c1 = LIP_COLS[1]
    ul_top, ul_bot = UPPER_LIP_ROW - thick, UPPER_LIP_ROW
    ll_top = ul_bot + pose.lip_gap
    upper = (rr >= ul_top) & (rr < ul_bot) & (cc >= c0) & (cc < c1)
    lower = (rr >= ll_top) & (rr < ll_top + thick * 1.15) & (cc >= c0) & (cc < c1)

    tongue &= ~(velum | upper | lower)
    lower &= ~upper
    return np.stack([tongue, velum, upper, lower]).astype(np.uint8)


def pose_in_frame(pose: Pose, speaker: SyntheticSpeaker, margin: float = 0.01) -> bool:
    """True when every articulator of ``pose`` stays inside the frame."""
    size = 96
    masks = articulator_masks(pose, speaker, size)
    pad = max(1, int(round(margin * size)))
    border = np.ones((size, size), dtype=bool)
    border[pad:-pad, pad:-pad] = False
    if masks[:, border].any():
        return False
    # shapes clipped by the frame edge would also vanish entirely
    return all(masks[c].any() for c in range(N_ARTICULATORS))


def render_image(pose: Pose, speaker: SyntheticSpeaker, size: int, masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rr, cc = _grid(size, speaker)
    img = np.full((size, size), 0.08)
    # static tissue, deliberately close to articulator intensity
    img[(rr < 0.27)] = 0.42
    palate = (np.abs(rr - (0.30 + 0.25 * (cc - 0.45) ** 2)) < 0.022) & (cc > 0.24) & (cc < VELUM_ANCHOR[1] + 0.01)
    img[palate] = 0.30
    img[(rr >= 0.27) & (rr < UPPER_LIP_ROW - speaker.lip_thickness) & (cc > 0.06) & (cc < 0.25)] = 0.58
    img[(rr >= 0.30) & (cc > 0.84) & (cc < 0.93)] = 0.55
    img[(rr > TONGUE_FLOOR - 0.01) & (rr < 0.95) & (cc > 0.24) & (cc < 0.84)] = 0.58
    ll_bottom_rows = np.argwhere(masks[3].any(axis=1))
    if ll_bottom_rows.size:
        r_end = (ll_bottom_rows[-1, 0] + 1) / size
        r_end = (r_end - 0.5 - speaker.shift[0]) / speaker.scale + 0.5
        img[(rr >= r_end) & (rr < 0.95) & (cc > 0.06) & (cc < 0.25)] = 0.58

    levels = (0.66, 0.62, 0.70, 0.70)
    for c in range(N_ARTICULATORS):
        img[masks[c].astype(bool)] = levels[c]
    img = ndimage.gaussian_filter(img, sigma=0.7 * size / 64)
    bias = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 6)
    bias = bias / (np.abs(bias).max() + 1e-12)
    img = img * (1.0 + 0.12 * bias) + rng.normal(0.0, 0.07, size=(size, size))
    return img


def _task_script(task_index: int, seed: int, length: int, inventory: PhonemeInventory) -> list[str]:
    rng = np.random.default_rng([seed, 11, task_index])
    labels = inventory.speech_labels
    vowels = [l for l in labels if "vowel" in inventory.encode(l).attributes()]
    consonants = [l for l in labels if l not in vowels]
    script = [SILENCE]
    while len(script) < length:
        r = rng.random()
        if r < 0.08:
            script.append(SILENCE)
        elif r < 0.55:
            script.append(consonants[rng.integers(len(consonants))])
        else:
            script.append(vowels[rng.integers(len(vowels))])
    script.append(SILENCE)
    return script


def synthesize_utterance(
    speaker: SyntheticSpeaker,
    task_index: int,
    frames_per_task: int,
    size: int,
    sample_rate: int,
    fps: float,
    seed: int,
    snr_db: float = 20.0,
    smoothing: float = 0.7,
    inventory: PhonemeInventory | None = None,
) -> Utterance:
    inventory = inventory or default_inventory()
    idx = int(speaker.subject_id[1:])
    rng = np.random.default_rng([seed, 13, idx, task_index])
    script = _task_script(task_index, seed, frames_per_task, inventory)

    # phoneme per frame from speaker-specific durations
    phon_per_frame: list[str] = []
    for label in script:
        dur = max(1, int(rng.poisson(speaker.rate - 1.0)) + 1)
        phon_per_frame.extend([label] * dur)
        if len(phon_per_frame) >= frames_per_task:
            break
    phon_per_frame = (phon_per_frame + [SILENCE] * frames_per_task)[:frames_per_task]

    poses = {l: target_pose(l, inventory).as_array() for l in set(phon_per_frame)}
    state = poses[phon_per_frame[0]].copy()
    frames, masks = [], []
    for label in phon_per_frame:
        state = state + smoothing * (poses[label] - state)
        pose = Pose.from_array(state)
        m = articulator_masks(pose, speaker, size)
        img = render_image(pose, speaker, size, m, rng)
        frames.append(np.clip(speaker.offset + speaker.gain * img, 0, 65535).astype(np.uint16))
        masks.append(m)

    n_samples = frame_start(frames_per_task, sample_rate, fps)
    wave = np.zeros(n_samples)
    t = np.arange(n_samples) / sample_rate
    starts = [frame_start(i, sample_rate, fps) for i in range(frames_per_task)]
    for i, label in enumerate(phon_per_frame):
        a, b = starts[i], (starts[i + 1] if i + 1 < frames_per_task else n_samples)
        if label == SILENCE:
            continue
        for f, amp in speaker.formants[label]:
            wave[a:b] += amp * np.sin(2 * np.pi * f * t[a:b])
    signal_power = 0.5 * np.mean([sum(a * a for _, a in v) for v in speaker.formants.values()])
    noise_std = math.sqrt(signal_power / (10.0 ** (snr_db / 10.0)))
    wave += rng.normal(0.0, noise_std, size=n_samples)

    return Utterance(
        subject_id=speaker.subject_id,
        task_id=f"T{task_index:02d}",
        frames=np.stack(frames),
        masks=np.stack(masks),
        phonemes=phon_per_frame,
        waveform=wave.astype(np.float32),
        start_samples=starts,
    )


def generate_corpus(
    n_speakers: int,
    n_tasks: int,
    frames_per_task: int,
    height: int = 64,
    width: int = 64,
    sample_rate: int = 16000,
    fps: float = 15.0,
    seed: int = 0,
    native_size: int | None = None,
    snr_db: float = 20.0,
    speaker_overrides: dict | None = None,
    inventory: PhonemeInventory | None = None,
) -> Corpus:
    """Deterministic synthetic corpus of ``n_speakers`` x ``n_tasks`` utterances."""
    for name, v in (("n_speakers", n_speakers), ("n_tasks", n_tasks), ("frames_per_task", frames_per_task),
                    ("height", height), ("width", width), ("sample_rate", sample_rate), ("fps", fps)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    inventory = inventory or default_inventory()
    native = native_size or height
    speakers = {}
    for i in range(n_speakers):
        spk = make_speaker(i, seed, inventory)
        for k, v in (speaker_overrides or {}).get(spk.subject_id, {}).items():
            setattr(spk, k, v)
        for label in inventory.labels:
            if not pose_in_frame(target_pose(label, inventory), spk):
                raise GenerationError(
                    f"speaker {spk.subject_id}: articulators leave the frame for phoneme {label!r}"
                )
        speakers[spk.subject_id] = spk

    utterances = [
        synthesize_utterance(spk, t, frames_per_task, native, sample_rate, fps, seed, snr_db, inventory=inventory)
        for spk in speakers.values()
        for t in range(n_tasks)
    ]
    samples = build_samples(utterances, sample_rate, fps, height, width)
    return Corpus(
        utterances=utterances,
        samples=samples,
        sample_rate=sample_rate,
        fps=fps,
        height=height,
        width=width,
        native_spacing_mm=PHANTOM_FOV_MM / native,
        native_size=native,
        speakers=speakers,
    )


# --------------------------------------------------------------------------
# on-disk corpus


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pack_masks(m: np.ndarray) -> np.ndarray:
    out = np.zeros(m.shape[1:], dtype=np.uint8)
    for c in range(m.shape[0]):
        out |= (m[c].astype(np.uint8) & 1) << c
    return out


def _unpack_masks(packed: np.ndarray) -> np.ndarray:
    return np.stack([(packed >> c) & 1 for c in range(N_ARTICULATORS)]).astype(np.uint8)


def save_corpus(corpus: Corpus, root: str | Path) -> str:
    """Write the corpus layout under ``root``; returns the manifest hash."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "sample_rate": corpus.sample_rate,
        "fps": corpus.fps,
        "native_size": corpus.native_size,
        "native_spacing_mm": corpus.native_spacing_mm,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written = [root / "meta.json"]
    for u in corpus.utterances:
        d = root / u.subject_id / u.task_id
        (d / "frames").mkdir(parents=True, exist_ok=True)
        (d / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(len(u.frames)):
            fp = d / "frames" / f"{i:05d}.png"
            mp = d / "masks" / f"{i:05d}.png"
            Image.fromarray(u.frames[i].astype(np.uint16)).save(fp)
            Image.fromarray(_pack_masks(u.masks[i])).save(mp)
            written += [fp, mp]
        rows = ["frame_index\tphoneme\tstart_sample"]
        rows += [f"{i}\t{p}\t{s}" for i, (p, s) in enumerate(zip(u.phonemes, u.start_samples))]
        (d / "alignment.tsv").write_text("\n".join(rows) + "\n")
        wavfile.write(d / "audio.wav", corpus.sample_rate, u.waveform.astype(np.float32))
        written += [d / "alignment.tsv", d / "audio.wav"]
    lines = [f"{p.relative_to(root).as_posix()}\t{_sha256(p)}" for p in sorted(written)]
    manifest = "\n".join(lines) + "\n"
    (root / "manifest.tsv").write_text(manifest)
    return hashlib.sha256(manifest.encode()).hexdigest()


def manifest_hash(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / "manifest.tsv").read_bytes()).hexdigest()


def verify_manifest(root: str | Path) -> list[str]:
    """Relative paths whose checksum no longer matches the manifest."""
    root = Path(root)
    bad = []
    for line in (root / "manifest.tsv").read_text().splitlines():
        rel, digest = line.split("\t")
        p = root / rel
        if not p.exists() or _sha256(p) != digest:
            bad.append(rel)
    return bad


def load_corpus(root: str | Path, height: int, width: int, load_audio: bool = True) -> Corpus:
    """Read a corpus directory and run the preprocessing pipeline.

    With ``load_audio=False`` waveform files may be absent; audio contexts are
    then all-zero placeholders (image-only evaluation).
    """
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    sr, fps = int(meta["sample_rate"]), float(meta["fps"])
    utterances = []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for task_dir in sorted(p for p in spk_dir.iterdir() if p.is_dir()):
            align = (task_dir / "alignment.tsv").read_text().splitlines()[1:]
            rows = [r.split("\t") for r in align if r.strip()]
            phonemes = [r[1] for r in rows]
            starts = [int(r[2]) for r in rows]
            frames = np.stack([np.asarray(Image.open(task_dir / "frames" / f"{int(r[0]):05d}.png")) for r in rows])
            masks = np.stack(
                [_unpack_masks(np.asarray(Image.open(task_dir / "masks" / f"{int(r[0]):05d}.png"))) for r in rows]
            )
            wav_path = task_dir / "audio.wav"
            if load_audio:
                rate, wave = wavfile.read(wav_path)
                if rate != sr:
                    raise ValueError(f"{wav_path}: sample rate {rate} != {sr}")
                wave = np.asarray(wave, dtype=np.float32)
            else:
                wave = np.zeros(0, dtype=np.float32)
            utterances.append(
                Utterance(spk_dir.name, task_dir.name, frames, masks, phonemes, wave, starts)
            )
    samples = build_samples(utterances, sr, fps, height, width)
    return Corpus(
        utterances=utterances,
        samples=samples,
        sample_rate=sr,
        fps=fps,
        height=height,
        width=width,
        native_spacing_mm=float(meta["native_spacing_mm"]),
        native_size=int(meta["native_size"]),
    )


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    tag: str
    train_speakers: list[str]
    train_tasks: list[str]
    eval_speakers: list[str]
    eval_tasks: list[str]
    val_tasks: dict[str, str]
    train: list[tuple[str, str, int]]
    val: list[tuple[str, str, int]]
    eval: list[tuple[str, str, int]]

    def check(self) -> None:
        ts, es = set(self.train_speakers), set(self.eval_speakers)
        tt, et = set(self.train_tasks), set(self.eval_tasks)
        ok = {
            "SS-UT": es <= ts and not (tt & et),
            "US-ST": not (ts & es) and et <= tt,
            "US-UT": not (ts & es) and not (tt & et),
        }[self.tag]
        if not ok:
            raise SplitError(f"split violates the {self.tag} membership rules")

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "train_speakers": self.train_speakers,
            "train_tasks": self.train_tasks,
            "eval_speakers": self.eval_speakers,
            "eval_tasks": self.eval_tasks,
            "val_tasks": self.val_tasks,
            "n_train": len(self.train),
            "n_val": len(self.val),
            "n_eval": len(self.eval),
        }


def make_splits(corpus: Corpus, config_tag: str, seed: int = 0, n_eval_speakers: int = 2, n_eval_tasks: int = 2) -> SplitSpec:
    if config_tag not in SPLIT_TAGS:
        raise SplitError(f"unknown split configuration {config_tag!r}; expected one of {SPLIT_TAGS}")
    rng = np.random.default_rng([seed, 17])
    speakers = [corpus.subjects[i] for i in rng.permutation(len(corpus.subjects))]
    tasks = [corpus.tasks[i] for i in rng.permutation(len(corpus.tasks))]

    if config_tag == "SS-UT":
        train_spk = sorted(speakers)
        eval_spk = sorted(speakers[: min(n_eval_speakers, len(speakers))])
    else:
        if len(speakers) <= n_eval_speakers:
            raise SplitError(f"{config_tag} needs more than {n_eval_speakers} speakers, corpus has {len(speakers)}")
        eval_spk, train_spk = sorted(speakers[:n_eval_speakers]), sorted(speakers[n_eval_speakers:])
    if config_tag == "US-ST":
        eval_tasks = sorted(tasks[: min(n_eval_tasks, len(tasks))])
        train_tasks = sorted(tasks)
    else:
        if len(tasks) <= n_eval_tasks:
            raise SplitError(f"{config_tag} needs more than {n_eval_tasks} tasks, corpus has {len(tasks)}")
        eval_tasks, train_tasks = sorted(tasks[:n_eval_tasks]), sorted(tasks[n_eval_tasks:])

    # one held-out training task per speaker drives early stopping
    val_tasks = {}
    if len(train_tasks) >= 2:
        for i, spk in enumerate(train_spk):
            val_tasks[spk] = train_tasks[(i + seed) % len(train_tasks)]

    train, val, evals = [], [], []
    for s in corpus.samples:
        spk, task, _ = s.key
        if spk in train_spk and task in train_tasks:
            (val if val_tasks.get(spk) == task else train).append(s.key)
        if spk in eval_spk and task in eval_tasks:
            evals.append(s.key)
    split = SplitSpec(config_tag, train_spk, train_tasks, eval_spk, eval_tasks, val_tasks, train, val, evals)
    split.check()
    return split
