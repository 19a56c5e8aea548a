"""Synthetic bi-temporal feature pairs, dataset files and the vocabulary.

Each record holds two ``H x W x D`` feature grids standing in for encoder
features of a before/after image pair, a change label and five reference
captions. Unchanged pairs differ only by Gaussian noise. Changed pairs carry
a planted pattern over one grid region: the object's signature vector goes
into the "after" grid when the object appears and into the "before" grid
when it disappears, and a common change-texture vector is added to the
"after" grid in both cases. The texture gives ``GAP(f_t2 - f_t1)`` a
label-aligned direction, which keeps the two classes linearly separable at
the default signal-to-noise ratio.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .decoder import BOS, EOS, RESERVED, UNK

log = logging.getLogger(__name__)

OBJECTS = ("building", "road", "trees", "house")
KINDS = ("appear", "disappear")
LOCATIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")

_OBJECT_PHRASE = {
    "building": "a building",
    "road": "a road",
    "trees": "a group of trees",
    "house": "a house",
}
_LOCATION_PHRASE = {
    "top-left": "top left corner",
    "top-right": "top right corner",
    "bottom-left": "bottom left corner",
    "bottom-right": "bottom right corner",
    "center": "center",
}
_CHANGE_TEMPLATES = (
    "{obj} {verb} in the {loc}",
    "{obj} {verb} at the {loc} of the scene",
    "in the {loc} {obj} {verb}",
    "{obj} {verb} in the {loc} of the image",
    "compared to before {obj} {verb} in the {loc}",
)
NO_CHANGE_CAPTIONS = (
    "the scene is the same as before",
    "there is no difference",
    "no change has occurred",
    "the two scenes seem identical",
    "nothing has changed in the scene",
)
_VERB = {"appear": "appears", "disappear": "disappears"}


@dataclass
class SynthConfig:
    grid: tuple[int, int] = (7, 7)
    dim: int = 64
    noise: float = 0.1
    signal: float = 1.0
    change_fraction: float = 0.5
    world_seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid must be two positive extents, got {self.grid}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.noise < 0 or self.signal < 0:
            raise ValueError("noise and signal amplitudes must be nonnegative")


@dataclass
class SceneSpec:
    object: str = "none"
    kind: str = "none"
    location: str = "center"

    @property
    def changed(self) -> bool:
        return self.kind != "none"


@dataclass
class DatasetRecord:
    id: str
    f_t1: np.ndarray
    f_t2: np.ndarray
    label: int
    captions: list[str]
    scene: SceneSpec = field(default_factory=SceneSpec)

    @property
    def grid(self) -> tuple[int, int]:
        return self.f_t1.shape[0], self.f_t1.shape[1]


# ------------------------------------------------------------------ captions
def captions_for(scene: SceneSpec) -> list[str]:
    if not scene.changed:
        return list(NO_CHANGE_CAPTIONS)
    obj = _OBJECT_PHRASE[scene.object]
    loc = _LOCATION_PHRASE[scene.location]
    verb = _VERB[scene.kind]
    return [t.format(obj=obj, verb=verb, loc=loc) for t in _CHANGE_TEMPLATES]


def region_mask(grid: tuple[int, int], location: str) -> np.ndarray:
    """Boolean ``H x W`` mask of the region named by ``location``."""
    h, w = grid
    rh, rw = max(1, h // 2), max(1, w // 2)
    rows = {
        "top": slice(0, rh),
        "bottom": slice(h - rh, h),
        "center": slice((h - rh) // 2, (h - rh) // 2 + rh),
    }
    cols = {
        "left": slice(0, rw),
        "right": slice(w - rw, w),
        "center": slice((w - rw) // 2, (w - rw) // 2 + rw),
    }
    if location == "center":
        r, c = rows["center"], cols["center"]
    else:
        vert, horiz = location.split("-")
        r, c = rows[vert], cols[horiz]
    mask = np.zeros((h, w), dtype=bool)
    mask[r, c] = True
    return mask


def world_vectors(cfg: SynthConfig) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Object signatures and the change-texture vector, fixed by ``world_seed``."""
    rng = np.random.default_rng(cfg.world_seed)
    sigs = {name: rng.normal(size=cfg.dim) for name in OBJECTS}
    texture = rng.normal(size=cfg.dim)
    return sigs, texture


# ------------------------------------------------------------------ generator
def synth_generate(n_pairs: int, cfg: SynthConfig | None = None, seed: int = 0) -> list[DatasetRecord]:
    """Deterministic synthetic pairs; the first ``round(n * change_fraction)`` slots are changed
    before a seeded shuffle of the labels."""
    if n_pairs < 2:
        raise ValueError(f"need at least 2 pairs, got {n_pairs}")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    sigs, texture = world_vectors(cfg)
    h, w = cfg.grid
    n_changed = int(round(n_pairs * cfg.change_fraction))
    labels = np.zeros(n_pairs, dtype=np.int64)
    labels[:n_changed] = 1
    rng.shuffle(labels)

    records = []
    for i, label in enumerate(labels):
        base = rng.normal(size=(h, w, cfg.dim))
        f_t1 = base.copy()
        f_t2 = base + cfg.noise * rng.normal(size=base.shape)
        if label:
            scene = SceneSpec(
                object=OBJECTS[rng.integers(len(OBJECTS))],
                kind=KINDS[rng.integers(len(KINDS))],
                location=LOCATIONS[rng.integers(len(LOCATIONS))],
            )
            mask = region_mask(cfg.grid, scene.location)[..., None]
            pattern = cfg.signal * sigs[scene.object] * mask
            if scene.kind == "appear":
                f_t2 = f_t2 + pattern
            else:
                f_t1 = f_t1 + pattern
            f_t2 = f_t2 + cfg.signal * texture * mask
        else:
            scene = SceneSpec()
        records.append(DatasetRecord(f"pair_{i:05d}", f_t1, f_t2, int(label), captions_for(scene), scene))
    return records


# ------------------------------------------------------------------ file I/O
class DatasetFormatError(ValueError):
    pass


def _record_to_json(r: DatasetRecord) -> dict:
    h, w, d = r.f_t1.shape
    return {
        "id": r.id,
        "h": h,
        "w": w,
        "d": d,
        "f_t1": r.f_t1.reshape(-1).tolist(),
        "f_t2": r.f_t2.reshape(-1).tolist(),
        "label": int(r.label),
        "captions": list(r.captions),
    }


def save_dataset(records: Iterable[DatasetRecord], path) -> None:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(_record_to_json(r)))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror}") from exc


def load_dataset(path) -> list[DatasetRecord]:
    """Read a line-delimited dataset file; malformed lines raise with their line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            h, w, d = int(obj["h"]), int(obj["w"]), int(obj["d"])
            f_t1 = np.asarray(obj["f_t1"], dtype=np.float64).reshape(h, w, d)
            f_t2 = np.asarray(obj["f_t2"], dtype=np.float64).reshape(h, w, d)
            label = int(obj["label"])
            captions = [str(c) for c in obj["captions"]]
            if label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {label}")
            if len(captions) != 5:
                raise ValueError(f"expected 5 captions, got {len(captions)}")
            if not (np.isfinite(f_t1).all() and np.isfinite(f_t2).all()):
                raise ValueError("non-finite feature values")
            records.append(DatasetRecord(str(obj["id"]), f_t1, f_t2, label, captions))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not records:
        log.warning("dataset %s is empty", path)
    return records


# ------------------------------------------------------------------ vocabulary
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(sentence: str) -> list[str]:
    """Lowercase, replace ASCII punctuation by spaces, split on whitespace."""
    return _PUNCT.sub(" ", sentence.lower()).split()


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        for t in tokens:
            if t in self.itos:
                raise ValueError(f"duplicate token {t!r}")
            self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, sentence: str, add_special: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokenize(sentence)]
        return [BOS] + ids + [EOS] if add_special else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < len(RESERVED) and i != UNK:
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def to_json(self) -> list[str]:
        return self.itos[len(RESERVED) :]

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(captions: Iterable[str], min_freq: float = 1) -> Vocabulary:
    """Tokens seen at least ``min_freq`` times, most frequent first, ties alphabetical."""
    counts = Counter(t for c in captions for t in tokenize(c))
    kept = [t for t, n in counts.items() if n >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
