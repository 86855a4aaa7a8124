"""Synthetic captioned-shapes corpus.

32x32 RGB scenes on a 3x3 placement grid: one shape class per scene,
1-3 instances, 6 colors, optional orientation for triangles. Every scene
carries a pixel-exact class mask and a caption from a closed, invertible
template grammar, so ground truth is never in question when diagnosing
the image encoder.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import RngStream


class CorpusError(Exception):
    pass


SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
ORIENTATIONS = ("up", "down", "left", "right")
FAMILIES = ("color", "count", "position", "orientation", "presence")
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

PALETTE = {
    "red": (220, 50, 40),
    "green": (60, 180, 75),
    "blue": (45, 100, 220),
    "yellow": (230, 220, 60),
    "purple": (150, 60, 200),
    "orange": (240, 150, 40),
}

# mask class ids; 0 is background
SHAPE_CLASS_ID = {"circle": 1, "square": 2, "triangle": 3}

IMAGE_SIZE = 32
CELL = 10
GRID = 3
MAX_CAPTION_LEN = 12

VOCAB = (
    "<pad>", "a", "one", "two", "three",
    "red", "green", "blue", "yellow", "purple", "orange",
    "circle", "circles", "square", "squares", "triangle", "triangles",
    "pointing", "up", "down", "left", "right",
    "in", "the", "top", "middle", "bottom", "center",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0


def vocab_hash():
    return hashlib.blake2b("\n".join(VOCAB).encode(), digest_size=8).digest()


@dataclass(frozen=True)
class AttributeRecord:
    shape_class: str
    color: str
    count: int
    cell: int
    orientation: str | None = None
    # which family this scene was sampled to stress; not caption-visible
    pattern_family: str = field(default="presence", compare=False)

    def validate(self):
        if self.shape_class not in SHAPES:
            raise CorpusError(f"unknown shape {self.shape_class!r}")
        if self.color not in COLORS:
            raise CorpusError(f"unknown color {self.color!r}")
        if self.count not in (1, 2, 3):
            raise CorpusError(f"count must be 1..3, got {self.count}")
        if not 0 <= self.cell < GRID * GRID:
            raise CorpusError(f"cell must be 0..8, got {self.cell}")
        has_orient = self.orientation is not None
        if has_orient != (self.shape_class == "triangle"):
            raise CorpusError("orientation is present iff shape is a triangle")
        if has_orient and self.orientation not in ORIENTATIONS:
            raise CorpusError(f"unknown orientation {self.orientation!r}")
        if self.pattern_family is not None and self.pattern_family not in FAMILIES:
            raise CorpusError(f"unknown pattern family {self.pattern_family!r}")


@dataclass(frozen=True)
class ShapeScene:
    image: np.ndarray          # (32, 32, 3) float32 in [0, 1]
    caption: tuple             # token ids of the full canonical caption
    mask: np.ndarray           # (32, 32) uint8 class map, 0 = background
    attrs: AttributeRecord
    scene_id: int
    split: str = "train"


@dataclass(frozen=True)
class BlindPair:
    scene_a: int
    scene_b: int
    differing_family: str
    cosine_similarity: float


# ---------------------------------------------------------------------------
# caption grammar
# ---------------------------------------------------------------------------

def caption_render(attrs, families=None):
    """Render a caption mentioning only the given attribute families.

    `families=None` renders the full canonical caption. The shape noun is
    always present; a caption with count hidden says "a <shape>" even when
    several instances are rendered - that under-specification is the point.
    """
    if families is None:
        families = set(FAMILIES)
    words = []
    show_count = "count" in families
    if show_count:
        words.append(COUNT_WORDS[attrs.count])
    else:
        words.append("a")
    if "color" in families:
        words.append(attrs.color)
    noun = attrs.shape_class
    if show_count and attrs.count > 1:
        noun += "s"
    words.append(noun)
    if "orientation" in families and attrs.orientation is not None:
        words += ["pointing", attrs.orientation]
    if "position" in families:
        words += ["in", "the", ROW_WORDS[attrs.cell // GRID], COL_WORDS[attrs.cell % GRID]]
    return " ".join(words)


def caption_parse(text):
    """Inverse of caption_render; missing optional slots come back as None."""
    words = text.split()
    if not words:
        raise CorpusError("empty caption")
    pos = 0

    def peek():
        return words[pos] if pos < len(words) else None

    count = None
    if words[pos] == "a":
        pos += 1
    else:
        matches = [c for c, w in COUNT_WORDS.items() if w == words[pos]]
        if not matches:
            raise CorpusError(f"expected count word or 'a', got {words[pos]!r}")
        count = matches[0]
        pos += 1

    color = None
    if peek() in COLORS:
        color = words[pos]
        pos += 1

    noun = peek()
    if noun is None:
        raise CorpusError("caption ends before shape noun")
    plural = noun.endswith("s") and noun[:-1] in SHAPES
    shape = noun[:-1] if plural else noun
    if shape not in SHAPES:
        raise CorpusError(f"expected shape noun, got {noun!r}")
    if count is not None and (count > 1) != plural:
        raise CorpusError(f"count {count} disagrees with noun {noun!r}")
    if count is None and plural:
        raise CorpusError(f"plural noun {noun!r} without a count word")
    pos += 1

    orientation = None
    if peek() == "pointing":
        pos += 1
        if peek() not in ORIENTATIONS:
            raise CorpusError(f"expected orientation after 'pointing', got {peek()!r}")
        if shape != "triangle":
            raise CorpusError("only triangles take an orientation")
        orientation = words[pos]
        pos += 1

    cell = None
    if peek() == "in":
        pos += 1
        if peek() != "the":
            raise CorpusError("expected 'the' after 'in'")
        pos += 1
        if peek() not in ROW_WORDS:
            raise CorpusError(f"expected row word, got {peek()!r}")
        row = ROW_WORDS.index(words[pos])
        pos += 1
        if peek() not in COL_WORDS:
            raise CorpusError(f"expected column word, got {peek()!r}")
        col = COL_WORDS.index(words[pos])
        pos += 1
        cell = row * GRID + col

    if pos != len(words):
        raise CorpusError(f"trailing words in caption: {words[pos:]}")
    return AttributeRecord(shape_class=shape, color=color, count=count, cell=cell,
                           orientation=orientation, pattern_family=None)


def caption_tokenize(text):
    words = text.split()
    if not words:
        raise CorpusError("empty caption")
    ids = []
    for w in words:
        if w not in WORD_TO_ID:
            raise CorpusError(f"out-of-vocabulary word {w!r}")
        ids.append(WORD_TO_ID[w])
    if len(ids) > MAX_CAPTION_LEN:
        raise CorpusError(f"caption longer than {MAX_CAPTION_LEN} tokens")
    return tuple(ids)


def caption_detokenize(ids):
    words = []
    for i in ids:
        if not 0 <= i < len(VOCAB):
            raise CorpusError(f"token id {i} out of vocabulary")
        if i == PAD_ID:
            continue
        words.append(VOCAB[i])
    return " ".join(words)


def pad_tokens(ids, length=MAX_CAPTION_LEN):
    if len(ids) > length:
        raise CorpusError("token sequence too long")
    return tuple(ids) + (PAD_ID,) * (length - len(ids))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_template(shape, orientation):
    """Boolean 10x10 stencil for one instance, no anti-aliasing."""
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    if shape == "circle":
        return (yy - 4.5) ** 2 + (xx - 4.5) ** 2 <= 3.7 ** 2
    if shape == "square":
        return (yy >= 2) & (yy <= 8) & (xx >= 2) & (xx <= 8)
    # triangle pointing up; other orientations are rotations of it
    tpl = (yy >= 1) & (yy <= 8) & (np.abs(xx - 4.5) <= (yy - 1) * (4.0 / 7.0))
    k = {"up": 0, "left": 1, "down": 2, "right": 3}[orientation]
    return np.rot90(tpl, k)


def render_scene(attrs, seed):
    """Deterministic rasterization of one scene; bit-identical per (attrs, seed)."""
    attrs.validate()
    capacity = GRID * GRID
    if attrs.count > capacity:
        raise CorpusError(f"count {attrs.count} exceeds grid capacity {capacity}")
    rng = RngStream(seed, ("scene",))
    cells = [attrs.cell]
    others = [c for c in range(capacity) if c != attrs.cell]
    extra = rng.choice(len(others), size=attrs.count - 1, replace=False)
    cells += [others[int(i)] for i in np.atleast_1d(extra)][: attrs.count - 1]

    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    color = np.array(PALETTE[attrs.color], dtype=np.uint8)
    cls = SHAPE_CLASS_ID[attrs.shape_class]
    tpl = _shape_template(attrs.shape_class, attrs.orientation)
    for cell in cells:
        dy = int(rng.integers(-1, 2))
        dx = int(rng.integers(-1, 2))
        y0 = 1 + (cell // GRID) * CELL + dy
        x0 = 1 + (cell % GRID) * CELL + dx
        ys, xs = np.nonzero(tpl)
        ys, xs = ys + y0, xs + x0
        keep = (ys >= 0) & (ys < IMAGE_SIZE) & (xs >= 0) & (xs < IMAGE_SIZE)
        img[ys[keep], xs[keep]] = color
        mask[ys[keep], xs[keep]] = cls

    caption = caption_tokenize(caption_render(attrs))
    return ShapeScene(image=(img.astype(np.float32) / 255.0), caption=caption,
                      mask=mask, attrs=attrs, scene_id=-1)


# ---------------------------------------------------------------------------
# corpus generation and file format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    size: int = 2000
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    shape_weights: tuple = (1.0, 1.0, 1.0)     # circle, square, triangle
    color_weights: tuple = (1.0,) * 6
    count_weights: tuple = (1.0, 1.0, 1.0)     # counts 1, 2, 3
    orientation_fraction: float | None = None  # must not exceed triangle share

    def validate(self):
        if self.size < 1:
            raise CorpusError("corpus size must be positive")
        fr = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(fr - 1.0) > 1e-6:
            raise CorpusError(f"split fractions must sum to 1, got {fr}")
        for name, w, n in (("shape", self.shape_weights, 3),
                           ("color", self.color_weights, 6),
                           ("count", self.count_weights, 3)):
            if len(w) != n or any(x < 0 for x in w) or sum(w) <= 0:
                raise CorpusError(f"invalid {name} weights {w}")
        if self.orientation_fraction is not None:
            tri = self.shape_weights[2] / sum(self.shape_weights)
            if self.orientation_fraction > tri + 1e-9:
                raise CorpusError(
                    f"orientation fraction {self.orientation_fraction} exceeds "
                    f"triangle fraction {tri:.4f}")

    def digest(self):
        text = ";".join(f"{k}={getattr(self, k)}" for k in sorted(self.__dataclass_fields__))
        return hashlib.sha256(text.encode()).digest()


def _norm(weights):
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def sample_attrs(config, seed, index):
    rng = RngStream(seed, ("attrs", index))
    family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
    shape = SHAPES[int(rng.choice(3, p=_norm(config.shape_weights)))]
    color = COLORS[int(rng.choice(6, p=_norm(config.color_weights)))]
    count = 1 + int(rng.choice(3, p=_norm(config.count_weights)))
    cell = int(rng.integers(0, GRID * GRID))
    orientation = ORIENTATIONS[int(rng.integers(0, 4))] if shape == "triangle" else None
    return AttributeRecord(shape_class=shape, color=color, count=count, cell=cell,
                           orientation=orientation, pattern_family=family)


MAGIC = b"SHPC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIII Q8s32s")
_RECORD_FIXED = struct.Struct("<QBBBBBBBB")
RECORD_SIZE = _RECORD_FIXED.size + MAX_CAPTION_LEN + 3 * IMAGE_SIZE * IMAGE_SIZE + IMAGE_SIZE * IMAGE_SIZE

_SPLIT_TO_ID = {"train": 0, "val": 1, "test": 2}
_ID_TO_SPLIT = {v: k for k, v in _SPLIT_TO_ID.items()}


class Corpus:
    def __init__(self, scenes, seed, config_digest):
        self.scenes = list(scenes)
        self.seed = seed
        self.config_digest = config_digest
        self.by_id = {s.scene_id: s for s in self.scenes}

    def split(self, name):
        return [s for s in self.scenes if s.split == name]


def generate_corpus(config, seed, path=None):
    """Pure function of (config, seed); optionally writes the binary corpus file."""
    config.validate()
    n_train = int(round(config.size * config.train_fraction))
    n_val = int(round(config.size * config.val_fraction))
    n_test = config.size - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise CorpusError("split fractions leave a negative split")

    scenes = []
    for i in range(config.size):
        attrs = sample_attrs(config, seed, i)
        scene = render_scene(attrs, seed=(seed << 20) + i)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        scenes.append(replace(scene, scene_id=i, split=split))
    corpus = Corpus(scenes, seed, config.digest())
    if path is not None:
        data = serialize_corpus(corpus, (n_train, n_val, n_test))
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
        import os
        os.replace(tmp, path)
    return corpus


def serialize_corpus(corpus, split_counts):
    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, len(corpus.scenes), *split_counts,
                        corpus.seed, vocab_hash(), corpus.config_digest)
    for s in sorted(corpus.scenes, key=lambda x: x.scene_id):
        a = s.attrs
        orient = 255 if a.orientation is None else ORIENTATIONS.index(a.orientation)
        fam = FAMILIES.index(a.pattern_family)
        out += _RECORD_FIXED.pack(s.scene_id, _SPLIT_TO_ID[s.split],
                                  SHAPES.index(a.shape_class), COLORS.index(a.color),
                                  a.count, a.cell, orient, fam, len(s.caption))
        out += bytes(pad_tokens(s.caption))
        out += (s.image * 255.0).round().astype(np.uint8).tobytes()
        out += s.mask.tobytes()
    return bytes(out)


def load_corpus(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise CorpusError("corpus file truncated")
    magic, version, size, n_train, n_val, n_test, seed, vh, cfgd = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorpusError("not a corpus file (bad magic)")
    if version > FORMAT_VERSION:
        raise CorpusError(f"corpus format version {version} newer than reader {FORMAT_VERSION}")
    if vh != vocab_hash():
        raise CorpusError("corpus vocabulary differs from this build")
    expected = _HEADER.size + size * RECORD_SIZE
    if len(data) != expected:
        raise CorpusError(f"corpus file has {len(data)} bytes, expected {expected}")

    scenes = []
    off = _HEADER.size
    npix = IMAGE_SIZE * IMAGE_SIZE
    for _ in range(size):
        sid, split_id, sh, co, count, cell, orient, fam, clen = _RECORD_FIXED.unpack_from(data, off)
        off += _RECORD_FIXED.size
        caption = tuple(data[off:off + clen])
        off += MAX_CAPTION_LEN
        img = np.frombuffer(data, dtype=np.uint8, count=3 * npix, offset=off)
        img = img.reshape(IMAGE_SIZE, IMAGE_SIZE, 3).astype(np.float32) / 255.0
        off += 3 * npix
        mask = np.frombuffer(data, dtype=np.uint8, count=npix, offset=off)
        mask = mask.reshape(IMAGE_SIZE, IMAGE_SIZE).copy()
        off += npix
        attrs = AttributeRecord(
            shape_class=SHAPES[sh], color=COLORS[co], count=count, cell=cell,
            orientation=None if orient == 255 else ORIENTATIONS[orient],
            pattern_family=FAMILIES[fam])
        scenes.append(ShapeScene(image=img, caption=caption, mask=mask, attrs=attrs,
                                 scene_id=sid, split=_ID_TO_SPLIT[split_id]))
    return Corpus(scenes, seed, cfgd)


# ---------------------------------------------------------------------------
# blind-pair mining
# ---------------------------------------------------------------------------

def differing_families(a, b):
    fams = []
    if a.shape_class != b.shape_class:
        fams.append("presence")
    if a.color != b.color:
        fams.append("color")
    if a.count != b.count:
        fams.append("count")
    if a.cell != b.cell:
        fams.append("position")
    if a.orientation != b.orientation:
        fams.append("orientation")
    return fams


def mine_blind_pairs(scenes, encoder, threshold, per_family):
    """Pairs that differ in exactly one attribute family yet sit close in
    the encoder's embedding space. Returns (pairs, warnings); output order
    is by similarity (desc) then scene ids, independent of input order."""
    if not 0 < threshold < 1:
        raise CorpusError(f"threshold must be in (0, 1), got {threshold}")
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    images = np.stack([s.image for s in scenes])
    embs = encoder.encode_images(images)
    sims = embs @ embs.T

    candidates = {f: [] for f in FAMILIES}
    for i in range(len(scenes)):
        for j in range(i + 1, len(scenes)):
            fams = differing_families(scenes[i].attrs, scenes[j].attrs)
            if len(fams) != 1:
                continue
            sim = float(sims[i, j])
            if sim < threshold:
                continue
            candidates[fams[0]].append(
                BlindPair(scenes[i].scene_id, scenes[j].scene_id, fams[0], sim))

    pairs, warnings = [], []
    for fam in FAMILIES:
        ranked = sorted(candidates[fam],
                        key=lambda p: (-p.cosine_similarity, p.scene_a, p.scene_b))
        if len(ranked) < per_family:
            warnings.append(
                f"family {fam}: only {len(ranked)} qualifying pairs (wanted {per_family})")
        pairs.extend(ranked[:per_family])
    return pairs, warnings
