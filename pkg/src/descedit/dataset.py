"""Procedural edit pairs: shape scenes, renders, masks and token streams.

Images are 3x16x16 in [-1, 1].  Objects are 4x4 squares or 12-pixel discs
(the 4x4 block minus its corners) placed at five fixed anchors that never
overlap, so every edit changes an exactly known pixel set.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, UnsupportedVersionError
from .rng import DATA, stream

IMAGE_SIZE = 16
MAX_OBJECTS = 3
TEXT_LEN = 16

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")
PALETTE = np.array([
    [1, -1, -1],
    [-1, 1, -1],
    [-1, -1, 1],
    [1, 1, -1],
    [-1, 1, 1],
    [1, -1, 1],
], dtype=np.float32)
SHAPES = ("square", "disc")
ANCHORS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
# top-left corner (row, col) of each anchor's 4x4 footprint
ANCHOR_CORNERS = ((2, 2), (2, 10), (10, 2), (10, 10), (6, 6))
EDIT_KINDS = ("recolor", "move", "add", "remove", "background")
VERBS = ("recolor", "move", "add", "remove", "paint")

SPECIAL = ("[PAD]", "[NULL]", "[BOS]", "[EOS]")
VOCAB = SPECIAL + COLORS + SHAPES + ANCHORS + ("background",) + VERBS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, NULL, BOS, EOS = 0, 1, 2, 3
COLOR0 = TOKEN_ID["red"]
SHAPE0 = TOKEN_ID["square"]
ANCHOR0 = TOKEN_ID["top-left"]
BACKGROUND = TOKEN_ID["background"]
VERB0 = TOKEN_ID["recolor"]

_SQUARE = np.ones((4, 4), dtype=bool)
_DISC = _SQUARE.copy()
_DISC[[0, 0, 3, 3], [0, 3, 0, 3]] = False
FOOTPRINTS = (_SQUARE, _DISC)


class SceneError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SceneObject:
    anchor: int
    shape: int
    color: int


@dataclass(frozen=True)
class Scene:
    background: int
    objects: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def validate(self) -> None:
        if not 0 <= self.background < len(COLORS):
            raise SceneError(f"background color id {self.background} out of range")
        if len(self.objects) > MAX_OBJECTS:
            raise SceneError(f"at most {MAX_OBJECTS} objects, got {len(self.objects)}")
        anchors = [o.anchor for o in self.objects]
        if len(set(anchors)) != len(anchors):
            raise SceneError("two objects share an anchor")
        for o in self.objects:
            if not 0 <= o.anchor < len(ANCHORS) or not 0 <= o.shape < len(SHAPES):
                raise SceneError(f"bad object {o}")
            if not 0 <= o.color < len(COLORS):
                raise SceneError(f"bad object color {o.color}")
            if o.color == self.background:
                raise SceneError("object color equals the background color")

    def object_at(self, anchor: int) -> SceneObject | None:
        for o in self.objects:
            if o.anchor == anchor:
                return o
        return None

    def free_anchors(self) -> list[int]:
        used = {o.anchor for o in self.objects}
        return [a for a in range(len(ANCHORS)) if a not in used]


def render(scene: Scene) -> np.ndarray:
    """Background first, then objects in listing order."""
    scene.validate()
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    img[:] = PALETTE[scene.background][:, None, None]
    for o in scene.objects:
        r, c = ANCHOR_CORNERS[o.anchor]
        block = img[:, r:r + 4, c:c + 4]
        block[:, FOOTPRINTS[o.shape]] = PALETTE[o.color][:, None]
    return img


# ------------------------------------------------------------------- tokens

def _pad(seq: list[int]) -> np.ndarray:
    if len(seq) > TEXT_LEN:
        raise ValueError("token sequence too long")
    out = np.full(TEXT_LEN, PAD, dtype=np.uint16)
    out[: len(seq)] = seq
    return out


def describe(scene: Scene) -> np.ndarray:
    """[BOS] <bg color> background (<color> <shape> <anchor>)* [EOS] [PAD]..."""
    seq = [BOS, COLOR0 + scene.background, BACKGROUND]
    for o in scene.objects:
        seq += [COLOR0 + o.color, SHAPE0 + o.shape, ANCHOR0 + o.anchor]
    return _pad(seq + [EOS])


def _body(tokens) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks or toks[0] != BOS or EOS not in toks:
        raise ValueError("token sequence must start with [BOS] and contain [EOS]")
    end = toks.index(EOS)
    if any(t != PAD for t in toks[end + 1:]):
        raise ValueError("non-padding tokens after [EOS]")
    return toks[1:end]


def _arg(tok: int, base: int, n: int, what: str) -> int:
    k = tok - base
    if not 0 <= k < n:
        raise ValueError(f"expected a {what} token, got {VOCAB[tok] if 0 <= tok < len(VOCAB) else tok}")
    return k


def parse_description(tokens) -> Scene:
    body = _body(tokens)
    if len(body) < 2 or body[1] != BACKGROUND or (len(body) - 2) % 3:
        raise ValueError("malformed description")
    bg = _arg(body[0], COLOR0, len(COLORS), "color")
    objs = []
    for i in range(2, len(body), 3):
        color = _arg(body[i], COLOR0, len(COLORS), "color")
        shape = _arg(body[i + 1], SHAPE0, len(SHAPES), "shape")
        anchor = _arg(body[i + 2], ANCHOR0, len(ANCHORS), "position")
        objs.append(SceneObject(anchor, shape, color))
    scene = Scene(bg, tuple(objs))
    scene.validate()
    return scene


def decode(tokens) -> str:
    return " ".join(VOCAB[int(t)] for t in tokens if int(t) != PAD)


def encode(text: str) -> np.ndarray:
    return _pad([TOKEN_ID[w] for w in text.split()])


# -------------------------------------------------------------------- edits

@dataclass(frozen=True)
class Edit:
    """One edit. ``obj`` is the object as it appears in the original scene
    (for ``add``: the added object); ``value`` is the new color (recolor,
    background) or new anchor (move)."""

    kind: int
    obj: SceneObject | None = None
    value: int = -1
    old_background: int = -1


def apply_edit(scene: Scene, edit: Edit) -> Scene:
    kind = EDIT_KINDS[edit.kind]
    objs = list(scene.objects)
    if kind == "background":
        return Scene(edit.value, scene.objects)
    if kind == "add":
        return Scene(scene.background, tuple(objs + [edit.obj]))
    if edit.obj not in objs:
        raise SceneError(f"{kind}: object {edit.obj} not in scene")
    objs.remove(edit.obj)
    if kind == "recolor":
        objs.append(replace(edit.obj, color=edit.value))
    elif kind == "move":
        objs.append(replace(edit.obj, anchor=edit.value))
    return Scene(scene.background, tuple(objs))


def revert_edit(target: Scene, edit: Edit) -> Scene:
    """Recover the original scene from the target and the edit."""
    kind = EDIT_KINDS[edit.kind]
    objs = list(target.objects)
    if kind == "background":
        return Scene(edit.old_background, target.objects)
    if kind == "remove":
        return Scene(target.background, tuple(objs + [edit.obj]))
    if kind == "add":
        objs.remove(edit.obj)
    elif kind == "recolor":
        objs.remove(replace(edit.obj, color=edit.value))
        objs.append(edit.obj)
    elif kind == "move":
        objs.remove(replace(edit.obj, anchor=edit.value))
        objs.append(edit.obj)
    return Scene(target.background, tuple(objs))


def instruct(edit: Edit) -> np.ndarray:
    """Imperative tokens naming only the changed object (or background)."""
    kind = EDIT_KINDS[edit.kind]
    seq = [BOS, VERB0 + edit.kind]
    if kind == "background":
        seq += [COLOR0 + edit.old_background, BACKGROUND, COLOR0 + edit.value]
    else:
        o = edit.obj
        seq += [COLOR0 + o.color, SHAPE0 + o.shape, ANCHOR0 + o.anchor]
        if kind == "recolor":
            seq.append(COLOR0 + edit.value)
        elif kind == "move":
            seq.append(ANCHOR0 + edit.value)
    return _pad(seq + [EOS])


def parse_instruction(tokens) -> Edit:
    body = _body(tokens)
    if not body:
        raise ValueError("empty instruction")
    kind = _arg(body[0], VERB0, len(VERBS), "verb")
    args = body[1:]
    if EDIT_KINDS[kind] == "background":
        if len(args) != 3 or args[1] != BACKGROUND:
            raise ValueError("malformed background instruction")
        return Edit(kind, value=_arg(args[2], COLOR0, len(COLORS), "color"),
                    old_background=_arg(args[0], COLOR0, len(COLORS), "color"))
    want = 4 if EDIT_KINDS[kind] in ("recolor", "move") else 3
    if len(args) != want:
        raise ValueError(f"malformed {EDIT_KINDS[kind]} instruction")
    obj = SceneObject(_arg(args[2], ANCHOR0, len(ANCHORS), "position"),
                      _arg(args[1], SHAPE0, len(SHAPES), "shape"),
                      _arg(args[0], COLOR0, len(COLORS), "color"))
    value = -1
    if EDIT_KINDS[kind] == "recolor":
        value = _arg(args[3], COLOR0, len(COLORS), "color")
    elif EDIT_KINDS[kind] == "move":
        value = _arg(args[3], ANCHOR0, len(ANCHORS), "position")
    return Edit(kind, obj, value)


# -------------------------------------------------------------------- pairs

@dataclass(eq=False)
class EditPair:
    original: Scene
    target: Scene
    kind: int
    original_image: np.ndarray = field(repr=False)
    target_image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    description: np.ndarray = field(repr=False)
    instruction: np.ndarray = field(repr=False)

    def tokens(self, mode: str) -> np.ndarray:
        if mode == "description":
            return self.description
        if mode == "instruction":
            return self.instruction
        raise ValueError(f"text mode must be 'description' or 'instruction', got {mode!r}")

    def same_as(self, other: "EditPair") -> bool:
        return (self.original == other.original and self.target == other.target
                and self.kind == other.kind
                and all(np.array_equal(getattr(self, f), getattr(other, f)) and
                        getattr(self, f).dtype == getattr(other, f).dtype
                        for f in ("original_image", "target_image", "mask", "description", "instruction")))


def change_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.any(a != b, axis=0)


def make_pair(original: Scene, edit: Edit) -> EditPair:
    target = apply_edit(original, edit)
    oi, ti = render(original), render(target)
    mask = change_mask(oi, ti)
    if not mask.any():
        raise SceneError("edit leaves the image unchanged")
    return EditPair(original, target, edit.kind, oi, ti, mask, describe(target), instruct(edit))


def _random_objects(rng, n: int, background: int) -> tuple:
    anchors = rng.choice(len(ANCHORS), size=n, replace=False)
    allowed = [c for c in range(len(COLORS)) if c != background]
    return tuple(SceneObject(int(a), int(rng.integers(len(SHAPES))), int(rng.choice(allowed)))
                 for a in anchors)


def random_scene(rng, min_objects: int = 0, max_objects: int = MAX_OBJECTS) -> Scene:
    bg = int(rng.integers(len(COLORS)))
    n = int(rng.integers(min_objects, max_objects + 1))
    return Scene(bg, _random_objects(rng, n, bg))


def random_pair(rng) -> EditPair:
    kind = int(rng.integers(len(EDIT_KINDS)))
    name = EDIT_KINDS[kind]
    if name == "add":
        scene = random_scene(rng, 0, MAX_OBJECTS - 1)
    elif name == "background":
        scene = random_scene(rng, 0, MAX_OBJECTS)
    else:
        scene = random_scene(rng, 1, MAX_OBJECTS)
    if name == "background":
        used = {scene.background} | {o.color for o in scene.objects}
        choices = [c for c in range(len(COLORS)) if c not in used]
        edit = Edit(kind, value=int(rng.choice(choices)), old_background=scene.background)
    elif name == "add":
        anchor = int(rng.choice(scene.free_anchors()))
        allowed = [c for c in range(len(COLORS)) if c != scene.background]
        edit = Edit(kind, SceneObject(anchor, int(rng.integers(len(SHAPES))), int(rng.choice(allowed))))
    else:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        if name == "recolor":
            allowed = [c for c in range(len(COLORS)) if c not in (scene.background, obj.color)]
            edit = Edit(kind, obj, int(rng.choice(allowed)))
        elif name == "move":
            edit = Edit(kind, obj, int(rng.choice(scene.free_anchors())))
        else:
            edit = Edit(kind, obj)
    return make_pair(scene, edit)


def gen_dataset(seed: int, n: int) -> list[EditPair]:
    """``n`` pairs; pair ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [random_pair(stream(seed, DATA, i)) for i in range(n)]


def pair_from_tokens(description, instruction, kind: int) -> tuple[Scene, Scene]:
    target = parse_description(description)
    edit = parse_instruction(instruction)
    if edit.kind != kind:
        raise ValueError("instruction verb disagrees with the stored edit kind")
    return revert_edit(target, edit), target


def stack(pairs, attr: str) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in pairs])


# ------------------------------------------------------------ serialization

MAGIC = b"DEDS"
VERSION = 1
HEADER = struct.Struct("<4sII")
RECORD_DTYPE = np.dtype([
    ("original", "<f4", (3, IMAGE_SIZE, IMAGE_SIZE)),
    ("target", "<f4", (3, IMAGE_SIZE, IMAGE_SIZE)),
    ("mask", "u1", (IMAGE_SIZE, IMAGE_SIZE)),
    ("description", "<u2", (TEXT_LEN,)),
    ("instruction", "<u2", (TEXT_LEN,)),
    ("kind", "u1"),
])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 6465
TRAILER = struct.Struct("<I")


def dataset_file_size(n: int) -> int:
    return HEADER.size + n * RECORD_SIZE + TRAILER.size


def dumps_dataset(pairs) -> bytes:
    rec = np.zeros(len(pairs), dtype=RECORD_DTYPE)
    for i, p in enumerate(pairs):
        rec[i]["original"] = p.original_image
        rec[i]["target"] = p.target_image
        rec[i]["mask"] = p.mask
        rec[i]["description"] = p.description
        rec[i]["instruction"] = p.instruction
        rec[i]["kind"] = p.kind
    payload = rec.tobytes()
    return HEADER.pack(MAGIC, VERSION, len(pairs)) + payload + TRAILER.pack(zlib.crc32(payload))


def loads_dataset(blob: bytes) -> list[EditPair]:
    if len(blob) < HEADER.size:
        raise TruncatedFileError(f"dataset file has {len(blob)} bytes, shorter than its header")
    magic, version, n = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"dataset version {version} is not supported")
    want = dataset_file_size(n)
    if len(blob) < want:
        raise TruncatedFileError(f"dataset file truncated: {len(blob)} of {want} bytes")
    if len(blob) > want:
        raise FormatError(f"dataset file has {len(blob) - want} trailing bytes")
    payload = blob[HEADER.size: want - TRAILER.size]
    (crc,) = TRAILER.unpack_from(blob, want - TRAILER.size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("dataset payload CRC32 mismatch")
    rec = np.frombuffer(payload, dtype=RECORD_DTYPE)
    pairs = []
    for r in rec:
        kind = int(r["kind"])
        desc = r["description"].astype(np.uint16)
        instr = r["instruction"].astype(np.uint16)
        try:
            original, target = pair_from_tokens(desc, instr, kind)
        except ValueError as exc:
            raise FormatError(f"record tokens do not decode: {exc}") from exc
        pairs.append(EditPair(original, target, kind, r["original"].astype(np.float32),
                              r["target"].astype(np.float32), r["mask"].astype(bool), desc, instr))
    return pairs


def save_dataset(pairs, path) -> None:
    Path(path).write_bytes(dumps_dataset(pairs))


def load_dataset(path) -> list[EditPair]:
    return loads_dataset(Path(path).read_bytes())
