"""Deterministic synthetic scenes with exact condition maps, prompts and segment masks.

Scenes hold one to three coloured squares, circles or triangles on a 16×16
black canvas. All placement math is integer-only so a seed renders the same
pixels on every platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import CONDITION_TYPES, ConditionBundle, ConditionInstance
from .errors import FormatError, GenerationError, InputError
from .losses import SegmentAnnotation

SIZE = 16
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
PAD, AND = "<pad>", "and"
VOCAB = (PAD, AND) + COLORS + SHAPES + tuple(f"<r{i}>" for i in range(16))
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_ID[PAD]
MAX_TOKENS = 8

MIN_CENTER_DIST2 = 25
MIN_VISIBLE = 4
MAX_RETRIES = 1000
EDGE_THRESHOLD = 0.25
LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    center: tuple  # (row, col), integer pixel-corner coordinates
    half_size: int
    z_order: int

    def support(self) -> np.ndarray:
        """Full (unoccluded) binary support on the canvas."""
        cy, cx = self.center
        h = self.half_size
        ys, xs = np.mgrid[0:SIZE, 0:SIZE]
        in_box = (ys >= cy - h) & (ys < cy + h) & (xs >= cx - h) & (xs < cx + h)
        if self.shape == "square":
            m = in_box
        elif self.shape == "circle":
            m = (2 * ys + 1 - 2 * cy) ** 2 + (2 * xs + 1 - 2 * cx) ** 2 <= 4 * h * h
        elif self.shape == "triangle":
            row = ys - (cy - h)
            m = in_box & (np.abs(2 * xs + 1 - 2 * cx) <= row + 1)
        else:
            raise InputError(f"unknown shape {self.shape!r}")
        return m.astype(np.uint8)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int = 0

    def paint_order(self) -> list[int]:
        return sorted(range(len(self.objects)), key=lambda j: self.objects[j].z_order)

    def owner(self) -> np.ndarray:
        """Index of the topmost object per pixel, -1 for background."""
        owner = np.full((SIZE, SIZE), -1, dtype=np.int64)
        for j in self.paint_order():
            owner[self.objects[j].support() == 1] = j
        return owner

    def visible_masks(self) -> list[np.ndarray]:
        owner = self.owner()
        return [(owner == j).astype(np.uint8) for j in range(len(self.objects))]


def sample_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 4))
    for _ in range(MAX_RETRIES):
        objects = []
        z_orders = rng.permutation(count)
        for j in range(count):
            h = int(rng.integers(2, 5))
            cy = int(rng.integers(h, SIZE - h + 1))
            cx = int(rng.integers(h, SIZE - h + 1))
            objects.append(SceneObject(
                shape=SHAPES[int(rng.integers(3))],
                color=COLORS[int(rng.integers(3))],
                center=(cy, cx),
                half_size=h,
                z_order=int(z_orders[j]),
            ))
        if not _centers_separated(objects):
            continue
        scene = Scene(tuple(objects), seed)
        if all(m.sum() >= MIN_VISIBLE for m in scene.visible_masks()):
            return scene
    raise GenerationError(f"could not place {count} objects for seed {seed}")


def _centers_separated(objects) -> bool:
    for a in range(len(objects)):
        for b in range(a + 1, len(objects)):
            dy = objects[a].center[0] - objects[b].center[0]
            dx = objects[a].center[1] - objects[b].center[1]
            if dy * dy + dx * dx < MIN_CENTER_DIST2:
                return False
    return True


def color_vector(color: str) -> np.ndarray:
    v = np.zeros(3, dtype=np.float32)
    v[COLORS.index(color)] = 1
    return v


def render(scene: Scene) -> np.ndarray:
    img = np.zeros((3, SIZE, SIZE), dtype=np.float32)
    for j in scene.paint_order():
        obj = scene.objects[j]
        img[:, obj.support() == 1] = color_vector(obj.color)[:, None]
    return img


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    padded = np.pad(gray.astype(np.float64), 1)
    gx = np.zeros_like(gray, dtype=np.float64)
    gy = np.zeros_like(gray, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            window = padded[dy:dy + gray.shape[0], dx:dx + gray.shape[1]]
            gx += SOBEL_X[dy, dx] * window
            gy += SOBEL_Y[dy, dx] * window
    return np.sqrt(gx * gx + gy * gy)


def extract_edge(image: np.ndarray) -> np.ndarray:
    """Binary Sobel edges of the luminance, kept only on non-background pixels."""
    image = np.asarray(image, dtype=np.float64)
    gray = np.tensordot(LUMA, image, axes=1)
    edges = (sobel_magnitude(gray) > EDGE_THRESHOLD) & (image.max(axis=0) > 0)
    return edges.astype(np.float32)[None]


def extract_seg(scene: Scene) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class map with value ``(j + 1) / 3`` for topmost object ``j``, plus per-object visible masks."""
    owner = scene.owner()
    seg = np.where(owner >= 0, (owner + 1) / 3.0, 0.0).astype(np.float32)
    return seg[None], scene.visible_masks()


def extract_depth(scene: Scene) -> np.ndarray:
    owner = scene.owner()
    depth = np.zeros((SIZE, SIZE), dtype=np.float32)
    for j, obj in enumerate(scene.objects):
        depth[owner == j] = 1.0 / (1.0 + obj.z_order)
    return depth[None]


def encode_prompt(prompt: str) -> list[int]:
    try:
        ids = [TOKEN_ID[w] for w in prompt.split()]
    except KeyError as exc:
        raise InputError(f"word {exc.args[0]!r} not in vocabulary") from None
    if len(ids) > MAX_TOKENS:
        raise InputError(f"prompt longer than {MAX_TOKENS} tokens")
    return ids


def decode_tokens(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids if int(i) != PAD_ID)


def tokens_and_segments(scene: Scene) -> tuple[list[int], list[SegmentAnnotation]]:
    words = []
    segments = []
    masks = scene.visible_masks()
    for j, obj in enumerate(scene.objects):
        if j:
            words.append(AND)
        start = len(words)
        words += [obj.color, obj.shape]
        segments.append(SegmentAnnotation(frozenset({start, start + 1}), masks[j]))
    return encode_prompt(" ".join(words)), segments


@dataclass(frozen=True)
class DatasetRecord:
    image: np.ndarray  # (3, 16, 16) float32 in [0, 1]
    bundle: ConditionBundle
    tokens: tuple
    segments: tuple
    seed: int = 0

    @property
    def prompt(self) -> str:
        return decode_tokens(self.tokens)

    def segment_colors(self) -> list[str]:
        return [VOCAB[self.tokens[min(s.token_segment)]] for s in self.segments]


def make_record(seed: int) -> DatasetRecord:
    scene = sample_scene(seed)
    image = render(scene)
    edge = extract_edge(image)
    seg, masks = extract_seg(scene)
    depth = extract_depth(scene)
    tokens, segments = tokens_and_segments(scene)
    instances = []
    for j, mask in enumerate(masks):
        for ctype, full in zip(CONDITION_TYPES, (edge, seg, depth)):
            instances.append(ConditionInstance(
                condition_type=ctype,
                map=(full * mask[None]).astype(np.float32),
                instance_mask=mask,
                token_segment=segments[j].token_segment,
            ))
    return DatasetRecord(image, ConditionBundle(tuple(instances)), tuple(tokens), tuple(segments), int(seed))


def record_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint64)[0])


def make_corpus(seed: int, count: int) -> list[DatasetRecord]:
    return [make_record(record_seed(seed, i)) for i in range(count)]


# --- binary dataset format -------------------------------------------------

MAGIC = b"FXDS"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
TAGS = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


def write_array(buf: bytearray, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4")
    tag = TAGS.get(arr.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    buf += struct.pack("<BB", tag, arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr).tobytes()


class Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtypes=DTYPES) -> np.ndarray:
        tag, rank = self.unpack("<BB")
        if tag not in dtypes:
            raise FormatError(f"{self.what}: unknown dtype tag {tag}")
        shape = self.unpack(f"<{rank}I") if rank else ()
        dt = dtypes[tag]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()


def _membership(segment, n):
    row = np.zeros(n, dtype=np.uint8)
    row[list(segment)] = 1
    return row


def encode_record(rec: DatasetRecord) -> bytes:
    n = len(rec.tokens)
    insts = rec.bundle.instances
    arrays = [
        rec.image.astype(np.float32),
        np.array(rec.tokens, dtype=np.uint8),
        np.array([_membership(s.token_segment, n) for s in rec.segments], dtype=np.uint8).reshape(-1, n),
        np.array([s.mask for s in rec.segments], dtype=np.uint8).reshape(-1, SIZE, SIZE),
        np.array([CONDITION_TYPES.index(i.condition_type) for i in insts], dtype=np.uint8),
        np.array([i.map[0] for i in insts], dtype=np.float32).reshape(-1, SIZE, SIZE),
        np.array([i.instance_mask for i in insts], dtype=np.uint8).reshape(-1, SIZE, SIZE),
        np.array([_membership(i.token_segment, n) for i in insts], dtype=np.uint8).reshape(-1, n),
        np.array([i.sparse_flag for i in insts], dtype=np.uint8),
    ]
    buf = bytearray(struct.pack("<QI", rec.seed, len(arrays)))
    for arr in arrays:
        write_array(buf, arr)
    return bytes(buf)


def decode_record(reader: Reader) -> DatasetRecord:
    seed, n_arrays = reader.unpack("<QI")
    if n_arrays != 9:
        raise FormatError(f"{reader.what}: expected 9 arrays per record, found {n_arrays}")
    image, tokens, seg_tok, seg_masks, ctypes, cmaps, cmasks, ctok, csparse = (reader.array() for _ in range(9))

    def members(row):
        return frozenset(int(i) for i in np.flatnonzero(row))

    segments = tuple(SegmentAnnotation(members(t), m) for t, m in zip(seg_tok, seg_masks))
    instances = tuple(
        ConditionInstance(CONDITION_TYPES[int(ct)], cm[None], mk, members(tk), bool(sp))
        for ct, cm, mk, tk, sp in zip(ctypes, cmaps, cmasks, ctok, csparse)
    )
    return DatasetRecord(image, ConditionBundle(instances), tuple(int(t) for t in tokens), segments, int(seed))


def write_dataset(records, path) -> None:
    buf = bytearray(MAGIC + struct.pack("<IQ", VERSION, len(records)))
    for rec in records:
        buf += encode_record(rec)
    Path(path).write_bytes(bytes(buf))


def read_dataset(path) -> list[DatasetRecord]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    reader = Reader(data, str(path))
    reader.take(4)
    version, count = reader.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    records = [decode_record(reader) for _ in range(count)]
    if reader.pos != len(data):
        raise FormatError(f"{path}: {len(data) - reader.pos} trailing bytes")
    return records


def records_equal(a: DatasetRecord, b: DatasetRecord) -> bool:
    """Bitwise equality of every stored field."""
    if a.seed != b.seed or a.tokens != b.tokens or len(a.segments) != len(b.segments):
        return False
    if a.image.tobytes() != b.image.tobytes() or a.image.shape != b.image.shape:
        return False
    for s, t in zip(a.segments, b.segments):
        if s.token_segment != t.token_segment or s.mask.tobytes() != np.asarray(t.mask, np.uint8).tobytes():
            return False
    if len(a.bundle.instances) != len(b.bundle.instances):
        return False
    for i, j in zip(a.bundle.instances, b.bundle.instances):
        if (i.condition_type, i.token_segment, i.sparse_flag) != (j.condition_type, j.token_segment, j.sparse_flag):
            return False
        if i.map.astype("<f4").tobytes() != j.map.astype("<f4").tobytes():
            return False
        if np.asarray(i.instance_mask, np.uint8).tobytes() != np.asarray(j.instance_mask, np.uint8).tobytes():
            return False
    return True
