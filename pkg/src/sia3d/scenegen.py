"""Procedural synthetic indoor scenes with boxes and template captions.

A scene is a rectangular room with non-overlapping furniture boxes.  Points
are sampled on box surfaces plus floor/walls (5% uniform noise), colored per
object.  Each instance gets three template captions:

    attribute   "this is a <color> <class> ."
    relation    "it is <rel> the <class'> ."      (nearest other instance)
    global      "it is in the <corner|middle> of the room ."

Generation is a pure function of (seed, n_objects, n_points), which is what
makes the corpus reproducible and the relation captions re-derivable from
the boxes alone.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D

__all__ = [
    "CLASS_NAMES", "COLOR_NAMES", "GtInstance", "SyntheticScene", "Vocabulary",
    "PlacementError", "DatasetFormatError", "DatasetVersionError",
    "generate_scene", "build_vocab", "save_dataset", "load_dataset",
    "relation_between", "global_position", "nearest_instance",
    "composed_references", "write_manifest",
]

PAD, BOS, EOS, UNK = "[PAD]", "[BOS]", "[EOS]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, UNK)

CLASS_NAMES = (
    "chair", "table", "bed", "sofa", "shelf", "monitor",
    "door", "window", "cabinet", "lamp", "refrigerator", "trash_can",
)

# (w, d, h) ranges in meters.  Chunky, stylized furniture: every extent is
# large enough that IoU-gated detection is feasible at desk training budgets,
# while volume/aspect/height signatures stay distinctive per class.
_CLASS_SIZES = {
    "chair":        ((0.55, 0.75), (0.55, 0.75), (0.85, 1.05)),
    "table":        ((1.20, 1.70), (0.75, 1.05), (0.70, 0.85)),
    "bed":          ((1.90, 2.20), (1.50, 1.80), (0.55, 0.75)),
    "sofa":         ((1.70, 2.10), (0.85, 1.05), (0.80, 1.00)),
    "shelf":        ((0.90, 1.30), (0.35, 0.50), (1.50, 1.80)),
    "monitor":      ((0.55, 0.75), (0.35, 0.45), (0.40, 0.55)),
    "door":         ((0.95, 1.15), (0.35, 0.50), (2.00, 2.30)),
    "window":       ((0.95, 1.35), (0.30, 0.40), (0.95, 1.25)),
    "cabinet":      ((0.75, 1.05), (0.50, 0.65), (1.25, 1.60)),
    "lamp":         ((0.40, 0.55), (0.40, 0.55), (1.35, 1.60)),
    "refrigerator": ((0.75, 0.95), (0.70, 0.85), (1.70, 1.95)),
    "trash_can":    ((0.40, 0.55), (0.40, 0.55), (0.50, 0.70)),
}
_WALL_CLASSES = ("door", "window")
_FLOAT_CLASSES = {"monitor": (0.9, 1.15), "window": (1.1, 1.4)}

COLOR_NAMES = ("red", "green", "blue", "yellow", "white", "black", "brown", "gray")
_COLOR_RGB = {
    "red": (0.80, 0.10, 0.10), "green": (0.10, 0.70, 0.10), "blue": (0.10, 0.20, 0.80),
    "yellow": (0.90, 0.85, 0.10), "white": (0.95, 0.95, 0.95), "black": (0.05, 0.05, 0.05),
    "brown": (0.55, 0.35, 0.15), "gray": (0.50, 0.50, 0.50),
}
_ROOM_RGB = (0.65, 0.62, 0.58)

RELATIONS = ("left of", "right of", "next to", "in front of", "behind")

MAGIC = b"SIA1"
FORMAT_VERSION = 1


class PlacementError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass
class GtInstance:
    instance_id: int
    class_label: str
    color_label: str
    box: Box3D
    captions: list  # list of token lists; index 0 is the attribute form

    def __post_init__(self):
        if self.class_label not in CLASS_NAMES:
            raise ValueError(f"unknown class label {self.class_label!r}")
        if self.color_label not in COLOR_NAMES:
            raise ValueError(f"unknown color label {self.color_label!r}")
        if len(self.captions) < 2:
            raise ValueError("every instance needs at least two reference captions")


@dataclass
class SyntheticScene:
    scene_id: str
    room_size: tuple          # (ex, ey, ez); room spans [0, e] per axis
    points: np.ndarray        # (N, 3) float32
    features: np.ndarray      # (N, F) float32, F=3 color channels in [0, 1]
    instances: list = field(default_factory=list)

    @property
    def n_points(self):
        return self.points.shape[0]

    def room_diag(self):
        return float(np.linalg.norm(self.room_size))


# -- caption rules -----------------------------------------------------------

def _interval_overlap(lo1, hi1, lo2, hi2):
    return min(hi1, hi2) >= max(lo1, lo2)


def relation_between(box_a, box_b):
    """Spatial relation of a relative to b (axis-aligned rule).

    y-extents overlap and x-extents disjoint -> left/right by center x;
    x-extents overlap and y-extents disjoint -> in front of/behind by center y;
    anything else -> next to.
    """
    amin, amax = box_a.min_corner, box_a.max_corner
    bmin, bmax = box_b.min_corner, box_b.max_corner
    x_ov = _interval_overlap(amin[0], amax[0], bmin[0], bmax[0])
    y_ov = _interval_overlap(amin[1], amax[1], bmin[1], bmax[1])
    if y_ov and not x_ov:
        return "left of" if box_a.center[0] < box_b.center[0] else "right of"
    if x_ov and not y_ov:
        return "in front of" if box_a.center[1] < box_b.center[1] else "behind"
    return "next to"


def global_position(box, room_size):
    """"corner" when the center is within 25% of the half-extent of both an
    x-wall and a y-wall, else "middle"."""
    ex, ey, _ = room_size
    cx, cy, _ = box.center
    near_x = min(cx, ex - cx) < 0.25 * (ex / 2.0)
    near_y = min(cy, ey - cy) < 0.25 * (ey / 2.0)
    return "corner" if (near_x and near_y) else "middle"


def nearest_instance(instances, i):
    """Index of the instance nearest to instance i by center distance,
    ties to the lower index."""
    ci = np.asarray(instances[i].box.center)
    best, best_d = -1, np.inf
    for j, inst in enumerate(instances):
        if j == i:
            continue
        d = float(np.linalg.norm(np.asarray(inst.box.center) - ci))
        if d < best_d - 1e-12:
            best, best_d = j, d
    return best


def _captions_for(instances, i, room_size):
    inst = instances[i]
    attr = f"this is a {inst.color_label} {inst.class_label} .".split()
    j = nearest_instance(instances, i)
    rel = relation_between(inst.box, instances[j].box)
    relation = f"it is {rel} the {instances[j].class_label} .".split()
    where = global_position(inst.box, room_size)
    glob = f"it is in the {where} of the room .".split()
    return [attr, relation, glob]


def composed_references(instance):
    """Reference set for the final (two-part) caption of an instance: the
    attribute caption concatenated with each relational/global caption."""
    attr = instance.captions[0]
    return [attr + rest for rest in instance.captions[1:]]


# -- placement and point sampling ---------------------------------------------

def _boxes_clear(box, others, gap=0.02):
    mn, mx = np.asarray(box.min_corner), np.asarray(box.max_corner)
    for o in others:
        omn, omx = np.asarray(o.min_corner), np.asarray(o.max_corner)
        # overlap iff the gap-padded intervals intersect on every axis
        if np.all(np.maximum(mn - gap, omn) < np.minimum(mx + gap, omx)):
            return False
    return True


def _place_one(rng, cls, room, others):
    ex, ey, ez = room
    (wlo, whi), (dlo, dhi), (hlo, hhi) = _CLASS_SIZES[cls]
    for _ in range(200):
        w = rng.uniform(wlo, whi)
        d = rng.uniform(dlo, dhi)
        h = rng.uniform(hlo, hhi)
        if cls in _WALL_CLASSES:
            wall = rng.integers(0, 4)
            if wall >= 2:           # x walls: thin axis along x
                w, d = d, w
            if wall == 0:
                cy, cx = d / 2.0, rng.uniform(0.2 + w / 2, ex - 0.2 - w / 2)
            elif wall == 1:
                cy, cx = ey - d / 2.0, rng.uniform(0.2 + w / 2, ex - 0.2 - w / 2)
            elif wall == 2:
                cx, cy = w / 2.0, rng.uniform(0.2 + d / 2, ey - 0.2 - d / 2)
            else:
                cx, cy = ex - w / 2.0, rng.uniform(0.2 + d / 2, ey - 0.2 - d / 2)
        else:
            cx = rng.uniform(0.1 + w / 2, ex - 0.1 - w / 2)
            cy = rng.uniform(0.1 + d / 2, ey - 0.1 - d / 2)
        if cls in _FLOAT_CLASSES:
            zlo, zhi = _FLOAT_CLASSES[cls]
            cz = rng.uniform(zlo, zhi)
            cz = min(cz, ez - h / 2.0 - 0.05)
        else:
            cz = h / 2.0
        box = Box3D((cx, cy, cz), (w, d, h))
        if _boxes_clear(box, others):
            return box
    return None


def _sample_on_faces(rng, box, n):
    """n points uniform over the box surface, faces weighted by area."""
    mn = np.asarray(box.min_corner)
    mx = np.asarray(box.max_corner)
    s = mx - mn
    areas = np.asarray([s[1] * s[2], s[1] * s[2], s[0] * s[2], s[0] * s[2], s[0] * s[1], s[0] * s[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    pts = np.empty((n, 3))
    axis = face // 2            # 0:x faces, 1:y faces, 2:z faces
    side = face % 2             # 0:min, 1:max
    for k in range(3):
        a, b = [i for i in range(3) if i != k]
        m = axis == k
        pts[m, k] = np.where(side[m] == 0, mn[k], mx[k])
        pts[m, a] = mn[a] + u[m] * s[a]
        pts[m, b] = mn[b] + v[m] * s[b]
    return pts


def _sample_room_shell(rng, room, n):
    """Points on the floor and the four walls, weighted by area."""
    ex, ey, ez = room
    areas = np.asarray([ex * ey, ex * ez, ex * ez, ey * ez, ey * ez])
    which = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    pts = np.empty((n, 3))
    m = which == 0
    pts[m] = np.stack([u[m] * ex, v[m] * ey, np.zeros(m.sum())], axis=1)
    for idx, (fix_axis, fix_val) in enumerate([(1, 0.0), (1, ey), (0, 0.0), (0, ex)], start=1):
        m = which == idx
        free = 0 if fix_axis == 1 else 1
        out = np.empty((m.sum(), 3))
        out[:, free] = u[m] * (ex if free == 0 else ey)
        out[:, fix_axis] = fix_val
        out[:, 2] = v[m] * ez
        pts[m] = out
    return pts


def generate_scene(rng_seed, n_objects, n_points):
    """Build one scene deterministically from (seed, n_objects, n_points)."""
    if not 2 <= n_objects <= len(CLASS_NAMES):
        raise ValueError(f"n_objects must be in [2, {len(CLASS_NAMES)}], got {n_objects}")
    if n_points < 512:
        raise ValueError(f"n_points must be >= 512, got {n_points}")
    rng = np.random.default_rng(rng_seed)
    # compact rooms keep the object/background point ratio workable; very
    # crowded scenes get more floor area so placement still succeeds
    if n_objects <= 8:
        room = (rng.uniform(3.6, 5.6), rng.uniform(3.6, 5.6), rng.uniform(2.5, 2.9))
    else:
        room = (rng.uniform(5.5, 7.5), rng.uniform(5.5, 7.5), rng.uniform(2.5, 2.9))

    boxes, classes, colors = [], [], []
    attempts = 0
    while len(boxes) < n_objects:
        attempts += 1
        if attempts > 1000:
            raise PlacementError(f"could not place {n_objects} objects after 1000 attempts (seed={rng_seed})")
        cls = CLASS_NAMES[rng.integers(0, len(CLASS_NAMES))]
        box = _place_one(rng, cls, room, boxes)
        if box is not None:
            boxes.append(box)
            classes.append(cls)
            colors.append(COLOR_NAMES[rng.integers(0, len(COLOR_NAMES))])

    n_obj_pts = int(round(0.60 * n_points))
    n_noise = int(round(0.05 * n_points))
    n_shell = n_points - n_obj_pts - n_noise

    areas = np.asarray([2 * (b.size[0] * b.size[1] + b.size[0] * b.size[2] + b.size[1] * b.size[2])
                        for b in boxes])
    per_obj = np.maximum(1, np.floor(n_obj_pts * areas / areas.sum()).astype(int))
    per_obj[0] += n_obj_pts - per_obj.sum()

    pts_parts, rgb_parts = [], []
    for box, color, n in zip(boxes, colors, per_obj):
        p = _sample_on_faces(rng, box, int(n))
        c = np.asarray(_COLOR_RGB[color]) + rng.normal(0.0, 0.03, size=(int(n), 3))
        pts_parts.append(p)
        rgb_parts.append(c)
    shell = _sample_room_shell(rng, room, n_shell)
    pts_parts.append(shell)
    rgb_parts.append(np.asarray(_ROOM_RGB) + rng.normal(0.0, 0.04, size=(n_shell, 3)))
    noise = rng.uniform(size=(n_noise, 3)) * np.asarray(room)
    pts_parts.append(noise)
    rgb_parts.append(rng.uniform(size=(n_noise, 3)))

    pts = np.concatenate(pts_parts, axis=0)
    rgb = np.clip(np.concatenate(rgb_parts, axis=0), 0.0, 1.0)
    perm = rng.permutation(n_points)
    pts, rgb = pts[perm], rgb[perm]

    instances = []
    for i, (box, cls, color) in enumerate(zip(boxes, classes, colors)):
        instances.append(GtInstance(i, cls, color, box, captions=[["x"], ["x"]]))
    for i, inst in enumerate(instances):
        inst.captions = _captions_for(instances, i, room)

    return SyntheticScene(
        scene_id=f"scene{rng_seed:08d}",
        room_size=tuple(float(v) for v in room),
        points=pts.astype(np.float32),
        features=rgb.astype(np.float32),
        instances=instances,
    )


# -- vocabulary ---------------------------------------------------------------

class Vocabulary:
    """Token <-> id map with fixed specials at ids 0..3."""

    def __init__(self, tokens):
        for t in tokens:
            if t in SPECIALS:
                raise ValueError(f"token {t!r} collides with a special")
        self.tokens = list(SPECIALS) + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        return [self.index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


def build_vocab(corpus):
    """Vocabulary over a corpus of caption token lists, sorted after specials."""
    if not corpus:
        raise ValueError("build_vocab: corpus is empty")
    seen = set()
    for caption in corpus:
        for tok in caption:
            if tok == "":
                raise ValueError("build_vocab: empty-string token")
            seen.add(tok)
    return Vocabulary(sorted(seen))


def scene_caption_corpus(scenes):
    out = []
    for sc in scenes:
        for inst in sc.instances:
            out.extend(inst.captions)
    return out


# -- persistence ---------------------------------------------------------------

class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def read(self, n):
        if self.off + n > len(self.data):
            raise DatasetFormatError(f"truncated dataset file at byte {self.off}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _read_str(r):
    (n,) = r.unpack("<H")
    return r.read(n).decode("utf-8")


def _scene_bytes(scene):
    parts = [_pack_str(scene.scene_id)]
    ex, ey, ez = scene.room_size
    parts.append(struct.pack("<6f", 0.0, 0.0, 0.0, ex, ey, ez))
    n, f = scene.points.shape[0], scene.features.shape[1]
    parts.append(struct.pack("<IH", n, f))
    parts.append(np.ascontiguousarray(scene.points, dtype=np.float32).tobytes())
    parts.append(np.ascontiguousarray(scene.features, dtype=np.float32).tobytes())
    parts.append(struct.pack("<H", len(scene.instances)))
    for inst in scene.instances:
        parts.append(struct.pack("<H", inst.instance_id))
        parts.append(struct.pack("<BB", CLASS_NAMES.index(inst.class_label),
                                 COLOR_NAMES.index(inst.color_label)))
        parts.append(struct.pack("<6f", *inst.box.center, *inst.box.size))
        parts.append(struct.pack("<H", len(inst.captions)))
        for cap in inst.captions:
            parts.append(_pack_str(" ".join(cap)))
    return b"".join(parts)


def save_dataset(path, scenes):
    """Write the binary container plus the sidecar manifest (path + ".manifest.tsv")."""
    body = b"".join(_scene_bytes(sc) for sc in scenes)
    head = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(scenes))
    payload = head + body
    payload += struct.pack("<I", zlib.crc32(payload))
    _atomic_write_bytes(str(path), payload)
    write_manifest(str(path) + ".manifest.tsv", scenes)


def write_manifest(path, scenes):
    lines = []
    for sc in scenes:
        for inst in sc.instances:
            for cap in inst.captions:
                lines.append(f"{sc.scene_id}\t{inst.instance_id}\t{' '.join(cap)}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14:
        raise DatasetFormatError("truncated dataset file at byte 0")
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r} at byte 0")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise DatasetFormatError(f"checksum mismatch at byte {len(raw) - 4}")
    r = _Reader(raw[:-4])
    r.read(4)
    (version, count) = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset version {version} at byte 4")
    scenes = []
    for _ in range(count):
        scene_id = _read_str(r)
        bounds = r.unpack("<6f")
        room = (bounds[3] - bounds[0], bounds[4] - bounds[1], bounds[5] - bounds[2])
        (n, f) = r.unpack("<IH")
        pts = np.frombuffer(r.read(n * 3 * 4), dtype=np.float32).reshape(n, 3).copy()
        feats = np.frombuffer(r.read(n * f * 4), dtype=np.float32).reshape(n, f).copy()
        (n_inst,) = r.unpack("<H")
        instances = []
        for _ in range(n_inst):
            (iid,) = r.unpack("<H")
            (ci, coli) = r.unpack("<BB")
            if ci >= len(CLASS_NAMES) or coli >= len(COLOR_NAMES):
                raise DatasetFormatError(f"bad catalog index at byte {r.off - 2}")
            vals = r.unpack("<6f")
            box = Box3D(tuple(float(v) for v in vals[:3]), tuple(float(v) for v in vals[3:]))
            (n_cap,) = r.unpack("<H")
            caps = [_read_str(r).split() for _ in range(n_cap)]
            instances.append(GtInstance(iid, CLASS_NAMES[ci], COLOR_NAMES[coli], box, caps))
        scenes.append(SyntheticScene(scene_id, room, pts, feats, instances))
    if r.off != len(r.data):
        raise DatasetFormatError(f"trailing bytes at byte {r.off}")
    return scenes


def _atomic_write_bytes(path, data):
    import os
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
