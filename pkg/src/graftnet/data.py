"""Dataset manifests, image tensor IO, and the synthetic dataset generator.

Images travel as float32 CHW arrays. Two on-disk forms are supported:

* binary PPM (P6), the only standard image format that needs no codec;
  values are scaled to [0, 1] on load.
* a raw tensor format for float-precision data: magic ``RAWT``, rank u8,
  rank x u32 little-endian dims, then little-endian float32 payload.

Manifests are JSON::

    {
      "attribute": "age",
      "classes": ["neg", "pos"],
      "train": [{"path": "age/train_00000.ppm", "class_index": 0}, ...],
      "test":  [...],
      "notes": {...}              # optional, free-form provenance
    }

Paths are relative to the manifest's directory. Train and test must be
disjoint by path and every class_index must be a valid index into classes.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

RAW_MAGIC = b"RAWT"

GENERATOR_KINDS = ("shape-presence", "stripe-orientation", "brightness-3class", "fine-texture")


class ManifestError(ValueError):
    pass


class UnknownClassIndexError(ManifestError):
    pass


class DuplicatePathError(ManifestError):
    pass


class MissingFileError(ManifestError):
    pass


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image tensor IO


def save_ppm(path, image):
    """Write a CHW float array with values in [0, 1] as binary PPM (P6)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"PPM values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
    _, h, w = arr.shape
    pixels = np.rint(arr * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def _read_ppm_tokens(blob, count):
    """First ``count`` whitespace-separated header tokens after the magic,
    skipping # comments; returns (tokens, offset just past the final one)."""
    tokens = []
    i = 2
    while len(tokens) < count:
        if i >= len(blob):
            raise ImageFormatError("PPM header ended early")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace() and blob[j : j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i


def load_ppm(path):
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a P6 PPM (magic {blob[:2]!r})")
    tokens, offset = _read_ppm_tokens(blob, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric PPM header {tokens}") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    offset += 1
    payload = blob[offset : offset + 3 * w * h]
    if len(payload) < 3 * w * h:
        raise ImageFormatError(f"{path}: truncated pixel payload ({len(payload)} of {3 * w * h} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_raw(path, tensor):
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_raw(path):
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise ImageFormatError(f"{path}: not a raw tensor file (magic {blob[:4]!r})")
    (rank,) = struct.unpack_from("<B", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 5)
    offset = 5 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset < 4 * n:
        raise ImageFormatError(f"{path}: truncated tensor payload")
    return np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims).copy()


def load_image(path):
    """Load a CHW float32 tensor from PPM (scaled to [0,1]) or raw format."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic[:2] == b"P6":
        return load_ppm(path)
    if magic == RAW_MAGIC:
        return load_raw(path)
    raise ImageFormatError(f"{path}: unsupported image format (magic bytes {magic!r})")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    attribute: str
    classes: list
    train: list  # (path, class_index) pairs
    test: list
    notes: dict = field(default_factory=dict)
    root: Path = None  # directory paths are relative to; set by load_manifest

    def __post_init__(self):
        if len(self.classes) not in (2, 3):
            raise ManifestError(f"{self.attribute!r}: need 2 or 3 classes, got {self.classes}")
        for split_name, split in (("train", self.train), ("test", self.test)):
            for path, idx in split:
                if not 0 <= idx < len(self.classes):
                    raise UnknownClassIndexError(
                        f"{self.attribute!r} {split_name}: class_index {idx} out of range for {len(self.classes)} classes ({path})"
                    )
        train_paths = {p for p, _ in self.train}
        if len(train_paths) != len(self.train):
            raise DuplicatePathError(f"{self.attribute!r}: duplicate path within train split")
        test_paths = {p for p, _ in self.test}
        if len(test_paths) != len(self.test):
            raise DuplicatePathError(f"{self.attribute!r}: duplicate path within test split")
        overlap = train_paths & test_paths
        if overlap:
            raise DuplicatePathError(f"{self.attribute!r}: paths in both splits, e.g. {sorted(overlap)[:3]}")


def load_manifest(path, check_files=True):
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    for key in ("attribute", "classes", "train", "test"):
        if key not in doc:
            raise ManifestError(f"{path}: missing required key {key!r}")
    manifest = DatasetManifest(
        attribute=doc["attribute"],
        classes=list(doc["classes"]),
        train=[(item["path"], int(item["class_index"])) for item in doc["train"]],
        test=[(item["path"], int(item["class_index"])) for item in doc["test"]],
        notes=doc.get("notes", {}),
        root=path.parent,
    )
    if check_files:
        for p, _ in manifest.train + manifest.test:
            if not (manifest.root / p).exists():
                raise MissingFileError(f"{path}: referenced file does not exist: {p}")
    return manifest


def write_manifest(manifest, path):
    doc = {
        "attribute": manifest.attribute,
        "classes": manifest.classes,
        "train": [{"path": p, "class_index": i} for p, i in manifest.train],
        "test": [{"path": p, "class_index": i} for p, i in manifest.test],
    }
    if manifest.notes:
        doc["notes"] = manifest.notes
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def manifest_digest(manifest):
    """Hex digest over the manifest structure and every referenced file."""
    h = hashlib.sha256()
    h.update(json.dumps(
        {
            "attribute": manifest.attribute,
            "classes": manifest.classes,
            "train": manifest.train,
            "test": manifest.test,
        },
        sort_keys=True,
    ).encode("utf-8"))
    if manifest.root is not None:
        for p, _ in manifest.train + manifest.test:
            h.update(hashlib.sha256((manifest.root / p).read_bytes()).digest())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# sub-datasets (in-memory form consumed by training)


@dataclass
class SubDataset:
    """One attribute's independent single-label dataset, loaded into memory."""

    attribute: str
    class_names: list
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    attribute_id: int = None  # assigned when registered for pretraining
    digest: str = ""
    train_refs: list = field(default_factory=list)
    test_refs: list = field(default_factory=list)

    def __post_init__(self):
        k = len(self.class_names)
        if k not in (2, 3):
            raise ValueError(f"{self.attribute!r}: need 2 or 3 classes, got {self.class_names}")
        for name, y in (("train", self.y_train), ("test", self.y_test)):
            y = np.asarray(y)
            if y.size and (y.min() < 0 or y.max() >= k):
                raise ValueError(f"{self.attribute!r} {name}: labels outside [0, {k})")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError(f"{self.attribute!r}: image/label counts disagree")
        overlap = set(self.train_refs) & set(self.test_refs)
        if overlap:
            raise ValueError(f"{self.attribute!r}: refs in both splits, e.g. {sorted(overlap)[:3]}")
        if not self.digest:
            h = hashlib.sha256()
            for arr in (self.x_train, self.y_train, self.x_test, self.y_test):
                h.update(np.ascontiguousarray(arr).tobytes())
            self.digest = h.hexdigest()[:16]

    @property
    def train_size(self):
        return len(self.y_train)


def load_subdataset(manifest):
    """Materialize a manifest into arrays; row order follows the manifest."""
    def stack(split):
        if not split:
            return np.zeros((0,) + (3, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64)
        imgs = [load_image(manifest.root / p) for p, _ in split]
        return np.stack(imgs).astype(np.float32), np.array([i for _, i in split], dtype=np.int64)

    x_train, y_train = stack(manifest.train)
    x_test, y_test = stack(manifest.test)
    return SubDataset(
        attribute=manifest.attribute,
        class_names=list(manifest.classes),
        x_train=x_train,
        y_train=y_train,
        x_test=x_test,
        y_test=y_test,
        digest=manifest_digest(manifest),
        train_refs=[p for p, _ in manifest.train],
        test_refs=[p for p, _ in manifest.test],
    )


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass
class AttributeSpec:
    name: str
    kind: str
    train_count: object = 200  # int split evenly, or explicit per-class list
    test_count: object = 100
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}")
        if not 0 <= self.noise_rate < 0.5:
            raise ValueError(f"noise rate must be in [0, 0.5), got {self.noise_rate}")

    @property
    def class_names(self):
        if self.kind == "brightness-3class":
            return ["dark", "mid", "bright"]
        return [f"not_{self.name}", self.name]


@dataclass
class SynthConfig:
    attributes: list
    image_size: tuple = (3, 32, 32)
    seed: int = 0

    def __post_init__(self):
        self.attributes = [a if isinstance(a, AttributeSpec) else AttributeSpec(**a) for a in self.attributes]
        self.image_size = tuple(int(d) for d in self.image_size)
        if len(self.image_size) != 3 or self.image_size[0] != 3:
            raise ValueError(f"image_size must be (3, H, W), got {self.image_size}")

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            doc = json.load(f)
        unknown = sorted(set(doc) - {"attributes", "image_size", "seed"})
        if unknown:
            raise ValueError(f"{path}: unknown synthesis config keys {unknown}")
        if "attributes" not in doc:
            raise ValueError(f"{path}: missing required key 'attributes'")
        spec_keys = {f.name for f in fields(AttributeSpec)}
        for a in doc["attributes"]:
            bad = sorted(set(a) - spec_keys)
            if bad:
                raise ValueError(f"{path}: unknown attribute keys {bad}; expected a subset of {sorted(spec_keys)}")
        return cls(
            attributes=doc["attributes"],
            image_size=tuple(doc.get("image_size", (3, 32, 32))),
            seed=doc.get("seed", 0),
        )


def _per_class_counts(total, k):
    if isinstance(total, (list, tuple)):
        counts = [int(c) for c in total]
        if len(counts) != k:
            raise ValueError(f"per-class counts {counts} do not match {k} classes")
    else:
        base, rem = divmod(int(total), k)
        counts = [base + (1 if i < rem else 0) for i in range(k)]
    if any(c < 2 for c in counts):
        raise ValueError(f"need at least 2 samples per class, got {counts}")
    return counts


def _gen_shape_presence(rng, label, h, w):
    # Background noise with a per-image brightness jitter so the global mean
    # carries no label signal; positives get a contrasting square patch.
    # All generators aim for similar per-image mean/variance so the shared
    # normalization statistics blend cleanly across attributes.
    base = rng.uniform(0.40, 0.60)
    img = rng.normal(base, 0.10, size=(3, h, w))
    if label == 1:
        side = rng.integers(max(4, h // 6), max(6, h // 3) + 1)
        top = rng.integers(0, h - side + 1)
        left = rng.integers(0, w - side + 1)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        img[:, top : top + side, left : left + side] += sign * rng.uniform(0.25, 0.35)
    return img


def _gen_stripe_orientation(rng, label, h, w):
    # Sinusoidal gratings with random phase and frequency; orientation is the
    # label. Random phase defeats any single linear pixel template.
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    axis = np.arange(w if label == 1 else h)
    wave = 0.5 + 0.12 * np.sin(2 * np.pi * freq * axis / len(axis) + phase)
    grid = np.tile(wave, (h, 1)) if label == 1 else np.tile(wave[:, None], (1, w))
    img = np.repeat(grid[None], 3, axis=0) + rng.normal(0, 0.06, size=(3, h, w))
    return img


def _gen_brightness(rng, label, h, w):
    lo, hi = [(0.22, 0.38), (0.42, 0.58), (0.62, 0.78)][label]
    img = rng.normal(rng.uniform(lo, hi), 0.10, size=(3, h, w))
    return img


def _gen_fine_texture(rng, label, h, w):
    # Class is the sign pattern of the cross-channel correlation: a shared
    # noise field is mixed into the three channels with signs (+,+,+) for
    # positives and (+,-,-) for negatives. Per-channel moments and the
    # correlation magnitude are identical across classes by construction, so
    # a raw-pixel linear probe stays near chance; the signal lives purely in
    # second-order channel co-fluctuation, which outer-product pooling of
    # early conv features reads out directly.
    rho = rng.uniform(0.80, 0.95)
    shared = rng.normal(0.0, 1.0, size=(h, w))
    noise = rng.normal(0.0, 1.0, size=(3, h, w))
    signs = np.array([1.0, 1.0, 1.0] if label == 1 else [1.0, -1.0, -1.0])
    img = np.sqrt(rho) * signs[:, None, None] * shared + np.sqrt(1.0 - rho) * noise
    img = (img - img.mean(axis=(1, 2), keepdims=True)) / (img.std(axis=(1, 2), keepdims=True) + 1e-9)
    return 0.5 + 0.14 * img


_GENERATORS = {
    "shape-presence": (_gen_shape_presence, 2),
    "stripe-orientation": (_gen_stripe_orientation, 2),
    "brightness-3class": (_gen_brightness, 3),
    "fine-texture": (_gen_fine_texture, 2),
}


def synthesize_split(spec, count, image_size, rng, apply_noise):
    """(images, labels) for one split of one attribute; labels are the true
    generator class, optionally flipped at the configured noise rate."""
    gen, k = _GENERATORS[spec.kind]
    _, h, w = image_size
    counts = _per_class_counts(count, k)
    labels = np.concatenate([np.full(c, i, dtype=np.int64) for i, c in enumerate(counts)])
    order = rng.permutation(len(labels))
    labels = labels[order]
    images = np.stack([gen(rng, int(y), h, w) for y in labels]).astype(np.float32)
    if apply_noise and spec.noise_rate > 0:
        flip = rng.random(len(labels)) < spec.noise_rate
        shift = rng.integers(1, k, size=len(labels))
        labels = np.where(flip, (labels + shift) % k, labels)
    return images, labels


def synthesize_attribute(spec, image_size=(3, 32, 32), seed=0):
    """In-memory SubDataset for one attribute spec, deterministic in seed."""
    ss = np.random.SeedSequence([seed, _GENERATORS[spec.kind][1], len(spec.name)] + [ord(c) for c in spec.name])
    train_rng, test_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    x_train, y_train = synthesize_split(spec, spec.train_count, image_size, train_rng, apply_noise=True)
    x_test, y_test = synthesize_split(spec, spec.test_count, image_size, test_rng, apply_noise=False)
    return SubDataset(
        attribute=spec.name,
        class_names=spec.class_names,
        x_train=x_train,
        y_train=y_train,
        x_test=x_test,
        y_test=y_test,
    )


def generate_synthetic(config, out_dir):
    """Write every attribute's images and manifest under ``out_dir``.

    fine-texture images are stored in the raw tensor format to keep their
    float precision; all other kinds are 8-bit PPM.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = []
    for spec in config.attributes:
        sd = synthesize_attribute(spec, config.image_size, config.seed)
        attr_dir = out / spec.name
        attr_dir.mkdir(exist_ok=True)
        ext = "raw" if spec.kind == "fine-texture" else "ppm"
        save = save_raw if ext == "raw" else lambda p, img: save_ppm(p, np.clip(img, 0.0, 1.0))
        splits = {"train": (sd.x_train, sd.y_train), "test": (sd.x_test, sd.y_test)}
        entries = {}
        for split, (images, labels) in splits.items():
            rows = []
            for i, (img, y) in enumerate(zip(images, labels)):
                rel = f"{spec.name}/{split}_{i:05d}.{ext}"
                save(out / rel, img)
                rows.append((rel, int(y)))
            entries[split] = rows
        manifest = DatasetManifest(
            attribute=spec.name,
            classes=spec.class_names,
            train=entries["train"],
            test=entries["test"],
            notes={"generator": spec.kind, "seed": config.seed, "noise_rate": spec.noise_rate},
            root=out,
        )
        write_manifest(manifest, out / f"{spec.name}.manifest.json")
        manifests.append(manifest)
    return manifests
