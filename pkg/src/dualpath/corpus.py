"""Procedural labeled document images, manifests, and PPM image I/O.

Documents are 32x32 (by default) "pages": a plain paper header band on
top and a class-determined motif (stripe / checker / diagonal pattern at
a class-specific period and ink color) filling the body. A seeded color
jitter and per-pixel noise texture make instances of a class distinct
while keeping the class recoverable from pixel content alone.

The manifest is JSON-lines: one record per document and per query, with
image paths relative to the manifest file. Identical seeds reproduce
byte-identical manifests and images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .rng import derive_key, make_rng

PAPER = np.array([0.93, 0.92, 0.88])
INKS = [
    np.array([0.12, 0.18, 0.62]),  # blue
    np.array([0.62, 0.12, 0.15]),  # red
    np.array([0.10, 0.45, 0.18]),  # green
    np.array([0.40, 0.12, 0.55]),  # violet
]
MAX_CLASSES = 4 * 2 * len(INKS)


@dataclass
class DocumentImage:
    doc_id: str
    class_id: int
    pixels: np.ndarray  # H x W x C float32 in [0, 1]
    split: str = "train"


@dataclass
class DocRecord:
    doc_id: str
    class_id: int
    split: str
    file: str
    seed: int
    degradation_family: str | None = None
    severity: int | None = None
    source_doc_id: str | None = None

    @property
    def is_degraded(self) -> bool:
        return self.degradation_family is not None


@dataclass
class QueryRecord:
    query_id: str
    class_id: int
    split: str
    positive_doc_ids: list[str]


@dataclass
class CorpusManifest:
    docs: list[DocRecord] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)
    root: Path | None = None  # directory image paths are relative to

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        for d in self.docs:
            if d.doc_id in seen:
                raise ManifestError(f"duplicate doc_id {d.doc_id!r}")
            seen.add(d.doc_id)
        for d in self.docs:
            if d.source_doc_id is not None and d.source_doc_id not in seen:
                raise ManifestError(f"source_doc_id {d.source_doc_id!r} does not resolve")
        for q in self.queries:
            if not q.positive_doc_ids:
                raise ManifestError(f"query {q.query_id!r} has no positives")

    def by_id(self) -> dict[str, DocRecord]:
        return {d.doc_id: d for d in self.docs}

    def image_path(self, record: DocRecord) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory; load or save it first")
        return self.root / record.file

    def save(self, path) -> Path:
        path = Path(path)
        lines = []
        for d in self.docs:
            rec = {"type": "doc", "doc_id": d.doc_id, "class_id": d.class_id,
                   "split": d.split, "file": d.file, "seed": d.seed}
            if d.degradation_family is not None:
                rec["degradation_family"] = d.degradation_family
                rec["severity"] = d.severity
                rec["source_doc_id"] = d.source_doc_id
            lines.append(json.dumps(rec, sort_keys=True))
        for q in self.queries:
            lines.append(json.dumps(
                {"type": "query", "query_id": q.query_id, "class_id": q.class_id,
                 "split": q.split, "positive_doc_ids": q.positive_doc_ids},
                sort_keys=True))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.root = path.parent
        return path

    @staticmethod
    def load(path) -> "CorpusManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        docs, queries = [], []
        for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{ln}: bad record: {exc}") from exc
            kind = rec.pop("type", None)
            if kind == "doc":
                docs.append(DocRecord(**rec))
            elif kind == "query":
                queries.append(QueryRecord(**rec))
            else:
                raise ManifestError(f"{path}:{ln}: unknown record type {kind!r}")
        return CorpusManifest(docs, queries, root=path.parent)


# ---------------------------------------------------------------------------
# PPM image files (binary P6, 8-bit)


def write_ppm(path, pixels: np.ndarray) -> None:
    """8-bit binary PPM; reals in [0,1] are quantized with round-half-even."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM wants HxWx3 pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    data = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Load a binary P6 file to float32 pixels, exactly value/255."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only max-val 255 supported, got {maxval}")
    pos += 1  # single whitespace after header
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    if data.size != h * w * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).astype(np.float32)) / np.float32(255.0)


# ---------------------------------------------------------------------------
# document synthesis


@dataclass(frozen=True)
class GenStyle:
    height: int = 32
    width: int = 32
    header_rows: int = 8  # plain paper band above the motif
    noise_amp: float = 0.06
    jitter: float = 0.05


def motif_params(class_id: int) -> tuple[int, int, int]:
    """(pattern, period, ink) triple; bijective for class_id < MAX_CLASSES."""
    return class_id % 4, 4 if (class_id // 4) % 2 == 0 else 8, (class_id // 8) % len(INKS)


def _pattern(pattern: int, period: int, h: int, w: int, row0: int) -> np.ndarray:
    half = period // 2
    rr, cc = np.meshgrid(np.arange(row0, h), np.arange(w), indexing="ij")
    if pattern == 0:
        return (rr // half) % 2
    if pattern == 1:
        return (cc // half) % 2
    if pattern == 2:
        return ((rr // half) + (cc // half)) % 2
    return ((rr + cc) // half) % 2


def gen_document(class_id: int, seed, style: GenStyle = GenStyle()) -> DocumentImage:
    """Render one labeled page; identical (class_id, seed, style) repeat bit-exactly."""
    if not 0 <= class_id < MAX_CLASSES:
        raise ValueError(f"class_id must be in [0, {MAX_CLASSES})")
    pattern, period, ink_idx = motif_params(class_id)
    rng = make_rng(seed, "doc")

    fg = INKS[ink_idx] + rng.uniform(-style.jitter, style.jitter, 3)
    bg = PAPER + rng.uniform(-style.jitter, style.jitter, 3)

    img = np.empty((style.height, style.width, 3), dtype=np.float64)
    img[:] = bg
    body = _pattern(pattern, period, style.height, style.width, style.header_rows)
    img[style.header_rows :] = np.where(body[..., None] == 1, fg, bg)

    img += rng.uniform(-style.noise_amp, style.noise_amp, img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return DocumentImage(doc_id="", class_id=class_id, pixels=pixels)


def gen_corpus(classes: int, per_class: int, seed, out_dir,
               style: GenStyle = GenStyle(), test_fraction: float = 0.2) -> CorpusManifest:
    """Generate classes*per_class documents with a stratified split,
    one query per class per split, PPM files, and a manifest on disk."""
    if classes < 2 or classes > MAX_CLASSES:
        raise ValueError(f"classes must be in [2, {MAX_CLASSES}]")
    if per_class < 2:
        raise ValueError("need at least 2 documents per class")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    n_test = max(1, round(per_class * test_fraction))
    n_train = per_class - n_test
    if n_train < 1:
        raise ValueError("split leaves no training documents")

    docs: list[DocRecord] = []
    queries: list[QueryRecord] = []
    for c in range(classes):
        for i in range(per_class):
            doc_id = f"d{c:02d}_{i:03d}"
            doc_seed = derive_key(seed, "doc", c, i) % (2**63)
            doc = gen_document(c, doc_seed, style)
            split = "train" if i < n_train else "test"
            file = f"images/{doc_id}.ppm"
            write_ppm(out_dir / file, doc.pixels)
            docs.append(DocRecord(doc_id, c, split, file, doc_seed))
        for split in ("train", "test"):
            positives = [d.doc_id for d in docs if d.class_id == c and d.split == split]
            queries.append(QueryRecord(f"q_{split}_c{c:02d}", c, split, positives))

    manifest = CorpusManifest(docs, queries)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_image(manifest: CorpusManifest, record: DocRecord) -> DocumentImage:
    pix = read_ppm(manifest.image_path(record))
    return DocumentImage(record.doc_id, record.class_id, pix, record.split)
