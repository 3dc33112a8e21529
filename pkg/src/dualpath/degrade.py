"""Deterministic synthesis of degraded document images.

Twelve degradation families, each with a five-entry severity ramp
(shipped as a versioned JSON table), covering blur, noise, illumination,
color, resolution, and shadow distortions. Every op is a pure function of
(image, spec): all randomness comes from Philox streams keyed by the spec
seed, so reruns are bit-identical and corpus degradation can proceed in
any order.

Compression artifacts are approximated by pixelation plus contrast
reduction instead of a real codec, keeping the pipeline dependency-free
and bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, DocRecord, DocumentImage, read_ppm, write_ppm
from .errors import ManifestError
from .rng import derive_key, make_rng

FAMILIES = (
    "gaussian_blur",
    "motion_blur",
    "defocus_blur",
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "brightness_up",
    "low_light",
    "contrast_reduction",
    "saturation_shift",
    "pixelate",
    "shadow",
)


@dataclass(frozen=True)
class DegradationSpec:
    family: str
    severity: int  # 1..5
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown degradation family {self.family!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity {self.severity} outside [1, 5]")


class SeverityTable:
    """Per-family parameter ramps; each must be strictly monotone in
    distortion strength (the declared direction)."""

    def __init__(self, payload: dict):
        self.version = payload["version"]
        self.families = payload["families"]
        for name in FAMILIES:
            if name not in self.families:
                raise ValueError(f"severity table missing family {name!r}")
            entry = self.families[name]
            ramp = entry["ramp"]
            if len(ramp) != 5:
                raise ValueError(f"{name}: ramp must have 5 entries")
            diffs = np.diff(ramp)
            ok = (diffs > 0).all() if entry["direction"] == "up" else (diffs < 0).all()
            if not ok:
                raise ValueError(f"{name}: ramp is not strictly monotone")

    def param(self, spec: DegradationSpec) -> float:
        return self.families[spec.family]["ramp"][spec.severity - 1]

    @staticmethod
    def default() -> "SeverityTable":
        text = resources.files("dualpath").joinpath("data/severity_table_v1.json").read_text()
        return SeverityTable(json.loads(text))


_DEFAULT_TABLE: SeverityTable | None = None


def default_table() -> SeverityTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = SeverityTable.default()
    return _DEFAULT_TABLE


# ---------------------------------------------------------------------------
# kernels and helpers (float64 internally, clipped [0,1] output)


def _conv_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for i, k in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += k * padded[tuple(sl)]
    return out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    r = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _disk_kernel(radius: float) -> np.ndarray:
    r = math.ceil(radius)
    ys, xs = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    dist = np.sqrt(ys**2 + xs**2)
    k = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return k / k.sum()


def _conv2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    padded = np.pad(img, ((rh, rh), (rw, rw), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    for dy in range(kh):
        for dx in range(kw):
            k = kernel[dy, dx]
            if k != 0.0:
                out += k * padded[dy : dy + h, dx : dx + w]
    return out


def block_average(img: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile with its mean; edge tiles may be partial."""
    h, w = img.shape[:2]
    out = np.empty_like(img)
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            tile = img[y0 : y0 + block, x0 : x0 + block]
            out[y0 : y0 + block, x0 : x0 + block] = tile.mean(axis=(0, 1))
    return out


_LUMA = np.array([0.299, 0.587, 0.114])


def _apply(img: np.ndarray, spec: DegradationSpec, p: float) -> np.ndarray:
    fam = spec.family
    if fam == "gaussian_blur":
        k = _gaussian_kernel(p)
        return _conv_axis(_conv_axis(img, k, 0), k, 1)
    if fam == "motion_blur":
        k = np.full(int(p), 1.0 / int(p))
        return _conv_axis(img, k, 1)
    if fam == "defocus_blur":
        return _conv2d(img, _disk_kernel(p))
    if fam == "gaussian_noise":
        rng = make_rng(spec.seed, fam, spec.severity)
        return img + rng.normal(0.0, p, img.shape)
    if fam == "shot_noise":
        rng = make_rng(spec.seed, fam, spec.severity)
        return rng.poisson(img * p).astype(np.float64) / p
    if fam == "impulse_noise":
        rng = make_rng(spec.seed, fam, spec.severity)
        h, w = img.shape[:2]
        flip = rng.random((h, w)) < p
        salt = rng.random((h, w)) < 0.5
        out = img.copy()
        out[flip & salt] = 1.0
        out[flip & ~salt] = 0.0
        return out
    if fam == "brightness_up":
        return img * p
    if fam == "low_light":
        return img * p
    if fam == "contrast_reduction":
        m = img.mean()
        return m + (img - m) * p
    if fam == "saturation_shift":
        lum = img @ _LUMA
        return lum[..., None] + (img - lum[..., None]) * p
    if fam == "pixelate":
        return block_average(img, int(p))
    if fam == "shadow":
        rng = make_rng(spec.seed, fam)
        h, w = img.shape[:2]
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        if rng.random() < 0.5:  # linear gradient
            theta = rng.uniform(0.0, 2.0 * math.pi)
            proj = math.cos(theta) * yy + math.sin(theta) * xx
            g = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        else:  # radial falloff
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            g = dist / dist.max()
        return img * (1.0 - p * g[..., None])
    raise ValueError(f"unknown degradation family {fam!r}")


def reference_image(size: int = 32) -> np.ndarray:
    """Canonical calibration target for the severity ramps.

    Color gradients, a radial bump, two box edges, and a fixed broadband
    noise texture: enough mid-tone detail that every family's distortion
    grows strictly with its ramp, with none of the kernel/period aliasing
    that periodic document motifs exhibit.
    """
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    r = 0.15 + 0.6 * xx
    g = 0.15 + 0.6 * yy
    b = 0.2 + 0.5 * np.exp(-((xx - 0.5) ** 2 + (yy - 0.5) ** 2) / 0.08)
    img = np.stack([r, g, b], axis=-1)
    q = size // 4
    img[q - 2 : 2 * q, q // 2 : 2 * q] -= 0.3
    img[2 * q + 1 : size - q // 2, 2 * q : size - 2] += 0.3
    img += 0.06 * make_rng("ramp-reference-texture").normal(size=(size, size, 1))
    return np.clip(img, 0.03, 0.97).astype(np.float32)


def degrade(image, spec: DegradationSpec, table: SeverityTable | None = None):
    """Pure function of (image, spec): same inputs give bit-identical output.

    Accepts a DocumentImage or a raw HxWxC array in [0,1] and returns the
    same kind; output pixels are clipped to [0,1].
    """
    table = table or default_table()
    doc = image if isinstance(image, DocumentImage) else None
    pixels = np.asarray(doc.pixels if doc is not None else image, dtype=np.float64)
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("input pixels must lie in [0, 1]")
    out = np.clip(_apply(pixels, spec, table.param(spec)), 0.0, 1.0).astype(np.float32)
    if doc is not None:
        return DocumentImage(doc.doc_id, doc.class_id, out, doc.split)
    return out


def psnr(a, b) -> float:
    """10*log10(1/MSE) for [0,1] images; +inf for identical inputs."""
    pa = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    pb = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def degrade_corpus(manifest: CorpusManifest, master_seed,
                   table: SeverityTable | None = None) -> CorpusManifest:
    """Give every clean document one degraded variant.

    Family and severity are drawn from a per-item stream keyed by
    (master_seed, doc_id), so the result does not depend on processing
    order. Degraded records link back through source_doc_id; splits and
    query records are untouched.
    """
    table = table or default_table()
    docs = list(manifest.docs)
    for rec in manifest.docs:
        if rec.is_degraded:
            continue
        src_path = manifest.image_path(rec)
        if not src_path.exists():
            raise ManifestError(f"missing image file {src_path}")
        rng = make_rng(master_seed, "degrade", rec.doc_id)
        family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
        severity = int(rng.integers(1, 6))
        seed = derive_key(master_seed, "noise", rec.doc_id) % (2**63)
        spec = DegradationSpec(family, severity, seed)
        out = degrade(read_ppm(src_path), spec, table)
        deg_id = rec.doc_id + "_deg"
        file = rec.file.rsplit(".", 1)[0] + "_deg.ppm"
        write_ppm(manifest.root / file, out)
        docs.append(DocRecord(deg_id, rec.class_id, rec.split, file, seed,
                              degradation_family=family, severity=severity,
                              source_doc_id=rec.doc_id))
    out_manifest = CorpusManifest(docs, list(manifest.queries), root=manifest.root)
    out_manifest.save(manifest.root / "manifest.jsonl")
    return out_manifest
