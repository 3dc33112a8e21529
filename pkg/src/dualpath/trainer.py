"""Deterministic training loops for the retrieval and generation encoders.

One optimizer step per batch of clean/degraded document pairs: the
degraded side flows through the trainable encoder, clean alignment
targets come from a frozen snapshot of the initial weights (the
"reference encoder"), and triplets over degradation embeddings are
assembled in-batch. Everything is keyed off derived Philox streams, so a
(config, master_seed) pair reproduces checkpoints and metric logs byte
for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import CorpusManifest, DocRecord, load_image
from .encoder import (EncoderConfig, EncoderWeights, forward_dual_batch, init_weights,
                      patchify, wrap_weights)
from .errors import CheckpointFormatError, ManifestError, NonFiniteError
from .losses import LossConfig
from .retrieval import EmbeddingIndex, mrr_at_k, retrieve_topk, silhouette
from .rng import make_rng

_CKPT_MAGIC = b"RVRG"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = EncoderConfig()
    loss: LossConfig = LossConfig()
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    optimizer: str = "adam"  # adaptive moments (default) or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    master_seed: int = 0
    objective: str = "retrieval"  # or "generation"
    eval_every: int = 200
    ref_refresh_every: int = 0  # 0 = clean targets stay at the init snapshot
    ncdm_clean_category: bool = True  # clean counts as its own degradation family
    disable_ncdm: bool = False
    disable_csa: bool = False
    nc_bidirectional: bool = False
    disable_nc_token: bool = False  # plain encoder baseline, no reader token

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.objective not in ("retrieval", "generation"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.disable_nc_token and self.nc_bidirectional:
            raise ValueError("baseline mode has no token to make bidirectional")
        if self.disable_nc_token and not (self.disable_ncdm and self.disable_csa):
            raise ValueError("baseline mode requires disabling both auxiliary objectives")
        if self.disable_nc_token and self.objective == "generation":
            raise ValueError("the generation objective needs the reader token")

    def encoder_config(self) -> EncoderConfig:
        return replace(self.encoder, nc_bidirectional=self.nc_bidirectional,
                       nc_enabled=not self.disable_nc_token)

    def loss_config(self) -> LossConfig:
        cfg = self.loss
        if self.disable_csa:
            cfg = replace(cfg, lambda1=0.0)
        if self.disable_ncdm:
            cfg = replace(cfg, lambda2=0.0, lambda3=0.0)
        return cfg


@dataclass
class TrainBatch:
    """B clean/degraded pairs plus triplet indices into the embedding pool.

    Pool layout: entries 0..B-1 are the degraded items, entries B..2B-1
    (present only when clean counts as a family) are the clean items.
    """

    clean: list[DocRecord]
    degraded: list[DocRecord]
    families: list[str]  # per degraded item
    triplets: list[tuple[int, int, int]]
    query_class_ids: list[int]

    def pool_family(self, idx: int) -> str:
        return self.families[idx] if idx < len(self.degraded) else "clean"


@dataclass
class Checkpoint:
    weights: EncoderWeights
    query_table: np.ndarray
    ref_weights: EncoderWeights
    config: TrainConfig
    step: int


@dataclass
class TrainState:
    config: TrainConfig
    weights: EncoderWeights
    query_table: np.ndarray
    ref_weights: EncoderWeights
    step: int = 0
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_t: int = 0
    patch_cache: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# config (de)serialization: flat key/value dicts for echo files and sidecars


def config_to_flat(config: TrainConfig) -> dict:
    flat = {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(config, f.name)
        if f.name in ("encoder", "loss"):
            for sub in dataclasses.fields(v):
                flat[f"{f.name}.{sub.name}"] = getattr(v, sub.name)
        else:
            flat[f.name] = v
    return flat


def config_from_flat(flat: dict) -> TrainConfig:
    from .errors import ConfigError

    base = config_to_flat(TrainConfig())
    unknown = set(flat) - set(base)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(base)
    merged.update(flat)

    def coerce(key, value):
        ref = base[key]
        if isinstance(ref, bool):
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("true", "1", "yes"):
                return True
            if str(value).lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(ref, int):
            return int(value)
        if isinstance(ref, float):
            return float(value)
        return str(value)

    merged = {k: coerce(k, v) for k, v in merged.items()}
    enc = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith("encoder.")}
    los = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith("loss.")}
    top = {k: v for k, v in merged.items() if "." not in k}
    return TrainConfig(encoder=EncoderConfig(**enc), loss=LossConfig(**los), **top)


# ---------------------------------------------------------------------------
# batch assembly


def _family_groups(manifest: CorpusManifest, split: str) -> dict[str, list[DocRecord]]:
    groups: dict[str, list[DocRecord]] = {}
    for rec in manifest.docs:
        if rec.is_degraded and rec.split == split:
            groups.setdefault(rec.degradation_family, []).append(rec)
    return groups


def sample_batch(manifest: CorpusManifest, config: TrainConfig, step: int) -> TrainBatch:
    """Deterministic batch for one step, keyed by (master_seed, step).

    Degraded documents are drawn grouped by family (at most batch_size/2
    families per batch) so every triplet anchor has an in-batch positive
    of the same family and a negative from a different one.
    """
    groups = _family_groups(manifest, "train")
    ncdm_on = not config.disable_ncdm
    if ncdm_on and len(groups) < 2:
        raise ManifestError("triplet objective needs at least 2 degradation families")
    if not groups:
        raise ManifestError("corpus has no degraded training documents")
    by_id = manifest.by_id()

    rng = make_rng(config.master_seed, "batch", step)
    b = config.batch_size
    fam_names = sorted(groups)
    n_fam = min(b // 2, 4, len(fam_names))
    chosen = [fam_names[i] for i in rng.choice(len(fam_names), size=n_fam, replace=False)]

    degraded: list[DocRecord] = []
    offsets = {f: 0 for f in chosen}
    orders = {f: rng.permutation(len(groups[f])) for f in chosen}
    for i in range(b):
        fam = chosen[i % n_fam]
        idx = orders[fam][offsets[fam] % len(groups[fam])]
        offsets[fam] += 1
        degraded.append(groups[fam][idx])

    clean = []
    for rec in degraded:
        src = by_id.get(rec.source_doc_id)
        if src is None:
            raise ManifestError(f"degraded doc {rec.doc_id} has no clean source")
        clean.append(src)

    families = [rec.degradation_family for rec in degraded]
    triplets: list[tuple[int, int, int]] = []
    if ncdm_on:
        pool_families = list(families)
        if config.ncdm_clean_category:
            pool_families += ["clean"] * b
        n_pool = len(pool_families)
        for a in range(n_pool):
            same = [j for j in range(n_pool) if j != a and pool_families[j] == pool_families[a]]
            diff = [j for j in range(n_pool) if pool_families[j] != pool_families[a]]
            if not same or not diff:
                continue
            p = same[int(rng.integers(0, len(same)))]
            n = diff[int(rng.integers(0, len(diff)))]
            triplets.append((a, p, n))

    return TrainBatch(clean, degraded, families, triplets,
                      [rec.class_id for rec in degraded])


# ---------------------------------------------------------------------------
# one optimizer step


def _patches(state: TrainState, manifest: CorpusManifest, rec: DocRecord) -> np.ndarray:
    cached = state.patch_cache.get(rec.doc_id)
    if cached is None:
        img = load_image(manifest, rec)
        cached = patchify(img.pixels, state.config.encoder_config())
        state.patch_cache[rec.doc_id] = cached
    return cached


def _adam_update(state: TrainState, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
    cfg = state.config
    if cfg.optimizer == "sgd":
        return value - cfg.lr * grad
    m = state.opt_m.get(name)
    v = state.opt_v.get(name)
    if m is None:
        m = np.zeros_like(value)
        v = np.zeros_like(value)
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    state.opt_m[name] = m
    state.opt_v[name] = v
    t = state.opt_t
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    return value - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _row_norms(x: T.Tensor) -> T.Tensor:
    return T.sqrt(T.tsum(T.mul(x, x), axis=1))


def _batched_components(state: TrainState, batch: TrainBatch, manifest: CorpusManifest,
                        wt, qt) -> dict[str, T.Tensor | None]:
    """All loss terms for one batch through a single stacked forward pass.

    Mirrors the per-item objectives exactly up to float reassociation
    (the equivalence is pinned by a test); one big masked attention per
    layer replaces per-image forwards.
    """
    cfg = state.config
    enc_cfg = cfg.encoder_config()
    loss_cfg = cfg.loss_config()
    retrieval_mode = cfg.objective == "retrieval"
    b = len(batch.degraded)
    tc = enc_cfg.causal_tokens

    lam_trip = loss_cfg.lambda2 if retrieval_mode else loss_cfg.lambda3
    ncdm_on = lam_trip > 0 and bool(batch.triplets)
    csa_on = loss_cfg.lambda1 > 0 or not retrieval_mode
    online_clean = csa_on and not loss_cfg.stop_grad_clean
    trace_clean = (ncdm_on and cfg.ncdm_clean_category) or online_clean

    deg_stack = np.concatenate([_patches(state, manifest, r) for r in batch.degraded])
    clean_stack = None
    if csa_on or trace_clean:
        clean_stack = np.concatenate([_patches(state, manifest, r) for r in batch.clean])
    if trace_clean:
        out = forward_dual_batch(np.concatenate([deg_stack, clean_stack]), 2 * b, wt, enc_cfg)
    else:
        out = forward_dual_batch(deg_stack, b, wt, enc_cfg)

    sil = fsal = ncdm = ret = None
    if csa_on:
        deg_tok = T.slice_rows(out.sem_tokens, 0, b * tc)
        if online_clean:
            clean_tok = T.slice_rows(out.sem_tokens, b * tc, 2 * b * tc)
        else:
            ref_out = forward_dual_batch(clean_stack, b, wrap_weights(state.ref_weights),
                                         enc_cfg, include_nc=enc_cfg.nc_bidirectional)
            clean_tok = ref_out.sem_tokens  # constants: stop-grad targets
        na = _row_norms(deg_tok)
        nb = _row_norms(clean_tok)
        if min(na.data.min(), nb.data.min()) < 1e-12:
            raise ValueError("token with near-zero norm; cosine undefined")
        align = T.sub(1.0, T.div(T.tsum(T.mul(deg_tok, clean_tok), axis=1), T.mul(na, nb)))
        zdeg_deg = T.slice_rows(out.z_deg, 0, b)
        zsrc = T.detach(zdeg_deg) if loss_cfg.stop_grad_zdeg_in_sil else zdeg_deg
        zexp = T.gather_rows(zsrc, np.repeat(np.arange(b), tc))
        nz = _row_norms(zexp)
        if nz.data.min() < 1e-12:
            raise ValueError("degradation embedding with near-zero norm")
        indep = T.absolute(T.div(T.tsum(T.mul(deg_tok, zexp), axis=1), T.mul(na, nz)))
        sil = T.mean(T.add(align, indep))
        diff = T.sub(deg_tok, clean_tok)
        fsal = T.mul(T.tsum(T.mul(diff, diff)), 1.0 / (b * tc))

    if ncdm_on:
        a_idx = [t[0] for t in batch.triplets]
        p_idx = [t[1] for t in batch.triplets]
        n_idx = [t[2] for t in batch.triplets]
        za = T.gather_rows(out.z_deg, a_idx)
        zp = T.gather_rows(out.z_deg, p_idx)
        zn = T.gather_rows(out.z_deg, n_idx)
        dap = T.tsum(T.mul(T.sub(za, zp), T.sub(za, zp)), axis=1)
        dan = T.tsum(T.mul(T.sub(za, zn), T.sub(za, zn)), axis=1)
        ncdm = T.mean(T.relu(T.add(T.sub(dap, dan), loss_cfg.delta)))

    if retrieval_mode:
        docs = T.slice_rows(out.z_sem, 0, b)
        dn = _row_norms(docs)
        q = T.gather_rows(qt, batch.query_class_ids)
        qn = _row_norms(q)
        if min(dn.data.min(), qn.data.min()) < 1e-12:
            raise ValueError("embedding with near-zero norm")
        docs_n = T.div(docs, T.reshape(dn, (b, 1)))
        q_n = T.div(q, T.reshape(qn, (b, 1)))
        logits = T.mul(T.matmul(q_n, T.transpose(docs_n)), 1.0 / loss_cfg.tau)
        m = logits.data.max(axis=1, keepdims=True)  # constant shift
        lse = T.add(T.log(T.tsum(T.exp(T.sub(logits, m)), axis=1)), m.reshape(b))
        diag = T.tsum(T.mul(logits, np.eye(b, dtype=logits.dtype)), axis=1)
        ret = T.mean(T.sub(lse, diag))

    if retrieval_mode:
        total = ret
        if csa_on:
            total = T.add(total, T.mul(T.add(sil, T.mul(fsal, loss_cfg.lambda_fsal)),
                                       loss_cfg.lambda1))
        if ncdm_on:
            total = T.add(total, T.mul(ncdm, loss_cfg.lambda2))
    else:
        total = T.add(sil, T.mul(fsal, loss_cfg.lambda_fsal))
        if ncdm_on:
            total = T.add(total, T.mul(ncdm, loss_cfg.lambda3))
    return {"ret": ret, "sil": sil, "fsal": fsal, "ncdm": ncdm, "total": total}


def train_step(state: TrainState, batch: TrainBatch,
               manifest: CorpusManifest) -> dict[str, float]:
    """Forward the batch, apply one optimizer update, return loss parts.

    The reference encoder is read-only here; the trainable weights (and
    the query table in retrieval mode) are updated in place.
    """
    cfg = state.config
    retrieval_mode = cfg.objective == "retrieval"
    tape = T.GradTape()
    wt = wrap_weights(state.weights, tape)
    qt = tape.param(state.query_table) if retrieval_mode else None

    try:
        comps = _batched_components(state, batch, manifest, wt, qt)
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite loss at step {state.step}: {exc}") from exc

    grads = tape.backward(comps["total"])
    state.opt_t += 1
    for name, tensor in wt.items():
        state.weights.tensors[name] = _adam_update(state, "enc." + name,
                                                   state.weights.tensors[name], grads[tensor])
    if retrieval_mode:
        state.query_table = _adam_update(state, "query_table", state.query_table, grads[qt])
    state.step += 1

    out = {}
    for key in ("ret", "sil", "fsal", "ncdm", "total"):
        t = comps.get(key)
        out[key] = float(t.item()) if t is not None else math.nan
    return out


# ---------------------------------------------------------------------------
# evaluation helpers


def _positives_for_index(manifest: CorpusManifest, query, index_ids: set[str]) -> set[str]:
    """Positives projected onto an index: a degraded doc is positive when
    its clean source is."""
    base = set(query.positive_doc_ids)
    out = set()
    for rec in manifest.docs:
        if rec.doc_id not in index_ids:
            continue
        if rec.doc_id in base or (rec.source_doc_id in base if rec.source_doc_id else False):
            out.add(rec.doc_id)
    return out


def _embed_rows(weights: EncoderWeights, manifest: CorpusManifest, recs: list[DocRecord],
                want_zdeg: bool, patch_cache: dict | None = None,
                chunk: int = 64) -> tuple[np.ndarray, np.ndarray | None]:
    """Semantic (and optionally degradation) embeddings for a record list,
    computed through the stacked batch forward in chunks."""
    enc_cfg = weights.config
    wt = wrap_weights(weights)
    include_nc = want_zdeg or enc_cfg.nc_bidirectional
    sems, degs = [], []
    for lo in range(0, len(recs), chunk):
        part = recs[lo : lo + chunk]
        stacks = []
        for rec in part:
            cached = patch_cache.get(rec.doc_id) if patch_cache is not None else None
            if cached is None:
                cached = patchify(load_image(manifest, rec).pixels, enc_cfg)
                if patch_cache is not None:
                    patch_cache[rec.doc_id] = cached
            stacks.append(cached)
        out = forward_dual_batch(np.concatenate(stacks), len(part), wt, enc_cfg,
                                 include_nc=include_nc)
        sems.append(out.z_sem.data)
        if want_zdeg:
            degs.append(out.z_deg.data)
    sem = np.concatenate(sems) if sems else np.zeros((0, enc_cfg.dim), dtype=np.float32)
    return sem, (np.concatenate(degs) if degs else None)


def evaluate(weights: EncoderWeights, query_table: np.ndarray,
             manifest: CorpusManifest, split: str = "test", k: int = 10,
             patch_cache: dict | None = None) -> dict[str, float]:
    """MRR@k on clean and degraded test documents, plus the silhouette of
    degradation embeddings grouped by family (nan without the reader token)."""
    enc_cfg = weights.config
    metrics: dict[str, float] = {}
    queries = [q for q in manifest.queries if q.split == split]
    if not queries:
        raise ManifestError(f"manifest has no {split!r} queries")

    want_zdeg = enc_cfg.nc_enabled
    metrics["silhouette_zdeg"] = math.nan
    for mode in ("clean", "degraded"):
        key = "mrr10_clean" if mode == "clean" else "mrr10_deg"
        recs = [r for r in manifest.docs
                if r.is_degraded == (mode == "degraded") and r.split == split]
        if not recs:
            metrics[key] = math.nan
            continue
        sem, deg = _embed_rows(weights, manifest, recs, want_zdeg and mode == "degraded",
                               patch_cache)
        norms = np.linalg.norm(sem, axis=1, keepdims=True)
        index = EmbeddingIndex([r.doc_id for r in recs], sem / norms)
        ids = set(index.doc_ids)
        ranked, qrecs = [], []
        for q in queries:
            pos = _positives_for_index(manifest, q, ids)
            if not pos:
                continue
            ranked.append(retrieve_topk(index, query_table[q.class_id], k,
                                        query_id=q.query_id))
            qrecs.append((q.query_id, pos))
        metrics[key] = mrr_at_k(ranked, qrecs, k=k)

        if deg is not None:
            fams = [r.degradation_family for r in recs]
            uniq, counts = np.unique(fams, return_counts=True)
            if len(uniq) >= 2 and counts.min() >= 2:
                metrics["silhouette_zdeg"] = silhouette(deg.astype(np.float64), fams)
    return metrics


# ---------------------------------------------------------------------------
# full training run


def init_state(config: TrainConfig, manifest: CorpusManifest) -> TrainState:
    enc_cfg = config.encoder_config()
    weights = init_weights(enc_cfg, config.master_seed)
    classes = max(d.class_id for d in manifest.docs) + 1
    table = make_rng(config.master_seed, "weights", "query_table").normal(
        size=(classes, enc_cfg.dim)) / math.sqrt(enc_cfg.dim)
    return TrainState(config=config, weights=weights,
                      query_table=table.astype(np.float32),
                      ref_weights=weights.copy())


def train(config: TrainConfig, manifest: CorpusManifest, out_dir) -> tuple[Checkpoint, Path]:
    """Run the configured number of steps; write metrics CSV + checkpoint.

    The metric log gains one row per eval interval (and one for the final
    step); the checkpoint holds trainable, reference, and query weights.
    """
    if not any(d.is_degraded for d in manifest.docs):
        raise ManifestError("corpus has no degraded variants; run degradation first")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = init_state(config, manifest)

    rows = []
    comps = {k: math.nan for k in ("ret", "sil", "fsal", "ncdm")}
    for step in range(config.steps):
        if config.ref_refresh_every > 0 and step > 0 and step % config.ref_refresh_every == 0:
            state.ref_weights = state.weights.copy()
        batch = sample_batch(manifest, config, step)
        comps = train_step(state, batch, manifest)
        done = step + 1
        if done % config.eval_every == 0 or done == config.steps:
            m = evaluate(state.weights, state.query_table, manifest)
            rows.append((done, comps, m))
    if config.steps == 0:
        m = evaluate(state.weights, state.query_table, manifest)
        rows.append((0, comps, m))

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write("step,L_ret,L_sil,L_fsal,L_ncdm,mrr10_clean,mrr10_deg,silhouette_zdeg\n")
        for done, comps, m in rows:
            vals = [comps["ret"], comps["sil"], comps["fsal"], comps["ncdm"],
                    m["mrr10_clean"], m["mrr10_deg"], m["silhouette_zdeg"]]
            f.write(str(done) + "," + ",".join(f"{v:.10g}" for v in vals) + "\n")

    ckpt = Checkpoint(state.weights, state.query_table, state.ref_weights,
                      config, state.step)
    save_checkpoint(out_dir / "checkpoint.rvrg", ckpt)
    return ckpt, metrics_path


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.weights.tensors.items():
        arrays["enc." + name] = arr
    for name, arr in ckpt.ref_weights.tensors.items():
        arrays["ref." + name] = arr
    arrays["query_table"] = ckpt.query_table

    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQI", _CKPT_VERSION, ckpt.step, len(arrays)))
        for name in sorted(arrays):
            arr = arrays[name].astype("<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    meta = {"format_version": _CKPT_VERSION, "step": ckpt.step,
            "config": config_to_flat(ckpt.config)}
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic")
    version, step, n_arrays = struct.unpack_from("<IQI", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = 4 + 16
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_arrays):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            if arr.size != count:
                raise CheckpointFormatError(f"{path}: truncated array {name!r}")
            pos += count * 4
            arrays[name] = arr.reshape(shape).copy()
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint") from exc

    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise CheckpointFormatError(f"missing metadata sidecar {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = config_from_flat(meta["config"])
    enc_cfg = config.encoder_config()

    enc = {k[len("enc."):]: v for k, v in arrays.items() if k.startswith("enc.")}
    ref = {k[len("ref."):]: v for k, v in arrays.items() if k.startswith("ref.")}
    if "query_table" not in arrays:
        raise CheckpointFormatError(f"{path}: missing query table")
    return Checkpoint(EncoderWeights(enc_cfg, enc), arrays["query_table"],
                      EncoderWeights(enc_cfg, ref), config, step)
