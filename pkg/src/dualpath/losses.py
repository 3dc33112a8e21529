"""Training objectives for the dual-path encoder.

Margin triplet clustering of the degradation embedding, clean/degraded
semantic alignment (global cosine + token-wise squared error) with an
independence penalty against the degradation embedding, a temperature
InfoNCE retrieval loss over normalized embeddings, and the composite
retrieval / generation objectives that weight them together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T
from .encoder import EncoderOutput
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0  # triplet margin
    tau: float = 0.05  # InfoNCE temperature
    lambda_fsal: float = 1.0  # token-wise alignment weight inside the alignment loss
    lambda1: float = 1.0  # alignment weight in the retrieval objective
    lambda2: float = 0.5  # triplet weight in the retrieval objective
    lambda3: float = 0.5  # triplet weight in the generation objective
    stop_grad_clean: bool = True
    stop_grad_zdeg_in_sil: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("margin must be >= 0")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")
        if min(self.lambda_fsal, self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class CleanDegradedPair:
    clean: EncoderOutput
    degraded: EncoderOutput
    doc_id: str = ""

    def __post_init__(self):
        if self.clean.sem_tokens.shape != self.degraded.sem_tokens.shape:
            raise ValueError("clean and degraded sides must have the same token count")


@dataclass
class LossBatch:
    """Inputs for one optimization step, already encoded.

    retrieval: (query_emb, positive_emb, [negative_embs]) per item
    pairs: clean/degraded encoder outputs of the same document
    triplets: (anchor, positive, negative) degradation embeddings
    """

    retrieval: list = field(default_factory=list)
    pairs: list = field(default_factory=list)
    triplets: list = field(default_factory=list)


def ncdm_loss(z_a: Tensor, z_p: Tensor, z_n: Tensor, delta: float) -> Tensor:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin), subgradient 0 at the hinge."""
    if not (z_a.shape == z_p.shape == z_n.shape):
        raise ValueError("triplet embeddings must share a shape")
    dp = T.sub(z_a, z_p)
    dn = T.sub(z_a, z_n)
    gap = T.add(T.sub(T.tsum(T.mul(dp, dp)), T.tsum(T.mul(dn, dn))), delta)
    return T.relu(gap)


def _row_cosines(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of corresponding rows of two token matrices."""
    na = T.sqrt(T.tsum(T.mul(a, a), axis=1))
    nb = T.sqrt(T.tsum(T.mul(b, b), axis=1))
    if na.data.min() < 1e-12 or nb.data.min() < 1e-12:
        raise ValueError("token with near-zero norm; cosine undefined")
    return T.div(T.tsum(T.mul(a, b), axis=1), T.mul(na, nb))


def sil_loss(pair: CleanDegradedPair, config: LossConfig) -> Tensor:
    """Mean over tokens of (1 - cos(degraded_i, clean_i)) + |cos(degraded_i, z_deg)|."""
    deg = pair.degraded.sem_tokens
    clean = pair.clean.sem_tokens
    if config.stop_grad_clean:
        clean = T.detach(clean)
    z_deg = pair.degraded.z_deg
    if z_deg is None:
        raise ValueError("degraded side has no degradation embedding")
    align = T.sub(1.0, _row_cosines(deg, clean))

    zd = T.detach(z_deg) if config.stop_grad_zdeg_in_sil else z_deg
    zd_row = T.reshape(zd, (1, zd.shape[0]))
    nz = T.l2norm(zd)
    if nz.item() < 1e-12:
        raise ValueError("degradation embedding has near-zero norm; cosine undefined")
    n_deg = T.sqrt(T.tsum(T.mul(deg, deg), axis=1))
    if n_deg.data.min() < 1e-12:
        raise ValueError("token with near-zero norm; cosine undefined")
    indep = T.absolute(T.div(T.tsum(T.mul(deg, zd_row), axis=1), T.mul(n_deg, nz)))
    return T.mean(T.add(align, indep))


def fsal_loss(pair: CleanDegradedPair, config: LossConfig | None = None) -> Tensor:
    """Mean over tokens of the squared distance between degraded and clean tokens."""
    deg = pair.degraded.sem_tokens
    clean = pair.clean.sem_tokens
    if config is not None and config.stop_grad_clean:
        clean = T.detach(clean)
    diff = T.sub(deg, clean)
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / deg.shape[0])


def csa_loss(pair: CleanDegradedPair, config: LossConfig) -> Tensor:
    return T.add(sil_loss(pair, config), T.mul(fsal_loss(pair, config), config.lambda_fsal))


def retrieval_infonce(q_emb: Tensor, pos: Tensor, negs: list, tau: float) -> Tensor:
    """-log softmax of the positive among cosine similarities at temperature tau.

    Embeddings are L2-normalized internally, so similarity is cosine.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    for e in (q_emb, pos, *negs):
        if e.data.size == 0:
            raise ValueError("empty embedding")
    qn = T.normalize(q_emb)
    sims = [T.dot(qn, T.normalize(pos))]
    sims += [T.dot(qn, T.normalize(n)) for n in negs]
    logits = [T.mul(s, 1.0 / tau) for s in sims]
    m = max(l.item() for l in logits)  # constant shift; gradient unaffected
    lse = T.add(T.log(T.tsum(T.concat_rows([T.reshape(T.exp(T.sub(l, m)), (1,)) for l in logits]))), m)
    return T.sub(lse, logits[0])


def _term_means(batch: LossBatch, config: LossConfig, need_pairs: bool, need_triplets: bool):
    sil = fsal = ncdm = None
    if need_pairs:
        if not batch.pairs:
            raise ValueError("alignment weight is positive but the batch has no clean/degraded pairs")
        sil = T.mul(_sum([sil_loss(p, config) for p in batch.pairs]), 1.0 / len(batch.pairs))
        fsal = T.mul(_sum([fsal_loss(p, config) for p in batch.pairs]), 1.0 / len(batch.pairs))
    if need_triplets:
        if not batch.triplets:
            raise ValueError("triplet weight is positive but the batch has no triplets")
        ncdm = T.mul(
            _sum([ncdm_loss(a, p, n, config.delta) for a, p, n in batch.triplets]),
            1.0 / len(batch.triplets),
        )
    return sil, fsal, ncdm


def _sum(ts: list) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def loss_components(batch: LossBatch, config: LossConfig, objective: str) -> dict[str, Tensor]:
    """Per-term batch means plus the weighted total for one objective."""
    if objective == "retrieval":
        if not batch.retrieval:
            raise ValueError("retrieval objective needs at least one query item")
        ret = T.mul(
            _sum([retrieval_infonce(q, p, n, config.tau) for q, p, n in batch.retrieval]),
            1.0 / len(batch.retrieval),
        )
        sil, fsal, ncdm = _term_means(batch, config, config.lambda1 > 0, config.lambda2 > 0)
        total = ret
        if sil is not None:
            total = T.add(total, T.mul(T.add(sil, T.mul(fsal, config.lambda_fsal)), config.lambda1))
        if ncdm is not None:
            total = T.add(total, T.mul(ncdm, config.lambda2))
        return {"ret": ret, "sil": sil, "fsal": fsal, "ncdm": ncdm, "total": total}
    if objective == "generation":
        sil, fsal, ncdm = _term_means(batch, config, True, config.lambda3 > 0)
        total = T.add(sil, T.mul(fsal, config.lambda_fsal))
        if ncdm is not None:
            total = T.add(total, T.mul(ncdm, config.lambda3))
        return {"ret": None, "sil": sil, "fsal": fsal, "ncdm": ncdm, "total": total}
    raise ValueError(f"unknown objective {objective!r}")


def total_retrieval_loss(batch: LossBatch, config: LossConfig) -> Tensor:
    """InfoNCE + lambda1 * alignment + lambda2 * triplet, batch-averaged."""
    return loss_components(batch, config, "retrieval")["total"]


def total_generation_loss(batch: LossBatch, config: LossConfig) -> Tensor:
    """Alignment + lambda3 * triplet; no retrieval term, no query table."""
    return loss_components(batch, config, "generation")["total"]
