"""Masked multi-head attention and its two deployment modes.

``masked_mha`` is one full pre-norm decoder sublayer pair: attention with
position embedding added to queries and keys (never values), a residual,
then a feed-forward block.  ``visibility_cross_attention`` runs it once
per wedge with the wedges stacked as a batch; ``oracle_global_attention``
runs one global pass under an arbitrary query-token membership mask and
exists to prove the two agree.  ``temporal_attention`` reuses the same
sublayer over current queries concatenated with memory entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diagnostics
from .autodiff import MlpParams, Tensor
from .partition import ViewPartition


@dataclass
class MhaParams:
    """Per-head projections packed as [C, C] matrices."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        C = self.wq.shape[0]
        if C % self.heads != 0:
            raise ValueError(f"model dim {C} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass
class AttnBlockParams:
    """Pre-norm attention sublayer + feed-forward sublayer."""

    mha: MhaParams
    ln_q_gamma: Tensor
    ln_q_beta: Tensor
    ln_f_gamma: Tensor
    ln_f_beta: Tensor
    ffn: MlpParams


def init_mha(dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
             name: str = "mha") -> MhaParams:
    bound = 1.0 / np.sqrt(dim)

    def w(tag):
        return ad.param(rng.uniform(-bound, bound, size=(dim, dim)).astype(dtype), name=f"{name}.{tag}")

    def b(tag):
        return ad.param(rng.uniform(-bound, bound, size=(dim,)).astype(dtype), name=f"{name}.{tag}")

    return MhaParams(wq=w("wq"), bq=b("bq"), wk=w("wk"), bk=b("bk"),
                     wv=w("wv"), bv=b("bv"), wo=w("wo"), bo=b("bo"), heads=heads)


def init_attn_block(dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                    ffn_mult: int = 4, name: str = "block") -> AttnBlockParams:
    ones = np.ones(dim, dtype=dtype)
    zeros = np.zeros(dim, dtype=dtype)
    return AttnBlockParams(
        mha=init_mha(dim, heads, rng, dtype, name=f"{name}.mha"),
        ln_q_gamma=ad.param(ones, name=f"{name}.ln_q.g"),
        ln_q_beta=ad.param(zeros, name=f"{name}.ln_q.b"),
        ln_f_gamma=ad.param(ones, name=f"{name}.ln_f.g"),
        ln_f_beta=ad.param(zeros, name=f"{name}.ln_f.b"),
        ffn=ad.init_mlp([dim, ffn_mult * dim, dim], rng, dtype, name=f"{name}.ffn"),
    )


def attn_block_param_list(p: AttnBlockParams) -> list[Tensor]:
    m = p.mha
    return [m.wq, m.bq, m.wk, m.bk, m.wv, m.bv, m.wo, m.bo,
            p.ln_q_gamma, p.ln_q_beta, p.ln_f_gamma, p.ln_f_beta] + ad.mlp_params_list(p.ffn)


def _lift_batch(t: Tensor) -> Tensor:
    if t.data.ndim == 2:
        return ad.reshape(t, (1,) + t.shape)
    return t


def _project(x: Tensor, w: Tensor, b: Tensor, heads: int) -> Tensor:
    """[B, L, C] -> [B*h, L, C/h] head-split projection."""
    B, L, C = x.shape
    dh = C // heads
    y = ad.add(ad.matmul(ad.reshape(x, (B * L, C)), w), b)
    y = ad.transpose(ad.reshape(y, (B, L, heads, dh)), (0, 2, 1, 3))
    return ad.reshape(y, (B * heads, L, dh))


def masked_mha(params: AttnBlockParams, q: Tensor, k: Tensor, v: Tensor,
               q_pe: Tensor | None = None, k_pe: Tensor | None = None,
               mask: np.ndarray | None = None,
               capture: list | None = None) -> Tensor:
    """One decoder sublayer pair over batched sequences.

    ``q`` is [B, Lq, C] (or [Lq, C]); ``k``/``v`` are [B, Lk, C].  ``mask``
    is boolean [B, Lq, Lk] (or broadcastable [B, 1, Lk]); True marks keys a
    query may attend to.  Position embeddings are added to queries and
    keys only.  A query row whose mask admits no key raises.
    """
    squeeze = q.data.ndim == 2
    q = _lift_batch(q)
    k = _lift_batch(k)
    v = _lift_batch(v)
    B, Lq, C = q.shape
    Lk = k.shape[1]
    h = params.mha.heads

    qn = ad.layernorm(q, params.ln_q_gamma, params.ln_q_beta)
    qa = qn if q_pe is None else ad.add(qn, _lift_batch(q_pe))
    ka = k if k_pe is None else ad.add(k, _lift_batch(k_pe))

    Q = _project(qa, params.mha.wq, params.mha.bq, h)
    K = _project(ka, params.mha.wk, params.mha.bk, h)
    V = _project(v, params.mha.wv, params.mha.bv, h)

    logits = ad.scale(ad.matmul(Q, ad.transpose(K, (0, 2, 1))), 1.0 / np.sqrt(C // h))
    if mask is None:
        mask_bh = np.ones((B * h, Lq, Lk), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None]
        mask_bh = np.broadcast_to(mask[:, None], (B, h, mask.shape[1], Lk))
        mask_bh = np.broadcast_to(mask_bh, (B, h, Lq, Lk)).reshape(B * h, Lq, Lk)
    weights = ad.masked_softmax(logits, mask_bh)
    if capture is not None:
        capture.append(weights.data.reshape(B, h, Lq, Lk).copy())

    ctx = ad.matmul(weights, V)                                   # [B*h, Lq, dh]
    ctx = ad.transpose(ad.reshape(ctx, (B, h, Lq, C // h)), (0, 2, 1, 3))
    out = ad.add(ad.matmul(ad.reshape(ctx, (B * Lq, C)), params.mha.wo), params.mha.bo)
    x = ad.add(q, ad.reshape(out, (B, Lq, C)))

    xn = ad.layernorm(x, params.ln_f_gamma, params.ln_f_beta)
    x = ad.add(x, ad.mlp_apply(params.ffn, xn))
    return ad.reshape(x, (Lq, C)) if squeeze else x


def _select_groups(padded: Tensor, keep: np.ndarray) -> Tensor:
    """Pick wedge rows of a [V, L, C] tensor (axis-0 gather)."""
    V, L, C = padded.shape
    flat = ad.reshape(padded, (V * L, C))
    idx = (keep[:, None] * L + np.arange(L)[None, :]).reshape(-1)
    return ad.reshape(ad.take_rows(flat, idx), (keep.size, L, C))


def visibility_cross_attention(queries: Tensor, features: Tensor,
                               part_q: ViewPartition, part_k: ViewPartition,
                               q_pe: Tensor, k_pe: Tensor,
                               params: AttnBlockParams,
                               capture: list | None = None) -> Tensor:
    """Per-wedge cross-attention; wedges run as independent batch entries.

    Queries in a wedge that holds no image tokens pass through unchanged
    (they regain context at the next layer's shifted partition); the
    ``attention.token_empty_wedges`` counter records the event.
    """
    if part_q.num_views != part_k.num_views:
        raise ValueError("query and key partitions disagree on view count")
    n, C = queries.shape
    if n != part_q.num_items or features.shape[0] != part_k.num_items:
        raise ValueError("partition does not cover the given queries/tokens")

    q_sizes = np.array([g.size for g in part_q.groups])
    k_sizes = np.array([g.size for g in part_k.groups])
    keep = np.flatnonzero((q_sizes > 0) & (k_sizes > 0))
    skipped = np.flatnonzero((q_sizes > 0) & (k_sizes == 0))
    if skipped.size:
        diagnostics.bump("attention.token_empty_wedges", int(skipped.size))
    if keep.size == 0:
        return queries

    Lq, Lk = part_q.pad_len, part_k.pad_len
    q_pad = ad.reshape(ad.take_rows(queries, part_q.padded_index()[keep].reshape(-1)),
                       (keep.size, Lq, C))
    f_pad = ad.reshape(ad.take_rows(features, part_k.padded_index()[keep].reshape(-1)),
                       (keep.size, Lk, C))
    q_pe_s = _select_groups(q_pe, keep)
    k_pe_s = _select_groups(k_pe, keep)
    mask = part_k.mask[keep][:, None, :]               # valid keys, any query row

    out = masked_mha(params, q_pad, f_pad, f_pad, q_pe_s, k_pe_s, mask, capture)

    # scatter valid slots back to original query order; untouched wedges
    # fall through to the incoming embeddings
    perm = np.empty(n, dtype=np.intp)
    perm[:] = keep.size * Lq + np.arange(n)            # default: pass-through row
    for row, v in enumerate(keep):
        g = part_q.groups[v]
        perm[g] = row * Lq + np.arange(g.size)
    pool = ad.concat([ad.reshape(out, (keep.size * Lq, C)), queries], axis=0)
    return ad.take_rows(pool, perm)


def oracle_global_attention(queries: Tensor, features: Tensor,
                            membership_mask: np.ndarray,
                            q_pe: Tensor, k_pe: Tensor,
                            params: AttnBlockParams,
                            capture: list | None = None) -> Tensor:
    """One global masked pass; reference semantics for the divided path.

    ``membership_mask[i, j]`` is True iff query i may see token j.  With an
    all-true mask this is plain global cross-attention.
    """
    mask = np.asarray(membership_mask, dtype=bool)
    if mask.shape != (queries.shape[0], features.shape[0]):
        raise ValueError("membership mask shape mismatch")
    return masked_mha(params, queries, features, features, q_pe, k_pe, mask[None], capture)


def temporal_attention(queries: Tensor, q_pe: Tensor,
                       mem_embeddings: Tensor | None, mem_pe: Tensor | None,
                       group_tags: np.ndarray, params: AttnBlockParams,
                       capture: list | None = None) -> Tensor:
    """Self-attention over queries extended with cached memory entries.

    Keys/values are [current queries; memory embeddings].  The default
    group (tag 0) sees itself plus all memory; each additional group sees
    only itself — preserving duplicate suppression without leaking
    temporal context into the one-to-many groups.  With no memory this is
    pure (group-masked) self-attention.
    """
    tags = np.asarray(group_tags)
    M = queries.shape[0]
    if tags.shape != (M,):
        raise ValueError("group tag per query required")
    n_mem = 0 if mem_embeddings is None else mem_embeddings.shape[0]

    if n_mem:
        keys = ad.concat([queries, mem_embeddings], axis=0)
        key_pe = ad.concat([q_pe, mem_pe], axis=0)
    else:
        keys, key_pe = queries, q_pe

    mask = np.zeros((M, M + n_mem), dtype=bool)
    same_group = tags[:, None] == tags[None, :]
    mask[:, :M] = same_group
    if n_mem:
        mask[tags == 0, M:] = True
    return masked_mha(params, queries, keys, keys, q_pe, key_pe, mask[None], capture)
