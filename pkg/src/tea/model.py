"""End-to-end candidate scoring: assemble a step's inputs and add f + g.

A StepContext freezes everything the two scorers may look at for one
prediction: the history prefix, the neighbor-item buckets feeding the
temporal GRU, the walk set anchored at the most recent observed event, and
the social neighborhood. Contexts for held-out targets are built from
pre-target data only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transition, unary
from .autodiff import Tensor
from .data import PreparedDataset
from .params import ModelParams, embedding_row
from .transition import WalkAggregate


@dataclass
class StepContext:
    user: int
    history: list[int]              # item ids, chronological
    buckets: list[list[int]]        # neighbor items per step feeding the GRU
    anchors: list[int | None]       # the user's own item opening each bucket
    walk_users: list[int]           # co-interactors of the last observed event
    walk_anchor: int | None
    neighbors: list[int]


def training_context(ds: PreparedDataset, user: int, step: int) -> StepContext:
    """Context for predicting the user's training event at index `step` (>= 1)."""
    rec = ds.users[user]
    if not 1 <= step < len(rec.seq_items):
        raise IndexError(f"step {step} out of range for user {user}")
    history = rec.seq_items[:step]
    return StepContext(
        user=user,
        history=history,
        buckets=rec.buckets[:step],
        anchors=list(rec.seq_items[:step]),
        walk_users=rec.walks[step - 1],
        walk_anchor=rec.seq_items[step - 1],
        neighbors=ds.social.of(user),
    )


def eval_context(ds: PreparedDataset, user: int, split: str) -> StepContext:
    """Context for the held-out validation or test target of a user.

    The validation target sees the training sequence; the test target
    additionally sees the validation event (it happened before the test
    timestamp). Held-out events of *other* users are never visible either
    way: buckets and walks are built from training events only.
    """
    rec = ds.users[user]
    if split == "val":
        return StepContext(
            user=user,
            history=list(rec.seq_items),
            buckets=rec.buckets + [rec.bucket_val],
            anchors=list(rec.seq_items),
            walk_users=rec.walks[-1],
            walk_anchor=rec.seq_items[-1],
            neighbors=ds.social.of(user),
        )
    if split != "test":
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    return StepContext(
        user=user,
        history=rec.seq_items + [rec.val_item],
        buckets=rec.buckets + [rec.bucket_val, rec.bucket_gap],
        anchors=rec.seq_items + [rec.val_item],
        walk_users=rec.walks_val,
        walk_anchor=rec.val_item,
        neighbors=ds.social.of(user),
    )


def positive_target(ds: PreparedDataset, user: int, step: int) -> int:
    return ds.users[user].seq_items[step]


def _clip_history(history: list[int], l_s: int) -> list[int]:
    # The candidate occupies the next position index, which must stay < l_s.
    return history[-(l_s - 1):]


def score_candidates(params: ModelParams, ctx: StepContext, candidates: list[int],
                     training: bool = False, rng: np.random.Generator | None = None,
                     p_drop: float = 0.5) -> Tensor:
    """f + g for every candidate, shape (len(candidates),)."""
    history = _clip_history(ctx.history, params.l_s)
    if params.use_walks:
        walk = _fast_walk(params, ctx)
    else:
        d = params.d
        walk = WalkAggregate(ad.zeros(d), ad.zeros(d), [])
    g = transition.transition_scores(params.transition, ctx.user, history,
                                     candidates, walk, training, rng, p_drop)
    h_temporal = unary.aggregate_steps(params.unary, ctx.buckets, ctx.anchors,
                                       params.l_s)
    h_social = unary.social_aggregate(params.unary, ctx.neighbors)
    f = unary.unary_scores(params.unary, h_temporal, h_social, candidates,
                           training, rng, p_drop)
    return ad.add(f, g)


def _fast_walk(params: ModelParams, ctx: StepContext) -> WalkAggregate:
    """Walk aggregation without the per-walk loop.

    The GRU's first two outputs depend only on the user and anchor item, so
    every walk in the set produces the same user/item representations and
    the mean collapses to a single pass. `transition.walk_aggregate` is the
    literal per-walk route; tests assert the two agree.
    """
    d = params.d
    if not ctx.walk_users or ctx.walk_anchor is None:
        return WalkAggregate(ad.zeros(d), ad.zeros(d), [])
    trans = params.transition
    h1 = ad.gru_cell(embedding_row(params.shared.user, ctx.user), ad.zeros(d),
                     trans.walk_gru)
    h2 = ad.gru_cell(embedding_row(params.shared.item, ctx.walk_anchor), h1,
                     trans.walk_gru)
    return WalkAggregate(h1, h2, [])


def score_user_steps(params: ModelParams, ds: PreparedDataset, user: int,
                     steps: list[int], candidate_lists: list[list[int]],
                     training: bool = False, rngs: list | None = None,
                     p_drop: float = 0.5) -> list[Tensor]:
    """Score candidate sets for several training steps of one user at once.

    Identical math to per-step `score_candidates`, but everything that does
    not depend on the step or the candidate is computed once: the social
    aggregate, the neighbor-bucket GRU prefix states, attention keys and
    values over the user's sequence, and the walk GRU's first stage. Falls
    back to the per-step route when the sequence is longer than the
    attention window (position indices would shift between steps).
    """
    rec = ds.users[user]
    seq = rec.seq_items
    if rngs is None:
        rngs = [None] * len(steps)
    if len(seq) > params.l_s - 1:
        return [score_candidates(params, training_context(ds, user, s), cands,
                                 training, rng, p_drop)
                for s, cands, rng in zip(steps, candidate_lists, rngs)]

    d = params.d
    trans, un = params.transition, params.unary
    sh = params.shared
    max_step = max(steps)

    h_social = unary.social_aggregate(un, ds.social.of(user))
    h_states = [ad.zeros(d)]
    for t in range(max_step):
        if un.aggregator == "attention":
            summary = unary.bipartite_aggregate_attention(un, seq[t], rec.buckets[t])
        else:
            summary = unary.bipartite_aggregate_sage(un, rec.buckets[t])
        h_states.append(ad.gru_cell(summary, h_states[-1], un.temporal_gru))

    p_user = embedding_row(sh.user, user)
    walk_h1 = None
    if params.use_walks and any(rec.walks[s - 1] for s in steps):
        walk_h1 = ad.gru_cell(p_user, ad.zeros(d), trans.walk_gru)

    e_hist = ad.add(ad.gather_rows(sh.item, seq[:max_step]),
                    ad.gather_rows(sh.position, list(range(max_step))))
    keys = ad.matmul(e_hist, ad.transpose(trans.w_k))
    values = ad.matmul(e_hist, ad.transpose(trans.w_v))
    w3_h = ad.slice_cols(trans.w_g3, 0, d)
    w3_wu = ad.slice_cols(trans.w_g3, d, 2 * d)
    w3_wi = ad.slice_cols(trans.w_g3, 2 * d, 3 * d)
    w3_pu = ad.slice_cols(trans.w_g3, 3 * d, 4 * d)
    pu_part = ad.matmul(w3_pu, p_user)

    out = []
    inv_sqrt_d = 1.0 / np.sqrt(d)
    for s, cands, rng in zip(steps, candidate_lists, rngs):
        q_cands = ad.gather_rows(sh.item, cands)
        e_cands = ad.add(q_cands, embedding_row(sh.position, s))
        queries = ad.matmul(e_cands, ad.transpose(trans.w_q))
        logits = ad.scale(
            ad.matmul(queries, ad.transpose(ad.slice_rows(keys, 0, s))), inv_sqrt_d)
        attn = ad.masked_softmax(logits, np.ones((len(cands), s), dtype=bool))
        z = ad.matmul(attn, ad.slice_rows(values, 0, s))
        hidden = ad.relu(ad.add(ad.matmul(z, ad.transpose(trans.w_g1)), trans.b_g1))
        h = ad.add(ad.add(ad.matmul(hidden, ad.transpose(trans.w_g2)), trans.b_g2),
                   p_user)
        if training:
            h = ad.dropout(h, p_drop, rng)
        if walk_h1 is not None and rec.walks[s - 1]:
            h_wu = walk_h1
            h_wi = ad.gru_cell(embedding_row(sh.item, seq[s - 1]), walk_h1,
                               trans.walk_gru)
            shared_part = ad.add(ad.add(ad.matmul(w3_wu, h_wu),
                                        ad.matmul(w3_wi, h_wi)), pu_part)
        else:
            shared_part = pu_part
        g = ad.row_sum(ad.mul(ad.add(ad.matmul(h, ad.transpose(w3_h)), shared_part),
                              q_cands))
        h_user = unary.fuse_context(un, h_states[s], h_social, training, rng, p_drop)
        f = ad.matmul(q_cands, h_user)
        out.append(ad.add(f, g))
    return out


def score_candidates_single_route(params: ModelParams, ctx: StepContext,
                                  candidates: list[int]) -> np.ndarray:
    """Reference scoring through the one-candidate-at-a-time functions.

    Exists as the slow twin of `score_candidates` for tests; evaluation
    mode only.
    """
    history = _clip_history(ctx.history, params.l_s)
    if params.use_walks:
        walk = transition.walk_aggregate(params.transition, ctx.user,
                                         ctx.walk_anchor, ctx.walk_users)
    else:
        walk = WalkAggregate(ad.zeros(params.d), ad.zeros(params.d), [])
    h_temporal = unary.aggregate_steps(params.unary, ctx.buckets, ctx.anchors,
                                       params.l_s)
    h_social = unary.social_aggregate(params.unary, ctx.neighbors)
    out = []
    for cand in candidates:
        g = transition.transition_score(params.transition, ctx.user, history,
                                        cand, walk)
        f = unary.unary_score(params.unary, h_temporal, h_social, cand)
        out.append(g.item() + f.item())
    return np.asarray(out)
