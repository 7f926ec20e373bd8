"""
Pure-Python/NumPy versions of the compiled kernels.

Signatures and RNG consumption match ``_fast`` so the two backends follow
the same sample path; floating-point summation order may differ slightly.
"""

import numpy as np
import scipy.sparse as sp

from .. import losses

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix(state: int, n: int) -> np.ndarray:
    """The next ``n`` splitmix64 outputs after ``state``."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _row_offsets(indptr, rows):
    rows = np.asarray(rows, dtype=np.int64)
    lo = indptr[rows]
    cnt = indptr[rows + 1] - lo
    offs = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(cnt.sum())
    return offs, cnt


def _represent(indptr, indices, data, emb, bias, rows):
    if len(rows) == 0:
        return np.zeros((0, emb.shape[1])), np.zeros(0)
    offs, cnt = _row_offsets(indptr, rows)
    feats = indices[offs]
    w = data[offs].astype(np.float64)
    starts = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    vecs = np.add.reduceat(w[:, None] * emb[feats].astype(np.float64), starts, axis=0)
    b = np.add.reduceat(w * bias[feats].astype(np.float64), starts)
    return vecs, b


def _adagrad(param, acc, rows, grads, lr, l2, eps):
    g = grads + l2 * param[rows].astype(np.float64)
    nz = g != 0
    acc_rows = acc[rows] + np.where(nz, g * g, 0.0)
    step = np.zeros_like(g)
    np.divide(lr * g, np.sqrt(acc_rows + eps), out=step, where=nz)
    acc[rows] = acc_rows
    # overflow to inf is caught by the trainer's divergence check
    with np.errstate(over="ignore"):
        param[rows] = (param[rows] - step).astype(param.dtype)


def adagrad_rows(param, acc, rows, grads, lr, l2, eps):
    """Adagrad step on the listed (unique) rows of a 2-D parameter table."""
    _adagrad(param, acc, np.asarray(rows), np.asarray(grads, dtype=np.float64), lr, l2, eps)


def adagrad_vector(param, acc, rows, grads, lr, l2, eps):
    _adagrad(param, acc, np.asarray(rows), np.asarray(grads, dtype=np.float64), lr, l2, eps)


def warp_epoch(
    u_indptr, u_indices, u_data,
    i_indptr, i_indices, i_data,
    user_emb, item_emb, user_bias, item_bias,
    user_emb_acc, item_emb_acc, user_bias_acc, item_bias_acc,
    rel_indptr, rel_indices,
    pair_users, pair_items,
    phi_table, lr, l2, eps,
    max_trials, seed, update_biases,
    trials_out, loss_out,
):
    num_items = i_indptr.size - 1
    state = int(seed)
    for p in range(pair_users.size):
        user = int(pair_users[p])
        pos = int(pair_items[p])
        loss_out[p] = 0.0
        trials_out[p] = 0
        rel = rel_indices[rel_indptr[user] : rel_indptr[user + 1]]
        if rel.size >= num_items:
            continue
        u, bu = _represent(u_indptr, u_indices, u_data, user_emb, user_bias, [user])
        u, bu = u[0], bu[0]
        vp, bp = _represent(i_indptr, i_indices, i_data, item_emb, item_bias, [pos])
        vp, bp = vp[0], bp[0]
        s_pos = float(u @ vp) + bu + bp

        trials = 0
        neg = None
        chunk = 16
        while trials < max_trials and neg is None:
            draws = splitmix(state, chunk)
            items = (draws % np.uint64(num_items)).astype(np.int64)
            irrelevant = ~np.isin(items, rel)
            # trial number each draw would get; relevant draws don't count
            trial_no = trials + np.cumsum(irrelevant)
            usable = irrelevant & (trial_no <= max_trials)
            cand = items[usable]
            vn, bn = _represent(i_indptr, i_indices, i_data, item_emb, item_bias, cand)
            s = vn @ u + bu + bn
            hits = np.flatnonzero(1.0 + s > s_pos)
            if hits.size:
                h = hits[0]
                draw_idx = int(np.flatnonzero(usable)[h])
                neg, s_neg, v_neg = int(cand[h]), float(s[h]), vn[h]
                trials = int(trial_no[draw_idx])
                state = (state + (draw_idx + 1) * int(_GOLDEN)) & _MASK
            elif trial_no[-1] >= max_trials:
                last = int(np.flatnonzero(trial_no >= max_trials)[0])
                trials = int(max_trials)
                state = (state + (last + 1) * int(_GOLDEN)) & _MASK
            else:
                trials = int(trial_no[-1])
                state = (state + chunk * int(_GOLDEN)) & _MASK
                chunk = min(chunk * 2, 4096)
        trials_out[p] = trials
        if neg is None:
            continue

        phi = phi_table[(num_items - 1) // trials]
        loss_out[p] = phi * (1.0 - s_pos + s_neg)
        if phi == 0.0:
            continue
        du = phi * (v_neg - vp)

        pf = i_indices[i_indptr[pos] : i_indptr[pos + 1]]
        pw = i_data[i_indptr[pos] : i_indptr[pos + 1]].astype(np.float64)
        nf = i_indices[i_indptr[neg] : i_indptr[neg + 1]]
        nw = i_data[i_indptr[neg] : i_indptr[neg + 1]].astype(np.float64)
        feats = np.union1d(pf, nf).astype(np.int32)
        coef = np.zeros(feats.size)
        coef[np.searchsorted(feats, nf)] += phi * nw
        coef[np.searchsorted(feats, pf)] -= phi * pw
        _adagrad(item_emb, item_emb_acc, feats, coef[:, None] * u[None, :], lr, l2, eps)
        if update_biases:
            _adagrad(item_bias, item_bias_acc, feats, coef, lr, l2, eps)

        uf = u_indices[u_indptr[user] : u_indptr[user + 1]]
        uw = u_data[u_indptr[user] : u_indptr[user + 1]].astype(np.float64)
        _adagrad(user_emb, user_emb_acc, uf, uw[:, None] * du[None, :], lr, l2, eps)
        if update_biases:
            _adagrad(user_bias, user_bias_acc, uf, np.zeros(uf.size), lr, l2, eps)
    return state


def _compact(indptr, indices, data, rows, num_features):
    """Rows of a CSR matrix restricted to the columns they touch."""
    mat = sp.csr_matrix((data, indices, indptr), shape=(indptr.size - 1, num_features))
    sub = mat[np.asarray(rows, dtype=np.int64)].tocoo()
    ids, cols = np.unique(sub.col, return_inverse=True)
    compact = sp.csr_matrix(
        (sub.data.astype(np.float64), (sub.row, cols)), shape=(sub.shape[0], ids.size)
    )
    return ids.astype(np.int32), compact


def batch_gradients(
    kind,
    u_indptr, u_indices, u_data,
    i_indptr, i_indices, i_data,
    user_emb, item_emb, user_bias, item_bias,
    users, positives, candidates, relevant,
    num_items, threads=1,
):
    U, bu = _represent(u_indptr, u_indices, u_data, user_emb, user_bias, users)
    VP, bp = _represent(i_indptr, i_indices, i_data, item_emb, item_bias, positives)
    VZ, bz = _represent(i_indptr, i_indices, i_data, item_emb, item_bias, candidates)
    s_pos = np.einsum("ij,ij->i", U, VP) + bu + bp
    S = U @ VZ.T + bu[:, None] + bz[None, :]

    batch = losses.LossBatch(
        np.asarray(users), np.asarray(positives), np.asarray(candidates),
        np.asarray(relevant, dtype=bool), int(num_items),
    )
    out = (losses.wmrb_grad if kind == 0 else losses.ce_loss)(batch, s_pos, S)
    gS, gpos = out.grad_candidates, out.grad_pos

    dU = gS @ VZ + gpos[:, None] * VP
    dbu = gS.sum(axis=1) + gpos
    dVZ = gS.T @ U
    dbz = gS.sum(axis=0)

    u_ids, Wu = _compact(u_indptr, u_indices, u_data, users, user_emb.shape[0])
    i_rows = np.concatenate([np.asarray(candidates), np.asarray(positives)])
    i_ids, Wi = _compact(i_indptr, i_indices, i_data, i_rows, item_emb.shape[0])
    item_grads = np.vstack([dVZ, gpos[:, None] * U])
    item_bias_grads = np.concatenate([dbz, gpos])
    return (
        np.asarray(out.loss, dtype=np.float64),
        u_ids,
        np.asarray(Wu.T @ dU),
        np.asarray(Wu.T @ dbu),
        i_ids,
        np.asarray(Wi.T @ item_grads),
        np.asarray(Wi.T @ item_bias_grads),
    )
