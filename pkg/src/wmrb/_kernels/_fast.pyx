# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels.

Parameters may be float32 or float64 (the latter for gradient checks);
all accumulation is done in double precision.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from cython.parallel cimport prange, parallel
from libc.math cimport sqrt, log1p, log, exp
from libc.stdint cimport uint64_t, int64_t, int32_t, uint8_t
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    WMRB = 0
    CE = 1


cdef inline uint64_t splitmix_next(uint64_t *state) noexcept nogil:
    cdef uint64_t z
    state[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline bint row_contains(const int64_t[::1] indptr, const int32_t[::1] indices,
                              int32_t row, int32_t x) noexcept nogil:
    cdef int64_t lo = indptr[row], hi = indptr[row + 1], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if indices[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo < indptr[row + 1] and indices[lo] == x


cdef inline void represent(const int64_t[::1] indptr, const int32_t[::1] indices,
                           const float[::1] weights, floating[:, ::1] emb,
                           floating[::1] bias, int32_t row, double *out,
                           double *out_bias, Py_ssize_t dim) noexcept nogil:
    cdef Py_ssize_t k, j
    cdef double w
    cdef int32_t f
    for k in range(dim):
        out[k] = 0.0
    out_bias[0] = 0.0
    for j in range(indptr[row], indptr[row + 1]):
        f = indices[j]
        w = weights[j]
        for k in range(dim):
            out[k] += w * emb[f, k]
        out_bias[0] += w * bias[f]


cdef inline double dot(const double *a, const double *b, Py_ssize_t dim) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t k
    for k in range(dim):
        s += a[k] * b[k]
    return s


cdef inline void adagrad_row(floating[:, ::1] param, double[:, ::1] acc, int32_t row,
                             const double *grad, double coef, double lr, double l2,
                             double eps, Py_ssize_t dim) noexcept nogil:
    cdef Py_ssize_t k
    cdef double g
    for k in range(dim):
        g = coef * grad[k] + l2 * param[row, k]
        if g == 0.0:
            continue
        acc[row, k] += g * g
        param[row, k] = <floating>(param[row, k] - lr * g / sqrt(acc[row, k] + eps))


cdef inline void adagrad_scalar(floating[::1] param, double[::1] acc, int32_t row,
                                double g, double lr, double l2, double eps) noexcept nogil:
    g = g + l2 * param[row]
    if g == 0.0:
        return
    acc[row] += g * g
    param[row] = <floating>(param[row] - lr * g / sqrt(acc[row] + eps))


def adagrad_rows(floating[:, ::1] param, double[:, ::1] acc, const int32_t[::1] rows,
                 const double[:, ::1] grads, double lr, double l2, double eps):
    """Adagrad step on the listed rows of a 2-D parameter table."""
    cdef Py_ssize_t n = rows.shape[0], dim = param.shape[1], i
    with nogil:
        for i in range(n):
            adagrad_row(param, acc, rows[i], &grads[i, 0], 1.0, lr, l2, eps, dim)


def adagrad_vector(floating[::1] param, double[::1] acc, const int32_t[::1] rows,
                   const double[::1] grads, double lr, double l2, double eps):
    cdef Py_ssize_t n = rows.shape[0], i
    with nogil:
        for i in range(n):
            adagrad_scalar(param, acc, rows[i], grads[i], lr, l2, eps)


def warp_epoch(const int64_t[::1] u_indptr, const int32_t[::1] u_indices, const float[::1] u_data,
               const int64_t[::1] i_indptr, const int32_t[::1] i_indices, const float[::1] i_data,
               floating[:, ::1] user_emb, floating[:, ::1] item_emb,
               floating[::1] user_bias, floating[::1] item_bias,
               double[:, ::1] user_emb_acc, double[:, ::1] item_emb_acc,
               double[::1] user_bias_acc, double[::1] item_bias_acc,
               const int64_t[::1] rel_indptr, const int32_t[::1] rel_indices,
               const int32_t[::1] pair_users, const int32_t[::1] pair_items,
               const double[::1] phi_table, double lr, double l2, double eps,
               int64_t max_trials, uint64_t seed, bint update_biases,
               int64_t[::1] trials_out, double[::1] loss_out):
    """One online pass: sample a violator per pair and take an OWA-weighted hinge step.

    Writes per-pair trial counts and losses into ``trials_out`` and
    ``loss_out``; returns the final RNG state.
    """
    cdef Py_ssize_t dim = user_emb.shape[1]
    cdef Py_ssize_t n_pairs = pair_users.shape[0]
    cdef int64_t num_items = i_indptr.shape[0] - 1
    cdef uint64_t state = seed
    cdef double *u = <double *> malloc(dim * sizeof(double))
    cdef double *vp = <double *> malloc(dim * sizeof(double))
    cdef double *vn = <double *> malloc(dim * sizeof(double))
    cdef double *du = <double *> malloc(dim * sizeof(double))
    cdef double bu, bp, bn, s_pos, s_neg, phi, c
    cdef Py_ssize_t p, k
    cdef int64_t trials, a, b, a_end, b_end, j
    cdef int32_t user, pos, neg, item, fa, fb
    cdef bint found

    if u == NULL or vp == NULL or vn == NULL or du == NULL:
        free(u); free(vp); free(vn); free(du)
        raise MemoryError()

    try:
        with nogil:
            for p in range(n_pairs):
                user = pair_users[p]
                pos = pair_items[p]
                loss_out[p] = 0.0
                trials_out[p] = 0
                if rel_indptr[user + 1] - rel_indptr[user] >= num_items:
                    continue
                represent(u_indptr, u_indices, u_data, user_emb, user_bias, user, u, &bu, dim)
                represent(i_indptr, i_indices, i_data, item_emb, item_bias, pos, vp, &bp, dim)
                s_pos = dot(u, vp, dim) + bu + bp

                trials = 0
                found = False
                while trials < max_trials:
                    item = <int32_t>(splitmix_next(&state) % <uint64_t>num_items)
                    if row_contains(rel_indptr, rel_indices, user, item):
                        continue
                    trials += 1
                    represent(i_indptr, i_indices, i_data, item_emb, item_bias, item, vn, &bn, dim)
                    s_neg = dot(u, vn, dim) + bu + bn
                    if 1.0 + s_neg > s_pos:
                        found = True
                        neg = item
                        break
                trials_out[p] = trials
                if not found:
                    continue

                phi = phi_table[(num_items - 1) // trials]
                loss_out[p] = phi * (1.0 - s_pos + s_neg)
                if phi == 0.0:
                    continue

                for k in range(dim):
                    du[k] = phi * (vn[k] - vp[k])

                # item side: merge the two sorted feature rows so shared
                # features receive one combined step
                a = i_indptr[pos]
                a_end = i_indptr[pos + 1]
                b = i_indptr[neg]
                b_end = i_indptr[neg + 1]
                while a < a_end or b < b_end:
                    if b >= b_end or (a < a_end and i_indices[a] < i_indices[b]):
                        fa = i_indices[a]
                        c = -phi * i_data[a]
                        a += 1
                    elif a >= a_end or i_indices[b] < i_indices[a]:
                        fa = i_indices[b]
                        c = phi * i_data[b]
                        b += 1
                    else:
                        fa = i_indices[a]
                        c = phi * (i_data[b] - i_data[a])
                        a += 1
                        b += 1
                    adagrad_row(item_emb, item_emb_acc, fa, u, c, lr, l2, eps, dim)
                    if update_biases:
                        adagrad_scalar(item_bias, item_bias_acc, fa, c, lr, l2, eps)

                for j in range(u_indptr[user], u_indptr[user + 1]):
                    fb = u_indices[j]
                    adagrad_row(user_emb, user_emb_acc, fb, du, u_data[j], lr, l2, eps, dim)
                    if update_biases:
                        adagrad_scalar(user_bias, user_bias_acc, fb, 0.0, lr, l2, eps)
    finally:
        free(u); free(vp); free(vn); free(du)
    return state


cdef void gather(const int64_t[::1] indptr, const int32_t[::1] indices, const float[::1] weights,
                 floating[:, ::1] emb, floating[::1] bias, const int32_t[::1] rows,
                 double[:, ::1] out, double[::1] out_bias) noexcept nogil:
    cdef Py_ssize_t n = rows.shape[0], r
    for r in range(n):
        represent(indptr, indices, weights, emb, bias, rows[r], &out[r, 0], &out_bias[r],
                  emb.shape[1])


def _touched(const int64_t[::1] indptr, const int32_t[::1] indices, rows_list):
    ptr = np.asarray(indptr)
    rows = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows_list])
    lo = ptr[rows]
    cnt = ptr[rows + 1] - lo
    offs = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(cnt.sum())
    return np.unique(np.asarray(indices)[offs]).astype(np.int32)


cdef inline Py_ssize_t slot_of(const int32_t[::1] ids, int32_t f) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = ids.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if ids[mid] < f:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline void gemm(char *ta, char *tb, int m, int n, int k, double alpha,
                      double *a, int lda, double *b, int ldb, double beta,
                      double *c, int ldc) noexcept nogil:
    dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def batch_gradients(int kind,
                    const int64_t[::1] u_indptr, const int32_t[::1] u_indices, const float[::1] u_data,
                    const int64_t[::1] i_indptr, const int32_t[::1] i_indices, const float[::1] i_data,
                    floating[:, ::1] user_emb, floating[:, ::1] item_emb,
                    floating[::1] user_bias, floating[::1] item_bias,
                    const int32_t[::1] users, const int32_t[::1] positives,
                    const int32_t[::1] candidates, const uint8_t[:, ::1] relevant,
                    int64_t num_items, int threads=1):
    """Per-pair losses and feature gradients of their sum for one shared-candidate batch.

    ``kind`` is 0 for log margin-rank, 1 for sampled cross-entropy.
    Returns ``(losses, user_ids, user_grad, user_bias_grad, item_ids,
    item_grad, item_bias_grad)``; ids are the touched feature rows, sorted.
    """
    cdef Py_ssize_t B = users.shape[0], Z = candidates.shape[0], dim = user_emb.shape[1]
    cdef double scale = <double>num_items / <double>Z

    U_arr = np.empty((B, dim)); bu_arr = np.empty(B)
    VP_arr = np.empty((B, dim)); bp_arr = np.empty(B)
    VZ_arr = np.empty((Z, dim)); bz_arr = np.empty(Z)
    cdef double[:, ::1] U = U_arr, VP = VP_arr, VZ = VZ_arr
    cdef double[::1] bu = bu_arr, bp = bp_arr, bz = bz_arr

    gS_arr = np.zeros((B, Z)); gpos_arr = np.zeros(B); loss_arr = np.zeros(B)
    cdef double[:, ::1] gS = gS_arr
    cdef double[::1] gpos = gpos_arr, losses = loss_arr

    dU_arr = np.zeros((B, dim)); dbu_arr = np.zeros(B)
    dVZ_arr = np.zeros((Z, dim)); dbz_arr = np.zeros(Z)
    cdef double[:, ::1] dU = dU_arr, dVZ = dVZ_arr
    cdef double[::1] dbu = dbu_arr, dbz = dbz_arr

    cdef Py_ssize_t b, j, k, n_active
    cdef double s_pos, s, h, acc, top, z, e, coef, g

    with nogil:
        gather(u_indptr, u_indices, u_data, user_emb, user_bias, users, U, bu)
        gather(i_indptr, i_indices, i_data, item_emb, item_bias, positives, VP, bp)
        gather(i_indptr, i_indices, i_data, item_emb, item_bias, candidates, VZ, bz)

        # row-major C = A B^T is column-major C^T = B A^T, hence the swapped operands
        if B > 0 and Z > 0:
            gemm(b"T", b"N", Z, B, dim, 1.0, &VZ[0, 0], dim, &U[0, 0], dim, 0.0, &gS[0, 0], Z)

        for b in prange(B, num_threads=threads, schedule="static"):
            s_pos = dot(&U[b, 0], &VP[b, 0], dim) + bu[b] + bp[b]
            for j in range(Z):
                gS[b, j] = gS[b, j] + bu[b] + bz[j]
            if kind == WMRB:
                acc = 0.0
                for j in range(Z):
                    h = 1.0 - s_pos + gS[b, j]
                    if relevant[b, j] == 0 and h > 0.0:
                        acc = acc + h
                acc = scale * acc
                losses[b] = log1p(acc)
                coef = scale / (1.0 + acc)
                n_active = 0
                for j in range(Z):
                    h = 1.0 - s_pos + gS[b, j]
                    if relevant[b, j] == 0 and h > 0.0:
                        gS[b, j] = coef
                        n_active = n_active + 1
                    else:
                        gS[b, j] = 0.0
                gpos[b] = -coef * n_active
            else:
                top = s_pos
                for j in range(Z):
                    if relevant[b, j] == 0 and gS[b, j] > top:
                        top = gS[b, j]
                z = exp(s_pos - top)
                for j in range(Z):
                    if relevant[b, j] == 0:
                        e = exp(gS[b, j] - top)
                        gS[b, j] = e
                        z = z + e
                    else:
                        gS[b, j] = 0.0
                losses[b] = -s_pos + top + log(z)
                for j in range(Z):
                    gS[b, j] = gS[b, j] / z
                gpos[b] = exp(s_pos - top) / z - 1.0

        if B > 0 and Z > 0:
            # dU = gS VZ and dVZ = gS^T U
            gemm(b"N", b"N", dim, B, Z, 1.0, &VZ[0, 0], dim, &gS[0, 0], Z, 0.0, &dU[0, 0], dim)
            gemm(b"N", b"T", dim, Z, B, 1.0, &U[0, 0], dim, &gS[0, 0], Z, 0.0, &dVZ[0, 0], dim)

        for b in range(B):
            g = gpos[b]
            for j in range(Z):
                g = g + gS[b, j]
                dbz[j] += gS[b, j]
            dbu[b] = g
            for k in range(dim):
                dU[b, k] += gpos[b] * VP[b, k]

    u_ids_arr = _touched(u_indptr, u_indices, [users])
    i_ids_arr = _touched(i_indptr, i_indices, [candidates, positives])
    cdef const int32_t[::1] u_ids = u_ids_arr, i_ids = i_ids_arr
    gu_arr = np.zeros((u_ids.shape[0], dim)); gub_arr = np.zeros(u_ids.shape[0])
    gi_arr = np.zeros((i_ids.shape[0], dim)); gib_arr = np.zeros(i_ids.shape[0])
    cdef double[:, ::1] gu = gu_arr, gi = gi_arr
    cdef double[::1] gub = gub_arr, gib = gib_arr
    cdef Py_ssize_t q, slot
    cdef double w

    with nogil:
        for b in range(B):
            for q in range(u_indptr[users[b]], u_indptr[users[b] + 1]):
                slot = slot_of(u_ids, u_indices[q])
                w = u_data[q]
                for k in range(dim):
                    gu[slot, k] += w * dU[b, k]
                gub[slot] += w * dbu[b]
        for j in range(Z):
            for q in range(i_indptr[candidates[j]], i_indptr[candidates[j] + 1]):
                slot = slot_of(i_ids, i_indices[q])
                w = i_data[q]
                for k in range(dim):
                    gi[slot, k] += w * dVZ[j, k]
                gib[slot] += w * dbz[j]
        for b in range(B):
            for q in range(i_indptr[positives[b]], i_indptr[positives[b] + 1]):
                slot = slot_of(i_ids, i_indices[q])
                w = i_data[q]
                for k in range(dim):
                    gi[slot, k] += w * gpos[b] * U[b, k]
                gib[slot] += w * gpos[b]

    return loss_arr, u_ids_arr, gu_arr, gub_arr, i_ids_arr, gi_arr, gib_arr
