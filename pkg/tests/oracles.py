"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, brute force, high precision)
and shares no code with the package internals it checks.
"""

import math

import mpmath
import numpy as np


def jacobi_eig(A, sweeps=100, tol=1e-15):
    """Cyclic Jacobi eigensolver for symmetric matrices; returns descending
    eigenvalues and the orthogonal eigenvector matrix."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    norm = np.linalg.norm(A)
    for _ in range(sweeps):
        off = math.sqrt(max(0.0, np.sum(A * A) - np.sum(np.diag(A) ** 2)))
        if off <= tol * max(norm, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # avoid overflow in theta**2
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    values = np.diag(A).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], V[:, order]


def eig_2x2(a, b, c):
    """Closed-form eigenvalues of [[a, b], [b, c]] via the quadratic formula,
    descending."""
    mean = 0.5 * (a + c)
    disc = math.sqrt(max(0.0, (0.5 * (a - c)) ** 2 + b * b))
    return mean + disc, mean - disc


def expm_taylor_squaring(A, scaling=12, terms=30):
    """Matrix exponential by scaling-and-squaring with a Taylor series."""
    A = np.array(A, dtype=np.float64)
    B = A / (2.0 ** scaling)
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms + 1):
        term = term @ B / k
        out = out + term
    for _ in range(scaling):
        out = out @ out
    return out


def mp_matrix_log(A, dps=50):
    """High-precision matrix logarithm of an SPD matrix via mpmath."""
    with mpmath.workdps(dps):
        E, Q = mpmath.eigsy(mpmath.matrix(np.asarray(A, dtype=np.float64).tolist()))
        n = A.shape[0]
        D = mpmath.diag([mpmath.log(E[i]) for i in range(n)])
        L = Q * D * Q.T
        return np.array([[float(L[i, j]) for j in range(n)] for i in range(n)])


def naive_covariance(epoch):
    """Two-pass, double-loop sample covariance with divisor L."""
    epoch = np.asarray(epoch, dtype=np.float64)
    n, L = epoch.shape
    mu = [sum(epoch[i]) / L for i in range(n)]
    cov = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(L):
                acc += (epoch[i, k] - mu[i]) * (epoch[j, k] - mu[j])
            cov[i, j] = acc / L
    return cov


def naive_dft_magnitude(frame):
    """O(n^2) DFT magnitude of a real frame (bins 0..n//2)."""
    n = len(frame)
    bins = n // 2 + 1
    out = np.zeros(bins)
    for k in range(bins):
        re = sum(frame[t] * math.cos(-2.0 * math.pi * k * t / n) for t in range(n))
        im = sum(frame[t] * math.sin(-2.0 * math.pi * k * t / n) for t in range(n))
        out[k] = math.hypot(re, im)
    return out


def reference_gru(w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h, inputs):
    """Step-by-step GRU recursion written independently."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    m = b_z.shape[0]
    h = np.zeros(m)
    hiddens = []
    for x in inputs:
        z = sig(w_z @ x + u_z @ h + b_z)
        r = sig(w_r @ x + u_r @ h + b_r)
        cand = np.tanh(w_h @ x + u_h @ (r * h) + b_h)
        h = (1.0 - z) * h + z * cand
        hiddens.append(h.copy())
    return h, np.array(hiddens) if hiddens else np.zeros((0, m))


def cosine_topk_adjacency(vectors, tau_top):
    """Brute-force cosine similarity + per-row top-k + union symmetrization."""
    n = len(vectors)
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ni = math.sqrt(sum(v * v for v in vectors[i]))
            nj = math.sqrt(sum(v * v for v in vectors[j]))
            if ni == 0.0 or nj == 0.0:
                sim[i, j] = 0.0
            else:
                sim[i, j] = sum(a * b for a, b in zip(vectors[i], vectors[j])) / (ni * nj)
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        others = sorted((j for j in range(n) if j != i),
                        key=lambda j: (-sim[i, j], j))
        for j in others[:tau_top]:
            keep[i, j] = True
    keep = keep | keep.T
    out = np.where(keep, sim, 0.0)
    np.fill_diagonal(out, 0.0)
    return out


def naive_message_passing(node_hidden, edge_hidden, adjacency, w_edge, b_edge,
                          w_node, b_node):
    """Double-loop message passing matching the documented message form."""
    n, m = node_hidden.shape
    agg = np.zeros((n, m))
    for i in range(n):
        for j in range(n):
            if adjacency[i, j] == 0.0:
                continue
            gate = np.maximum(w_edge @ edge_hidden[i, j] + b_edge, 0.0)
            agg[i] += adjacency[i, j] * (gate * node_hidden[j])
    u = np.zeros((n, m))
    for i in range(n):
        u[i] = np.maximum(w_node @ np.concatenate([node_hidden[i], agg[i]]) + b_node, 0.0)
    return u, u.mean(axis=0)


def pairwise_auroc(scores, labels):
    """O(n^2) pairwise AUROC: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return float("nan")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def frechet_mean_gd(weights, mats, steps=2000, lr=0.25):
    """Gradient-descent minimizer of sum_j w_j d_LE(P, V_j)^2 over symmetric
    log-domain coordinates, started from zero (independent of the closed
    form). Returns the objective value at the minimizer."""
    logs = []
    for V in mats:
        vals, vecs = np.linalg.eigh(V)
        logs.append(vecs @ np.diag(np.log(vals)) @ vecs.T)
    logs = np.array(logs)
    weights = np.asarray(weights)
    X = np.zeros_like(logs[0])
    for _ in range(steps):
        grad = 2.0 * np.sum(weights[:, None, None] * (X[None] - logs), axis=0)
        X = X - lr * grad
    return float(np.sum(weights * np.array([np.sum((X - L) ** 2) for L in logs]))), X


def frechet_objective(weights, mats, P):
    """Objective sum_j w_j d_LE(P, V_j)^2 evaluated at SPD P."""
    vals, vecs = np.linalg.eigh(P)
    logP = vecs @ np.diag(np.log(vals)) @ vecs.T
    total = 0.0
    for w, V in zip(weights, mats):
        v2, u2 = np.linalg.eigh(V)
        logV = u2 @ np.diag(np.log(v2)) @ u2.T
        total += w * np.sum((logP - logV) ** 2)
    return float(total)


def reference_softmax(row, temperature=1.0):
    """High-precision softmax via mpmath."""
    with mpmath.workdps(60):
        vals = [mpmath.exp(mpmath.mpf(float(v)) / temperature) for v in row]
        total = mpmath.fsum(vals)
        return np.array([float(v / total) for v in vals])


def reference_info_nce(g_proj, u_proj, kappa):
    """InfoNCE over cosine similarities, written independently."""
    B = len(g_proj)
    total = 0.0
    for i in range(B):
        gi = np.asarray(g_proj[i], dtype=np.float64)
        gi = gi / np.linalg.norm(gi)
        sims = []
        for j in range(B):
            uj = np.asarray(u_proj[j], dtype=np.float64)
            uj = uj / np.linalg.norm(uj)
            sims.append(float(gi @ uj) / kappa)
        log_denom = math.log(sum(math.exp(s - max(sims)) for s in sims)) + max(sims)
        total += sims[i] - log_denom
    return -total / B


def naive_conv2d(x, k):
    """Sliding-window valid convolution, quadruple loop."""
    B, C, H, W = x.shape
    Co, Ci, kh, kw = k.shape
    out = np.zeros((B, Co, H - kh + 1, W - kw + 1))
    for b in range(B):
        for o in range(Co):
            for y in range(H - kh + 1):
                for z in range(W - kw + 1):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += x[b, c, y + i, z + j] * k[o, c, i, j]
                    out[b, o, y, z] = acc
    return out


def random_spd(rng, n, cond=10.0):
    """Random SPD with the given condition number bound."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lo = 1.0 / math.sqrt(cond)
    hi = math.sqrt(cond)
    values = np.exp(rng.uniform(math.log(lo), math.log(hi), n))
    return 0.5 * ((q * values) @ q.T + ((q * values) @ q.T).T)
