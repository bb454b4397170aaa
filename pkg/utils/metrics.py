""" Distance families, kernel MMD, similarity and rank statistics """
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist, pdist
from scipy.stats import spearmanr
from sklearn.metrics.pairwise import cosine_similarity

ZERO_NORM = 1e-12


# region loss families (torch, differentiable)
def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """ 1 - cos(u, v); a zero-norm vector is at distance 1 """
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu < ZERO_NORM).any()) or bool((nv < ZERO_NORM).any()):
        logging.warning("[LOSS] zero-norm vector under cosine distance; using distance 1")
        safe = (nu >= ZERO_NORM) & (nv >= ZERO_NORM)
        cos = (u * v).sum(-1) / (nu * nv).clamp_min(ZERO_NORM)
        dist = torch.where(safe, 1.0 - cos, torch.ones_like(cos))
        return dist.mean()
    return (1.0 - (u * v).sum(-1) / (nu * nv)).mean()


def l1_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (u - v).abs().mean()


def l2_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return ((u - v) ** 2).mean()


def kl_distance(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """ KL(softmax(p) || softmax(q)); raw noise vectors are softmax-normalized first """
    log_p = F.log_softmax(p_logits, dim=-1)
    log_q = F.log_softmax(q_logits, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def js_distance(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    log_p = F.log_softmax(p_logits, dim=-1)
    log_q = F.log_softmax(q_logits, dim=-1)
    log_m = torch.logsumexp(torch.stack([log_p, log_q]), dim=0) - math.log(2.0)
    kl_pm = (log_p.exp() * (log_p - log_m)).sum(-1)
    kl_qm = (log_q.exp() * (log_q - log_m)).sum(-1)
    return (0.5 * kl_pm + 0.5 * kl_qm).mean()


DISTANCES = {
    "cosine": cosine_distance,
    "l1": l1_distance,
    "l2": l2_distance,
    "kl": kl_distance,
    "js": js_distance,
}


def distance(metric: str, reference: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
    try:
        fn = DISTANCES[metric]
    except KeyError:
        raise ValueError(f"unknown distance metric {metric!r}; choose from {sorted(DISTANCES)}") from None
    return fn(reference, other)
# endregion


# region MMD (numpy)
def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """ Median pairwise Euclidean distance of the pooled sample; 1.0 when degenerate """
    pooled = np.concatenate([a, b], axis=0)
    d = pdist(pooled, "euclidean")
    d = d[d > 0]
    if d.size == 0:
        logging.warning("[MMD] all points identical; falling back to bandwidth 1.0")
        return 1.0
    return float(np.median(d))


def mmd_estimate(a, b, bandwidth=None, unbiased: bool = True, clamp: bool = True) -> float:
    """
    Squared MMD with an RBF kernel k(x, y) = exp(-|x - y|^2 / (2 bw^2)).
    The unbiased form drops the within-sample diagonals; reported values are clamped at 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd_estimate needs at least 2 points in each sample")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth is None or bandwidth == "median":
        bandwidth = median_bandwidth(a, b)
    if not bandwidth > 0:
        logging.warning(f"[MMD] degenerate bandwidth {bandwidth}; falling back to 1.0")
        bandwidth = 1.0
    gamma = 1.0 / (2.0 * bandwidth ** 2)
    k_aa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    k_bb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    k_ab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = len(a), len(b)
    if unbiased:
        np.fill_diagonal(k_aa, 0.0)
        np.fill_diagonal(k_bb, 0.0)
        term_a = math.fsum(k_aa.ravel()) / (m * (m - 1))
        term_b = math.fsum(k_bb.ravel()) / (n * (n - 1))
    else:
        term_a = math.fsum(k_aa.ravel()) / (m * m)
        term_b = math.fsum(k_bb.ravel()) / (n * n)
    # fsum is exactly rounded, so swapping a and b gives the identical value
    value = term_a + term_b - 2.0 * math.fsum(k_ab.ravel()) / (m * n)
    return max(value, 0.0) if clamp else value
# endregion


def centered_cosine(samples, reference, center) -> np.ndarray:
    """ Cosine similarity of (sample - center) with (reference - center), per sample """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64)) - center
    r = (np.asarray(reference, dtype=np.float64) - center)[None, :]
    return cosine_similarity(x, r)[:, 0]


def rank_correlation(x, y) -> float:
    """ Spearman rank correlation """
    rho = spearmanr(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)).correlation
    return float(rho)
