"""Gaussian-mixture regime: affine mixture-of-experts denoising operators.

With mixture data the optimal denoiser is a posterior-weighted combination
of per-component affine maps, so every single step is a K-expert affine
mixture-of-experts operator.  Composing k steps expands to K^k effective
components whose weights are products of stagewise posterior gatings
evaluated along the partial trajectory.  Compressing such an expansion back
to K experts is a weighted clustering problem; the per-cluster weighted
least-squares fit yields both the student and a certified upper bound on
its distillation loss, split into an alignment (bias) part and an
irreducible within-cluster variance part.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .schedule import NoiseSchedule

__all__ = [
    "GaussianMixture",
    "AffineExpert",
    "PosteriorGating",
    "PathGating",
    "AggregatedGating",
    "MoeOperator",
    "CompositionExpansion",
    "NoisySampler",
    "McEstimate",
    "FitResult",
    "PropagationAudit",
    "make_circle_mixture",
    "posterior_log_weights",
    "posterior_weights",
    "optimal_mixture_denoiser",
    "single_step_moe",
    "compose_expand",
    "apply_chain",
    "fit_cluster_student",
    "choose_partition",
    "mc_distillation_loss",
    "estimate_lipschitz",
    "error_propagation_audit",
    "distill_chain",
    "write_mixture",
    "read_mixture",
    "DEFAULT_EXPANSION_CAP",
]

DEFAULT_EXPANSION_CAP = 4096
_LOG_2PI = float(np.log(2.0 * np.pi))
_RIDGE = 1e-10


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of K Gaussians with weights ``pi``, means ``mu`` and covariances ``cov``."""

    pi: np.ndarray
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        pi = np.asarray(self.pi, dtype=np.float64).reshape(-1).copy()
        mu = np.asarray(self.mu, dtype=np.float64).copy()
        cov = np.asarray(self.cov, dtype=np.float64).copy()
        K = pi.shape[0]
        if mu.ndim != 2 or mu.shape[0] != K:
            raise ValueError("mu must have shape (K, d)")
        d = mu.shape[1]
        if cov.shape != (K, d, d):
            raise ValueError("cov must have shape (K, d, d)")
        if np.any(pi <= 0.0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(float(np.sum(pi)) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        if np.max(np.abs(cov - np.transpose(cov, (0, 2, 1)))) > 1e-10:
            raise ValueError("component covariances must be symmetric within 1e-10")
        if np.min(np.linalg.eigvalsh(cov)) < -1e-10:
            raise ValueError("component covariances must be PSD within -1e-10")
        for arr in (pi, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]


def make_circle_mixture(K: int = 8, radius: float = 5.0, iso_std: float = 0.3) -> GaussianMixture:
    """Equal-weight isotropic modes uniformly spaced on a circle."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    angles = 2.0 * np.pi * np.arange(K) / K
    mu = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    cov = np.broadcast_to(iso_std**2 * np.eye(2), (K, 2, 2)).copy()
    return GaussianMixture(pi=np.full(K, 1.0 / K), mu=mu, cov=cov)


def _component_eigs(gmm: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompositions ``cov[k] = Q[k] diag(vals[k]) Q[k]^T``, clamped to PSD."""
    vals, vecs = np.linalg.eigh(gmm.cov)
    return np.maximum(vals, 0.0), vecs


def _as_batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim != 2:
        raise ValueError(f"z must be a d-vector or an (n, d) batch, got shape {z.shape}")
    return z, False


def posterior_log_weights(gmm: GaussianMixture, sched: NoiseSchedule, t: int, z) -> np.ndarray:
    """Log posterior component responsibilities at noise level ``t``.

    ``log gamma_k ∝ log pi_k + log N(z; alpha_t mu_k, alpha_t^2 cov_k + sigma_t^2 I)``,
    normalized with log-sum-exp so extreme noise levels cannot underflow.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in [1, {sched.T}], got {t}")
    z2, single = _as_batch(z)
    a, s = sched.alpha[t], sched.sigma[t]
    vals, vecs = _component_eigs(gmm)
    noisy_vals = a * a * vals + s * s  # (K, d)
    lw = np.empty((z2.shape[0], gmm.K))
    for k in range(gmm.K):
        centered = z2 - a * gmm.mu[k]
        y = centered @ vecs[k]  # rotate into the component eigenbasis
        quad = np.sum(y * y / noisy_vals[k], axis=1)
        logdet = float(np.sum(np.log(noisy_vals[k])))
        lw[:, k] = np.log(gmm.pi[k]) - 0.5 * (gmm.d * _LOG_2PI + logdet + quad)
    lw -= logsumexp(lw, axis=1, keepdims=True)
    return lw[0] if single else lw


def posterior_weights(gmm: GaussianMixture, sched: NoiseSchedule, t: int, z) -> np.ndarray:
    """Normalized posterior responsibilities ``gamma_{k,t}(z)``."""
    return np.exp(posterior_log_weights(gmm, sched, t, z))


def optimal_mixture_denoiser(gmm: GaussianMixture, sched: NoiseSchedule, t: int, z) -> np.ndarray:
    """Posterior-mean estimate of the clean sample given the noisy observation.

    Weighted sum of per-component affine estimators
    ``mu_k + alpha_t cov_k (alpha_t^2 cov_k + sigma_t^2 I)^{-1} (z - alpha_t mu_k)``.
    """
    z2, single = _as_batch(z)
    w = posterior_weights(gmm, sched, t, z2)
    a, s = sched.alpha[t], sched.sigma[t]
    vals, vecs = _component_eigs(gmm)
    out = np.zeros_like(z2)
    for k in range(gmm.K):
        gain = a * vals[k] / (a * a * vals[k] + s * s)  # (d,)
        centered = z2 - a * gmm.mu[k]
        est = gmm.mu[k] + (centered @ vecs[k]) * gain @ vecs[k].T
        out += w[:, k : k + 1] * est
    return out[0] if single else out


@dataclass(frozen=True)
class AffineExpert:
    """One affine map ``z -> A z + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64).copy()
        b = np.asarray(self.b, dtype=np.float64).reshape(-1).copy()
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
            raise ValueError("expert must have a square A and a matching b")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("expert parameters must be finite")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class PosteriorGating:
    """Gating by posterior component responsibilities at a fixed noise level."""

    gmm: GaussianMixture
    sched: NoiseSchedule
    t: int

    def weights(self, z2: np.ndarray) -> np.ndarray:
        return posterior_weights(self.gmm, self.sched, self.t, z2)


class _AffineMixture:
    """Shared evaluation of ``z -> sum_k w_k(z) (A_k z + b_k)``.

    ``weights_apply`` computes the gating once and reuses it for the output,
    which keeps nested operators (students gated by other students) linear
    in chain depth instead of exponential.
    """

    experts: tuple[AffineExpert, ...]
    gating: object

    def _stacks(self) -> tuple[np.ndarray, np.ndarray]:
        return self._A_stack, self._b_stack  # type: ignore[attr-defined]

    def _init_stacks(self) -> None:
        A = np.stack([e.A for e in self.experts])
        b = np.stack([e.b for e in self.experts])
        object.__setattr__(self, "_A_stack", A)
        object.__setattr__(self, "_b_stack", b)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].b.shape[0]

    def weights(self, z) -> np.ndarray:
        z2, single = _as_batch(z)
        w = self.gating.weights(z2)
        return w[0] if single else w

    def weights_apply(self, z2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = self.gating.weights(z2)
        A, b = self._stacks()
        out = np.einsum("nk,kij,nj->ni", w, A, z2, optimize=True) + w @ b
        return w, out

    def apply(self, z) -> np.ndarray:
        z2, single = _as_batch(z)
        _, out = self.weights_apply(z2)
        return out[0] if single else out


@dataclass(frozen=True)
class MoeOperator(_AffineMixture):
    """K-expert affine mixture-of-experts operator covering ``interval`` steps."""

    experts: tuple[AffineExpert, ...]
    gating: object
    interval: tuple[int, int]

    def __post_init__(self) -> None:
        if not self.experts:
            raise ValueError("operator must have at least one expert")
        object.__setattr__(self, "experts", tuple(self.experts))
        t1, t2 = self.interval
        if not (1 <= t1 <= t2):
            raise ValueError(f"invalid interval {self.interval}")
        object.__setattr__(self, "interval", (int(t1), int(t2)))
        self._init_stacks()


@dataclass(frozen=True)
class PathGating:
    """Weights of an expanded composition: products of stagewise gatings.

    The gating of stage j is evaluated at the output of the j-1 preceding
    FULL operators (not the selected expert path), lazily per batch.
    Component order is lexicographic in the stage index tuples with the
    first applied stage most significant.
    """

    ops: tuple

    def weights(self, z2: np.ndarray) -> np.ndarray:
        w = None
        point = z2
        for op in self.ops:
            stage_w, point = op.weights_apply(point)
            if w is None:
                w = stage_w
            else:
                w = (w[:, :, None] * stage_w[:, None, :]).reshape(z2.shape[0], -1)
        return w


@dataclass(frozen=True)
class AggregatedGating:
    """Cluster-summed gating: ``W_k(z) = sum_{c in S_k} w_c(z)``."""

    base: object
    membership: np.ndarray  # (C, K) 0/1 matrix

    def __post_init__(self) -> None:
        m = np.asarray(self.membership, dtype=np.float64).copy()
        m.setflags(write=False)
        object.__setattr__(self, "membership", m)

    def weights(self, z2: np.ndarray) -> np.ndarray:
        return self.base.weights(z2) @ self.membership


@dataclass(frozen=True)
class CompositionExpansion(_AffineMixture):
    """The K^k-component expansion of a k-step composition.

    ``experts[c]`` is the end-to-end affine map of the c-th expert tuple;
    ``gating`` multiplies the stagewise posterior weights along the partial
    trajectory.  Evaluating the expansion at any z must agree with applying
    the source operators sequentially.
    """

    experts: tuple[AffineExpert, ...]
    gating: PathGating
    interval: tuple[int, int]
    index_tuples: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "index_tuples", tuple(self.index_tuples))
        self._init_stacks()

    @property
    def ops(self) -> tuple:
        return self.gating.ops


def single_step_moe(gmm: GaussianMixture, sched: NoiseSchedule, t: int) -> MoeOperator:
    """Single deterministic update step as a K-expert affine MoE.

    Expert k has ``A_k = (alpha_{t-1} alpha_t cov_k + sigma_{t-1} sigma_t I)
    (alpha_t^2 cov_k + sigma_t^2 I)^{-1}`` and offset
    ``b_k = (alpha_{t-1} I - alpha_t A_k) mu_k``; gating is posterior.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in [1, {sched.T}], got {t}")
    a_prev, s_prev = sched.alpha[t - 1], sched.sigma[t - 1]
    a, s = sched.alpha[t], sched.sigma[t]
    vals, vecs = _component_eigs(gmm)
    experts = []
    for k in range(gmm.K):
        ratio = (a_prev * a * vals[k] + s_prev * s) / (a * a * vals[k] + s * s)
        A = (vecs[k] * ratio) @ vecs[k].T
        b = a_prev * gmm.mu[k] - a * (A @ gmm.mu[k])
        experts.append(AffineExpert(A=A, b=b))
    return MoeOperator(
        experts=tuple(experts),
        gating=PosteriorGating(gmm=gmm, sched=sched, t=t),
        interval=(t, t),
    )


def apply_chain(ops: Sequence, z) -> np.ndarray:
    """Sequential application of operators (the expansion's independent oracle)."""
    z2, single = _as_batch(z)
    for op in ops:
        z2 = op.apply(z2)
    return z2[0] if single else z2


def compose_expand(ops: Sequence, cap: int = DEFAULT_EXPANSION_CAP) -> CompositionExpansion:
    """Expand a composition of MoE operators into its product-of-experts form.

    ``ops`` are given in application order; consecutive intervals must be
    contiguous (each next operator ends where the previous one starts minus
    one).  The expansion has ``prod_k K_k`` components and is rejected when
    that exceeds ``cap``.
    """
    if not ops:
        raise ValueError("need at least one operator")
    for prev, nxt in zip(ops, ops[1:]):
        if nxt.interval[1] != prev.interval[0] - 1:
            raise ValueError(
                f"operators are not contiguous: {prev.interval} then {nxt.interval}"
            )
    total = 1
    for op in ops:
        total *= op.n_experts
    if total > cap:
        raise ValueError(
            f"expansion would have {total} components, above the cap of {cap}; "
            "chunk the composition instead"
        )
    d = ops[0].d
    experts = []
    tuples = []
    for idx in itertools.product(*(range(op.n_experts) for op in ops)):
        A_tot = np.eye(d)
        b_tot = np.zeros(d)
        for op, i in zip(ops, idx):
            e = op.experts[i]
            A_tot = e.A @ A_tot
            b_tot = e.A @ b_tot + e.b
        experts.append(AffineExpert(A=A_tot, b=b_tot))
        tuples.append(idx)
    return CompositionExpansion(
        experts=tuple(experts),
        gating=PathGating(ops=tuple(ops)),
        interval=(ops[-1].interval[0], ops[0].interval[1]),
        index_tuples=tuple(tuples),
    )


@dataclass(frozen=True)
class NoisySampler:
    """Ancestral sampler for the noisy marginal at level ``t``.

    Draws a component, a clean sample from it, then adds isotropic noise:
    ``z = alpha_t x0 + sigma_t eps``.
    """

    gmm: GaussianMixture
    sched: NoiseSchedule
    t: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        gm = self.gmm
        vals, vecs = _component_eigs(gm)
        sqrt_cov = np.einsum("kij,kj,klj->kil", vecs, np.sqrt(vals), vecs)
        comp = rng.choice(gm.K, size=n, p=gm.pi)
        x0 = gm.mu[comp] + np.einsum(
            "nij,nj->ni", sqrt_cov[comp], rng.standard_normal((n, gm.d))
        )
        a, s = self.sched.alpha[self.t], self.sched.sigma[self.t]
        return a * x0 + s * rng.standard_normal((n, gm.d))


def _as_callable(op) -> Callable[[np.ndarray], np.ndarray]:
    if callable(op) and not hasattr(op, "apply"):
        return op
    return op.apply


def _chunk_size(n_components: int) -> int:
    # keep per-chunk weight/expert tensors around a few 10^6 elements
    return min(max(64, 4_000_000 // max(n_components, 1)), 8192)


def _validate_partition(partition: Sequence[Sequence[int]], n_components: int) -> list[np.ndarray]:
    seen: set[int] = set()
    groups = []
    for group in partition:
        idx = np.asarray(sorted(int(i) for i in group), dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= n_components):
            raise ValueError("partition indices out of range")
        overlap = seen.intersection(idx.tolist())
        if overlap:
            raise ValueError(f"partition groups overlap on {sorted(overlap)}")
        seen.update(idx.tolist())
        groups.append(idx)
    if len(seen) != n_components:
        raise ValueError("partition must cover every expanded component exactly once")
    return groups


@dataclass(frozen=True)
class FitResult:
    """Clustered student plus the certified empirical loss bound.

    ``bound = bias + variance``: ``bias`` is the weighted distance of the
    fitted experts to the per-sample cluster centroids (reducible), and
    ``variance`` is the within-cluster spread of the teacher components
    (irreducible for the chosen partition).  Both are per-sample averages
    over the fitting set.
    """

    student: MoeOperator
    bound: float
    bias: float
    variance: float
    ridge_flagged: bool


def fit_cluster_student(
    expansion: CompositionExpansion,
    partition: Sequence[Sequence[int]],
    samples: np.ndarray,
) -> FitResult:
    """Fit one affine expert per cluster by weighted least squares.

    Solves ``inf_{A,b} sum_n sum_{c in S_k} w_c(z_n) ||A z_n + b - g_c(z_n)||^2``
    in closed form via the normal equations over the affine design
    ``u = [z; 1]``; the student's gating aggregates the cluster weights.
    Rank-deficient normal equations are regularized with ridge 1e-10 and
    flagged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be an (n, d) array")
    n, d = samples.shape
    C = expansion.n_experts
    groups = _validate_partition(partition, C)
    K = len(groups)
    A_stack, b_stack = expansion._stacks()

    H = np.zeros((K, d + 1, d + 1))
    R = np.zeros((K, d, d + 1))
    qfull = np.zeros(K)
    cquad = np.zeros(K)

    chunk = _chunk_size(C)
    for lo in range(0, n, chunk):
        z = samples[lo : lo + chunk]
        m = z.shape[0]
        u = np.concatenate([z, np.ones((m, 1))], axis=1)
        w = expansion.gating.weights(z)  # (m, C)
        g = np.einsum("cij,mj->mci", A_stack, z, optimize=True) + b_stack[None, :, :]
        gsq = np.sum(g * g, axis=2)  # (m, C)
        for k, idx in enumerate(groups):
            if idx.size == 0:
                continue
            wk = w[:, idx]
            Wk = np.sum(wk, axis=1)  # (m,)
            Sk = np.einsum("mc,mci->mi", wk, g[:, idx, :], optimize=True)
            H[k] += np.einsum("m,mi,mj->ij", Wk, u, u, optimize=True)
            R[k] += Sk.T @ u
            qfull[k] += float(np.sum(wk * gsq[:, idx]))
            pos = Wk > 0.0
            cquad[k] += float(np.sum(np.sum(Sk[pos] ** 2, axis=1) / Wk[pos]))

    experts = []
    flagged = False
    bias = 0.0
    variance = 0.0
    membership = np.zeros((C, K))
    for k, idx in enumerate(groups):
        membership[idx, k] = 1.0
        if idx.size == 0:
            experts.append(AffineExpert(A=np.zeros((d, d)), b=np.zeros(d)))
            continue
        Hk = H[k]
        try:
            factor = cho_factor(Hk)
        except np.linalg.LinAlgError:
            factor = cho_factor(Hk + _RIDGE * np.eye(d + 1))
            flagged = True
        M = cho_solve(factor, R[k].T).T  # (d, d+1)
        experts.append(AffineExpert(A=M[:, :d], b=M[:, d]))
        fit_term = float(np.sum(M * R[k]))
        bias += max(cquad[k] - fit_term, 0.0)
        variance += max(qfull[k] - cquad[k], 0.0)

    bias /= n
    variance /= n
    student = MoeOperator(
        experts=tuple(experts),
        gating=AggregatedGating(base=expansion.gating, membership=membership),
        interval=expansion.interval,
    )
    return FitResult(
        student=student,
        bound=bias + variance,
        bias=bias,
        variance=variance,
        ridge_flagged=flagged,
    )


def _component_masses(expansion: CompositionExpansion, samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    total = np.zeros(expansion.n_experts)
    chunk = _chunk_size(expansion.n_experts)
    for lo in range(0, n, chunk):
        total += np.sum(expansion.gating.weights(samples[lo : lo + chunk]), axis=0)
    return total / n


def _weighted_kmeans(
    points: np.ndarray, masses: np.ndarray, k: int, seed: int, iters: int = 200
) -> np.ndarray:
    """Mass-weighted Lloyd iteration with seeded kmeans++ initialization."""
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    probs = masses + 1e-15
    centers = [points[rng.choice(n, p=probs / probs.sum())]]
    for _ in range(1, k):
        dist = np.min(
            np.stack([np.sum((points - c) ** 2, axis=1) for c in centers]), axis=0
        )
        scores = probs * dist
        if scores.sum() <= 0.0:
            centers.append(points[int(np.argmax(dist))])
            continue
        centers.append(points[rng.choice(n, p=scores / scores.sum())])
    centroids = np.stack(centers)
    labels = np.zeros(n, dtype=np.intp)
    for it in range(iters):
        dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        if it > 0 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            mass = masses[mask].sum()
            if mass > 0.0:
                centroids[j] = (masses[mask, None] * points[mask]).sum(0) / mass
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(np.min(dists, axis=1)))
                centroids[j] = points[far]
    return labels


def choose_partition(
    expansion: CompositionExpansion,
    samples: np.ndarray,
    method: str = "greedy_affine",
    n_clusters: int | None = None,
    seed: int = 0,
) -> list[list[int]]:
    """Group the expanded components into at most ``n_clusters`` clusters.

    ``greedy_affine`` runs mass-weighted k-means on the flattened (A, b)
    parameters, with component masses measured on the provided samples.
    ``exhaustive`` enumerates every partition into at most ``n_clusters``
    groups (guarded to <= 9 components and <= 3 clusters) and returns the
    bound minimizer.
    """
    samples = np.asarray(samples, dtype=np.float64)
    C = expansion.n_experts
    if n_clusters is None:
        n_clusters = expansion.ops[0].n_experts
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if C <= n_clusters:
        return [[c] for c in range(C)]
    if n_clusters == 1:
        return [list(range(C))]

    if method == "greedy_affine":
        A_stack, b_stack = expansion._stacks()
        feats = np.concatenate(
            [A_stack.reshape(C, -1), b_stack.reshape(C, -1)], axis=1
        )
        masses = _component_masses(expansion, samples)
        labels = _weighted_kmeans(feats, masses, n_clusters, seed)
        groups = [np.nonzero(labels == j)[0].tolist() for j in range(n_clusters)]
        groups = [g for g in groups if g]
        groups.sort(key=lambda g: g[0])
        return groups

    if method == "exhaustive":
        if C > 9 or n_clusters > 3:
            raise ValueError(
                "exhaustive partition search is guarded to <= 9 components "
                "and <= 3 clusters"
            )
        return _exhaustive_partition(expansion, samples, n_clusters)

    raise ValueError(f"unknown partition method {method!r}")


def _partition_moments(expansion: CompositionExpansion, samples: np.ndarray):
    """Per-component normal-equation moments (additive over cluster members)."""
    n, d = samples.shape
    C = expansion.n_experts
    A_stack, b_stack = expansion._stacks()
    H = np.zeros((C, d + 1, d + 1))
    R = np.zeros((C, d, d + 1))
    q = np.zeros(C)
    chunk = _chunk_size(C)
    for lo in range(0, n, chunk):
        z = samples[lo : lo + chunk]
        m = z.shape[0]
        u = np.concatenate([z, np.ones((m, 1))], axis=1)
        w = expansion.gating.weights(z)
        g = np.einsum("cij,mj->mci", A_stack, z, optimize=True) + b_stack[None, :, :]
        H += np.einsum("mc,mi,mj->cij", w, u, u, optimize=True)
        R += np.einsum("mc,mci,mj->cij", w, g, u, optimize=True)
        q += np.einsum("mc,mc->c", w, np.sum(g * g, axis=2))
    return H, R, q


def _restricted_partitions(n: int, max_blocks: int):
    """All set partitions of range(n) into at most ``max_blocks`` blocks."""

    def rec(i: int, blocks: list[list[int]]):
        if i == n:
            yield [list(b) for b in blocks]
            return
        for b in blocks:
            b.append(i)
            yield from rec(i + 1, blocks)
            b.pop()
        if len(blocks) < max_blocks:
            blocks.append([i])
            yield from rec(i + 1, blocks)
            blocks.pop()

    yield from rec(0, [])


def _exhaustive_partition(
    expansion: CompositionExpansion, samples: np.ndarray, n_clusters: int
) -> list[list[int]]:
    H, R, q = _partition_moments(expansion, samples)
    d = samples.shape[1]
    best: list[list[int]] | None = None
    best_obj = np.inf
    for partition in _restricted_partitions(expansion.n_experts, n_clusters):
        obj = 0.0
        for group in partition:
            Hk = H[group].sum(axis=0)
            Rk = R[group].sum(axis=0)
            qk = q[group].sum()
            try:
                factor = cho_factor(Hk)
            except np.linalg.LinAlgError:
                factor = cho_factor(Hk + _RIDGE * np.eye(d + 1))
            M = cho_solve(factor, Rk.T).T
            obj += qk - float(np.sum(M * Rk))
        if obj < best_obj:
            best_obj = obj
            best = [sorted(g) for g in partition]
    assert best is not None
    best.sort(key=lambda g: g[0])
    return best


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n: int


def _mc_mean(values_fn, sampler: NoisySampler, n: int, rng: np.random.Generator, chunk: int) -> McEstimate:
    total = 0.0
    total_sq = 0.0
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        vals = values_fn(sampler.sample(m, rng))
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
    mean = total / n
    var = max(total_sq - n * mean * mean, 0.0) / (n - 1)
    return McEstimate(mean=mean, stderr=float(np.sqrt(var / n)), n=n)


def mc_distillation_loss(
    student,
    target,
    sampler: NoisySampler,
    n: int,
    seed: int = 0,
    chunk: int | None = None,
) -> McEstimate:
    """Monte-Carlo mean and standard error of ``||student(z) - target(z)||^2``."""
    if n < 2:
        raise ValueError("need at least 2 samples for a standard error")
    f_st = _as_callable(student)
    f_t = _as_callable(target)
    rng = np.random.default_rng(seed)
    if chunk is not None:
        size = chunk
    else:
        widest = max(
            getattr(student, "n_experts", 1), getattr(target, "n_experts", 1)
        )
        size = _chunk_size(widest)

    def sq_dev(z: np.ndarray) -> np.ndarray:
        diff = f_st(z) - f_t(z)
        return np.sum(diff * diff, axis=1)

    return _mc_mean(sq_dev, sampler, n, rng, size)


def estimate_lipschitz(
    op,
    sampler: NoisySampler,
    n_pairs: int,
    scale: float = 1e-3,
    seed: int = 0,
) -> float:
    """Empirical lower estimate of the Lipschitz constant from perturbed pairs."""
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    f = _as_callable(op)
    rng = np.random.default_rng(seed)
    z = sampler.sample(n_pairs, rng)
    delta = scale * rng.standard_normal(z.shape)
    num = np.linalg.norm(f(z + delta) - f(z), axis=1)
    den = np.linalg.norm(delta, axis=1)
    return float(np.max(num / den))


@dataclass(frozen=True)
class PropagationAudit:
    """Monte-Carlo audit of the two-stage error-propagation inequality.

    ``final <= 2*merge + 4*shift + 4*lipschitz^2*stage1`` up to three
    combined standard errors.  ``lipschitz`` is an empirical lower estimate
    of the second-stage teacher's constant, so the audited right-hand side
    may be tighter than the analytic one.
    """

    final: McEstimate
    merge: McEstimate
    shift: McEstimate
    stage1: McEstimate
    lipschitz: float
    rhs: float
    combined_stderr: float

    @property
    def holds(self) -> bool:
        return self.final.mean <= self.rhs + 3.0 * self.combined_stderr


def error_propagation_audit(
    stage1,
    stage2,
    merged,
    teacher_ops: Sequence,
    sampler: NoisySampler,
    n: int,
    seed: int = 0,
    lipschitz_pairs: int = 2048,
    lipschitz_scale: float = 1e-3,
) -> PropagationAudit:
    """Estimate every term of the two-stage propagation bound on shared samples.

    ``teacher_ops`` is the full single-step chain in application order;
    it is split at ``stage1.interval`` into the two stagewise teachers.
    """
    ops1 = [op for op in teacher_ops if op.interval[0] >= stage1.interval[0]]
    ops2 = [op for op in teacher_ops if op.interval[0] < stage1.interval[0]]
    if not ops1 or not ops2:
        raise ValueError("teacher_ops must cover both stages")
    if (ops1[-1].interval[0], ops1[0].interval[1]) != stage1.interval:
        raise ValueError("stage1 interval does not match the teacher chain split")
    if (ops2[-1].interval[0], ops2[0].interval[1]) != stage2.interval:
        raise ValueError("stage2 interval does not match the teacher chain split")
    if merged.interval != (stage2.interval[0], stage1.interval[1]):
        raise ValueError("merged operator must cover both stages")

    rng = np.random.default_rng(seed)
    chunk = _chunk_size(max(getattr(merged, "n_experts", 1), 64))
    acc = np.zeros((4, 2))  # rows: final, merge, shift, stage1; cols: sum, sum of squares

    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        z = sampler.sample(m, rng)
        y_student = stage1.apply(z)
        y_teacher = apply_chain(ops1, z)
        composed = stage2.apply(y_student)
        teacher_full = apply_chain(ops2, y_teacher)
        merged_out = merged.apply(z)
        shift_ref = apply_chain(ops2, y_student)

        for row, diff in enumerate(
            (
                merged_out - teacher_full,
                merged_out - composed,
                composed - shift_ref,
                y_student - y_teacher,
            )
        ):
            sq = np.sum(diff * diff, axis=1)
            acc[row, 0] += float(np.sum(sq))
            acc[row, 1] += float(np.sum(sq * sq))

    def finish(row: int) -> McEstimate:
        mean = acc[row, 0] / n
        var = max(acc[row, 1] - n * mean * mean, 0.0) / (n - 1)
        return McEstimate(mean=mean, stderr=float(np.sqrt(var / n)), n=n)

    final, merge_err, shift, stage1_err = (finish(r) for r in range(4))

    z_lip = sampler.sample(lipschitz_pairs, rng)
    y_lip = stage1.apply(z_lip)
    delta = lipschitz_scale * rng.standard_normal(y_lip.shape)
    num = np.linalg.norm(
        apply_chain(ops2, y_lip + delta) - apply_chain(ops2, y_lip), axis=1
    )
    lip = float(np.max(num / np.linalg.norm(delta, axis=1)))

    rhs = 2.0 * merge_err.mean + 4.0 * shift.mean + 4.0 * lip * lip * stage1_err.mean
    combined = float(
        np.sqrt(
            final.stderr**2
            + (2.0 * merge_err.stderr) ** 2
            + (4.0 * shift.stderr) ** 2
            + (4.0 * lip * lip * stage1_err.stderr) ** 2
        )
    )
    return PropagationAudit(
        final=final,
        merge=merge_err,
        shift=shift,
        stage1=stage1_err,
        lipschitz=lip,
        rhs=rhs,
        combined_stderr=combined,
    )


def distill_chain(
    gmm: GaussianMixture,
    sched: NoiseSchedule,
    t_hi: int,
    t_lo: int,
    n_fit: int = 8192,
    seed: int = 0,
    n_clusters: int | None = None,
    method: str = "greedy_affine",
) -> MoeOperator:
    """Compress the teacher steps ``t_hi ... t_lo`` into one clustered student.

    Extends one step at a time: compose the current student with the next
    teacher step (a K*K expansion), cluster, refit.  Keeps the component
    count bounded regardless of horizon, which is what makes long-horizon
    stage students tractable.
    """
    if not 1 <= t_lo <= t_hi <= sched.T:
        raise ValueError(f"invalid step range ({t_lo}, {t_hi}) for T={sched.T}")
    K = gmm.K if n_clusters is None else n_clusters
    sampler = NoisySampler(gmm=gmm, sched=sched, t=t_hi)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    current = single_step_moe(gmm, sched, t_hi)
    for step, t in enumerate(range(t_hi - 1, t_lo - 1, -1)):
        expansion = compose_expand([current, single_step_moe(gmm, sched, t)])
        samples = sampler.sample(n_fit, rng)
        partition = choose_partition(
            expansion, samples, method=method, n_clusters=K, seed=seed + 7919 * (step + 1)
        )
        current = fit_cluster_student(expansion, partition, samples).student
    return current


def write_mixture(gmm: GaussianMixture, path: str | Path) -> None:
    """Structured-text mixture file: K, d, pi row, then per-component mu and Lambda block."""
    lines = [f"K {gmm.K}", f"d {gmm.d}"]
    lines.append("pi " + " ".join(f"{p:.17g}" for p in gmm.pi))
    for k in range(gmm.K):
        lines.append(f"component {k + 1}")
        lines.append("mu " + " ".join(f"{v:.17g}" for v in gmm.mu[k]))
        for row in gmm.cov[k]:
            lines.append("Lambda " + " ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_mixture(path: str | Path) -> GaussianMixture:
    """Parse the mixture file format written by :func:`write_mixture`."""
    K = d = None
    pi = None
    mu_rows: list[list[float]] = []
    cov_rows: list[list[list[float]]] = []
    for raw in Path(path).read_text(encoding="ascii").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key == "K":
            K = int(rest)
        elif key == "d":
            d = int(rest)
        elif key == "pi":
            pi = [float(v) for v in rest.split()]
        elif key == "component":
            cov_rows.append([])
        elif key == "mu":
            mu_rows.append([float(v) for v in rest.split()])
        elif key == "Lambda":
            if not cov_rows:
                raise ValueError("Lambda row before any component")
            cov_rows[-1].append([float(v) for v in rest.split()])
        else:
            raise ValueError(f"unrecognized mixture file line: {raw!r}")
    if K is None or d is None or pi is None:
        raise ValueError("mixture file must declare K, d and pi")
    if len(mu_rows) != K or len(cov_rows) != K:
        raise ValueError(f"expected {K} components, got {len(mu_rows)} mu rows")
    return GaussianMixture(
        pi=np.array(pi), mu=np.array(mu_rows), cov=np.array(cov_rows)
    )
