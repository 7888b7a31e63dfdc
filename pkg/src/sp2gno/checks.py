"""Self-validating diagnostics: each check compares against an independent oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import anchor_count, lipschitz_embed, select_anchors
from .graph import Graph, build_knn_graph, graph_from_edges, normalized_laplacian
from .model import Bundle, ModelConfig, forward, init_parameters
from .spectral import dense_smallest, lobpcg_smallest, truncation_error_bound
from .training import relative_l2_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} (limit {self.limit:.1e}){extra}"


def random_knn_graph(rng: np.random.Generator, n: int, k: int | None = None) -> Graph:
    k = int(rng.integers(3, 11)) if k is None else k
    return build_knn_graph(rng.uniform(size=(n, 2)), min(k, n - 1))


# ------------------------------------------------------------------ truncation bound

def truncation_errors(graph: Graph, g: np.ndarray, x: np.ndarray):
    """Relative error of the rank-``m`` filter for every ``m`` in 1..N.

    Uses the full dense eigenbasis: ``y = Q g Q^T x`` against
    ``y_m = Q_m g_m Q_m^T x``. Returns ``(errors, bounds, absolute_errors)``.
    """
    lap = normalized_laplacian(graph).toarray()
    _, q = np.linalg.eigh(lap)
    coeff = q.T @ x
    filtered = g[:, None] * coeff
    y = q @ filtered
    n = len(g)
    abs_err = np.empty(n)
    for m in range(1, n + 1):
        abs_err[m - 1] = np.linalg.norm(y - q[:, :m] @ filtered[:m])
    errors = abs_err / np.linalg.norm(y)
    bounds = np.array([truncation_error_bound(g, m) for m in range(1, n + 1)])
    return errors, bounds, abs_err


def lemma1_suite(n_graphs: int = 50, seed: int = 0, n_min: int = 20, n_max: int = 200,
                 channels: int = 8, m_values=None) -> list[CheckResult]:
    """Random kNN graphs, filters ``g ~ U(-1, 1)``, Gaussian features.

    Reports the bound as stated (relative to ``||y||``) and the form that
    holds for every input (relative to ``max|g| * ||x||``).
    """
    rng = np.random.default_rng(seed)
    violations = 0
    strict_violations = 0
    worst = 0.0
    checked = 0
    for _ in range(n_graphs):
        n = int(rng.integers(n_min, n_max + 1))
        graph = random_knn_graph(rng, n)
        g = rng.uniform(-1.0, 1.0, n)
        x = rng.standard_normal((n, channels))
        errors, bounds, abs_err = truncation_errors(graph, g, x)
        ms = np.arange(1, n + 1) if m_values is None else np.asarray(
            [m for m in m_values if 1 <= m <= n])
        e, b = errors[ms - 1], bounds[ms - 1]
        tol = 1e-12
        violations += int(np.sum(e > b + tol))
        worst = max(worst, float(np.max(e - b)))
        scale = np.abs(g).max() * np.linalg.norm(x)
        strict_violations += int(np.sum(abs_err[ms - 1] > b * scale * (1 + tol) + tol))
        checked += len(ms)
    return [
        CheckResult("lemma1 bound (relative to ||y||)", violations == 0, float(violations), 0,
                    f"{checked} (graph, m) pairs, max error - bound {worst:.3g}"),
        CheckResult("lemma1 bound (relative to max|g| ||x||)", strict_violations == 0,
                    float(strict_violations), 0, f"{checked} pairs"),
    ]


def lemma1_full_basis(n: int = 64, seed: int = 0) -> CheckResult:
    """``m = N``: bound and truncation error are both exactly zero."""
    rng = np.random.default_rng(seed)
    graph = random_knn_graph(rng, n, 6)
    g = rng.uniform(-1, 1, n)
    errors, bounds, _ = truncation_errors(graph, g, rng.standard_normal((n, 4)))
    value = max(abs(errors[-1]), abs(bounds[-1]))
    return CheckResult("lemma1 at m = N", value == 0.0, value, 0.0,
                       f"bound {bounds[-1]:.1e}, error {errors[-1]:.1e}")


# ------------------------------------------------------------------ eigensolver

def eigensolver_suite(n_graphs: int = 20, seed: int = 0, n_max: int = 200, m_max: int = 16,
                      tol: float = 1e-10, gap: float = 1e-6) -> list[CheckResult]:
    """Iterative LOBPCG (dense fallback disabled) against ``numpy.linalg.eigh``.

    Eigenvector errors are measured only for pairs whose eigenvalue is
    separated from its neighbours by at least ``gap``.
    """
    rng = np.random.default_rng(seed)
    val_err = vec_err = res_max = 0.0
    fallbacks = 0
    for _ in range(n_graphs):
        n = int(rng.integers(20, n_max + 1))
        m = int(rng.integers(1, min(m_max, n - 1) + 1))
        lap = normalized_laplacian(random_knn_graph(rng, n))
        basis = lobpcg_smallest(lap, m, tol=tol, seed=int(rng.integers(1 << 31)),
                                dense_threshold=0)
        fallbacks += basis.used_fallback
        w_full = np.linalg.eigvalsh(lap.toarray())
        w_ref, v_ref = dense_smallest(lap, m)
        val_err = max(val_err, float(np.abs(basis.eigenvalues - w_ref).max()))
        res_max = max(res_max, float(basis.residuals.max()))
        for i in range(m):
            left = w_full[i] - w_full[i - 1] if i > 0 else np.inf
            right = w_full[i + 1] - w_full[i]
            if min(left, right) < gap:
                continue
            vec_err = max(vec_err, float(np.linalg.norm(basis.eigenvectors[:, i] - v_ref[:, i])))
    return [
        CheckResult("eigenvalues vs dense", val_err <= 1e-8, val_err, 1e-8),
        CheckResult("eigenvectors vs dense", vec_err <= 1e-6, vec_err, 1e-6),
        CheckResult("eigenpair residuals", res_max <= 1e-8, res_max, 1e-8),
        CheckResult("iterative path used", fallbacks == 0, float(fallbacks), 0,
                    "dense fallbacks taken"),
    ]


# ------------------------------------------------------------------ embedding

def floyd_warshall(graph: Graph) -> np.ndarray:
    """All-pairs hop counts; unreachable pairs get ``N``."""
    n = graph.n_nodes
    dist = np.full((n, n), np.inf)
    dist[graph.rows, graph.cols] = 1.0
    np.fill_diagonal(dist, 0.0)
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    dist[np.isinf(dist)] = n
    return dist.astype(np.int64)


def embedding_suite(n_graphs: int = 20, seed: int = 0, n_max: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for t in range(n_graphs):
        n = int(rng.integers(10, n_max + 1))
        if t == 0:
            # two separate paths: nodes of one cannot reach anchors in the other
            half = n // 2
            edges = [(i, i + 1) for i in range(half - 1)]
            edges += [(i, i + 1) for i in range(half, n - 1)]
            graph = graph_from_edges(rng.uniform(size=(n, 2)), edges)
        else:
            graph = random_knn_graph(rng, n, int(rng.integers(1, 6)))
        anchors = select_anchors(graph, int(rng.integers(1, n + 1)), int(rng.integers(1 << 31)))
        emb = lipschitz_embed(graph, anchors)
        mismatches += int(np.sum(emb.distances != floyd_warshall(graph)[:, anchors]))
    return [CheckResult("embedding vs Floyd-Warshall", mismatches == 0, float(mismatches), 0,
                        f"{n_graphs} graphs, one disconnected")]


# ------------------------------------------------------------------ gradients

def tiny_instance(seed: int = 0, n: int = 12, width: int = 4, m: int = 3, n_blocks: int = 2,
                  n_anchors: int = 3, k: int = 4):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    graph = build_knn_graph(coords, k)
    basis = lobpcg_smallest(normalized_laplacian(graph), m)
    emb = lipschitz_embed(graph, select_anchors(graph, n_anchors, seed))
    config = ModelConfig(d_a=1, d_u=1, dim=2, width=width, n_blocks=n_blocks, m=m,
                         n_anchors=n_anchors)
    params = init_parameters(config, seed)
    x = np.concatenate([rng.standard_normal((n, 1)), coords], axis=1)
    truth = rng.standard_normal((n, 1))
    return params, Bundle(graph, basis, emb), x, truth


def model_gradcheck(seed: int = 0, eps: float = 1e-6, limit: float = 1e-4,
                    perturb: float = 0.0) -> list[CheckResult]:
    """Every parameter tensor: autodiff vs central differences of the relative-L2 loss.

    The error per tensor is ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||)``.
    ``perturb`` adds a constant to each autodiff gradient (negative control).
    """
    params, bundle, x, truth = tiny_instance(seed)

    def loss_value() -> float:
        return relative_l2_loss(forward(params, bundle, x), truth).item()

    params.zero_grad()
    T.backward(relative_l2_loss(forward(params, bundle, x), truth))
    results = []
    for name, p in params.named_parameters():
        analytic = p.grad + perturb
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            down = loss_value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        err = float(np.linalg.norm(analytic - numeric) / scale) if scale > 0 else 0.0
        results.append(CheckResult(f"gradient {name}", err <= limit, err, limit))
    return results


def _cloud_bundle(rng: np.random.Generator, n: int, k: int, m: int, n_anchors: int, seed: int):
    coords = rng.uniform(size=(n, 2))
    graph = build_knn_graph(coords, k)
    basis = lobpcg_smallest(normalized_laplacian(graph), m)
    return coords, Bundle(graph, basis, lipschitz_embed(graph, select_anchors(graph, n_anchors,
                                                                              seed)))


def permutation_check(seed: int = 0, n: int = 30, trials: int = 5) -> CheckResult:
    """Forward on a relabelled bundle equals the relabelled output, bit for bit."""
    rng = np.random.default_rng(seed)
    n_anchors = anchor_count(n)
    coords, bundle = _cloud_bundle(rng, n, 5, 6, n_anchors, seed)
    config = ModelConfig(d_a=1, d_u=1, dim=2, width=8, n_blocks=2, m=6, n_anchors=n_anchors)
    params = init_parameters(config, seed)
    x = np.concatenate([rng.standard_normal((n, 1)), coords], axis=1)
    out = forward(params, bundle, x).data
    worst = 0.0
    for _ in range(trials):
        perm = rng.permutation(n)
        moved = forward(params, bundle.permuted(perm), x[perm]).data
        worst = max(worst, float(np.abs(moved - out[perm]).max()))
    return CheckResult(f"permutation equivariance (N = {n})", worst == 0.0, worst, 0.0,
                       f"{trials} random relabellings")


def contract_checks(seed: int = 0, n: int = 40, width: int = 6, m: int = 8) -> list[CheckResult]:
    """Gate range, spectral output in span(Q_m), combiner selectors."""
    from .model import block_forward, compute_gates, spatial_branch, spectral_branch
    from .tensor import Tensor
    rng = np.random.default_rng(seed)
    _, bundle = _cloud_bundle(rng, n, 6, m, 4, seed)
    graph, basis, emb = bundle.graph, bundle.basis, bundle.embedding
    config = ModelConfig(d_a=1, d_u=1, dim=2, width=width, n_blocks=3, m=m, n_anchors=4)
    params = init_parameters(config, seed)
    # block 0 keeps its initialization; blocks 1 and 2 get N(0, 1) and N(0, 0.09) weights
    for blk, scale in zip(params.blocks[1:], (1.0, 0.3)):
        for p in vars(blk).values():
            p.data[...] = rng.standard_normal(p.shape) * scale
    lo, hi = 1.0, 0.0
    for blk in params.blocks:
        gamma = compute_gates(blk, emb, graph).data
        lo, hi = min(lo, float(gamma.min())), max(hi, float(gamma.max()))
    gates_ok = 0.0 < lo and hi < 1.0

    v = rng.standard_normal((n, width))
    q = basis.eigenvectors
    span_err = 0.0
    for blk in params.blocks:
        out = spectral_branch(blk, basis, v, activate=False, residual=False).data
        span_err = max(span_err, float(np.abs(out - q @ (q.T @ out)).max()))

    blk = params.blocks[1]
    saved = blk.combine_w.data.copy(), blk.combine_b.data.copy()
    gamma = compute_gates(blk, emb, graph)
    eye, zero = np.eye(width), np.zeros((width, width))
    mismatch = 0.0
    for top, bottom, ref in ((eye, zero, spatial_branch(blk, graph, gamma, Tensor(v)).data),
                             (zero, eye, spectral_branch(blk, basis, v).data)):
        blk.combine_w.data[...] = np.vstack([top, bottom])
        blk.combine_b.data[...] = 0.0
        out = block_forward(blk, graph, basis, emb, v, gamma=gamma).data
        mismatch = max(mismatch, float(np.abs(out - ref).max()))
    blk.combine_w.data[...], blk.combine_b.data[...] = saved
    return [
        CheckResult("gates strictly inside (0, 1)", gates_ok, lo, 0.0,
                    f"min {lo:.3g}, 1 - max {1.0 - hi:.3g}"),
        CheckResult("spectral branch in span(Q_m)", span_err <= 1e-10, span_err, 1e-10),
        CheckResult("combiner selectors reproduce branches", mismatch == 0.0, mismatch, 0.0),
    ]


def run_all(seed: int = 0, n: int = 64, m: int | None = None, perturb: float = 0.0,
            lemma_graphs: int = 50) -> list[CheckResult]:
    out = lemma1_suite(lemma_graphs, seed)
    if m is not None:
        rng = np.random.default_rng(seed)
        graph = random_knn_graph(rng, n, 6)
        g = rng.uniform(-1, 1, n)
        errors, bounds, _ = truncation_errors(graph, g, rng.standard_normal((n, 4)))
        if not 1 <= m <= n:
            raise ValueError(f"m must lie in 1..{n}")
        e, b = errors[m - 1], bounds[m - 1]
        out.append(CheckResult(f"lemma1 at m = {m}, N = {n}", e <= b + 1e-12, float(e), float(b),
                               f"bound {b:.3g}, error {e:.3g}"))
    else:
        out.append(lemma1_full_basis(n, seed))
    out += eigensolver_suite(seed=seed)
    out += embedding_suite(seed=seed)
    out += model_gradcheck(seed, perturb=perturb)
    return out
