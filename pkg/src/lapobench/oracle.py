"""Zero-loss reference encoder/decoder built from the ground truth.

The graph of ``g(., a)`` is the closed set ``{(x, g(x, a)) : x in X}``. With
action-injective transitions these graphs are pairwise disjoint, so the
metric Urysohn functions

    h_a(z) = D_rest(z) / (D_a(z) + D_rest(z)),   D_rest = min_{a' != a} D_a'

equal 1 on graph ``a`` and 0 on every other graph, and normalising them gives
a continuous encoder that is one-hot on every feasible transition. The
matching decoder copies ``g`` for real actions and outputs zeros otherwise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .envlib import Environment, sample_transitions, validate_assumptions
from .numcore import categorical_entropy


class GraphOverlapError(ValueError):
    """Transition graphs are not pairwise disjoint; the construction does not apply."""


class DegenerateUrysohnError(RuntimeError):
    pass


def _grid(d: int, r: int) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, r)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


class GraphDistanceField:
    """Distances from points of ``X x X'`` to each action's transition graph.

    A KD-tree over ``resolution**d`` graph points gives the starting point;
    projected Gauss-Newton on ``||x - x0||^2 + ||x' - g(x0, a)||^2`` with a
    central-difference Jacobian refines it. The returned value is the
    distance to an actual graph point, hence never below the true distance.
    """

    def __init__(self, env: Environment, resolution: int = 256, refine_steps: int = 20,
                 tolerance: float = 1e-6):
        self.env = env
        self.resolution = resolution
        self.refine_steps = refine_steps
        self.tolerance = tolerance
        self._grid = _grid(env.d, resolution)
        nxt = env.g_all(self._grid)
        self._trees = [cKDTree(np.hstack([self._grid, nxt[:, a]])) for a in range(env.k)]

    def _refine(self, a: int, xs: np.ndarray, xs_next: np.ndarray, x0: np.ndarray) -> np.ndarray:
        env, d, h = self.env, self.env.d, 1e-6
        eye = np.eye(d)
        for _ in range(self.refine_steps):
            gx = env.g(x0, a)
            jac = np.stack([(env.g(x0 + h * eye[j], a) - env.g(x0 - h * eye[j], a)) / (2 * h)
                            for j in range(d)], axis=2)  # (N, d', d)
            r_state, r_next = x0 - xs, gx - xs_next
            # normal equations of the stacked residual [x0 - x; g(x0) - x']
            jtj = eye[None] + np.einsum("nki,nkj->nij", jac, jac)
            jtr = r_state + np.einsum("nki,nk->ni", jac, r_next)
            step = np.linalg.solve(jtj, jtr[..., None])[..., 0]
            x0 = np.clip(x0 - step, 0.0, 1.0)
            if np.max(np.abs(step)) < 1e-15:
                break
        return x0

    def project(self, a: int, xs: np.ndarray, xs_next: np.ndarray) -> np.ndarray:
        """Closest state ``x0`` found for each query on graph ``a``."""
        xs, xs_next = np.atleast_2d(xs), np.atleast_2d(xs_next)
        _, idx = self._trees[a].query(np.hstack([xs, xs_next]))
        return self._refine(a, xs, xs_next, self._grid[idx].copy())

    def distance(self, a: int, xs, xs_next) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        xs_next = np.atleast_2d(np.asarray(xs_next, dtype=np.float64))
        if not 0 <= a < self.env.k:
            raise ValueError(f"action {a} outside 0..{self.env.k - 1}")
        x0 = self.project(a, xs, xs_next)
        return np.sqrt(((xs - x0) ** 2).sum(axis=1) + ((xs_next - self.env.g(x0, a)) ** 2).sum(axis=1))

    def distances(self, xs, xs_next) -> np.ndarray:
        """Distances to every graph, shape (N, k)."""
        return np.stack([self.distance(a, xs, xs_next) for a in range(self.env.k)], axis=1)


def graph_distance(field: GraphDistanceField, a: int, x, x_next) -> float | np.ndarray:
    out = field.distance(a, x, x_next)
    return float(out[0]) if np.ndim(x) == 1 else out


def check_graphs_disjoint(env: Environment, grid_resolution: int = 64) -> None:
    verdicts = validate_assumptions(env, grid_resolution)
    for v in verdicts[:2]:
        if not v.holds:
            raise GraphOverlapError(f"assumption {v.assumption} fails ({v.detail}); witness {v.witness}")


class OracleIdm:
    """Urysohn partition-of-unity encoder over ``k_hat >= k`` latents."""

    def __init__(self, field: GraphDistanceField, k_hat: int | None = None, validate: bool = True):
        k = field.env.k
        k_hat = k if k_hat is None else k_hat
        if k_hat < k:
            raise ValueError(f"k_hat={k_hat} is smaller than the number of actions {k}")
        if validate:
            check_graphs_disjoint(field.env)
        self.field = field
        self.k_hat = k_hat
        self.d, self.d_prime = field.env.d, field.env.d_prime

    def urysohn(self, xs, xs_next) -> np.ndarray:
        dist = self.field.distances(xs, xs_next)
        k = dist.shape[1]
        if k == 1:
            return np.ones_like(dist)
        h = np.empty_like(dist)
        for a in range(k):
            rest = np.min(np.delete(dist, a, axis=1), axis=1)
            denom = dist[:, a] + rest
            with np.errstate(invalid="ignore", divide="ignore"):
                h[:, a] = np.where(denom > 0, rest / denom, np.nan)
        bad = ~np.isfinite(h).all(axis=1) | (np.nan_to_num(h).sum(axis=1) <= 0)
        if bad.any():
            raise DegenerateUrysohnError(
                f"{int(bad.sum())} points lie on two graphs at once; first at row {int(np.flatnonzero(bad)[0])}")
        return h

    def probs(self, xs, xs_next) -> np.ndarray:
        h = self.urysohn(xs, xs_next)
        q = h / h.sum(axis=1, keepdims=True)
        out = np.zeros((q.shape[0], self.k_hat))
        out[:, :q.shape[1]] = q
        return out

    def log_probs(self, xs, xs_next) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs(xs, xs_next))


def oracle_q(idm: OracleIdm, x, x_next) -> np.ndarray:
    p = idm.probs(x, x_next)
    return p[0] if np.ndim(x) == 1 else p


class OracleFdm:
    """Decoder copying ``g`` on real actions and returning zeros on spare latents."""

    def __init__(self, env: Environment, k_hat: int | None = None):
        self.env = env
        self.k_hat = env.k if k_hat is None else k_hat
        if self.k_hat < env.k:
            raise ValueError("k_hat must be at least the number of actions")
        self.d, self.d_prime = env.d, env.d_prime

    def predict_all(self, xs) -> np.ndarray:
        xs = np.atleast_2d(xs)
        out = np.zeros((xs.shape[0], self.k_hat, self.d_prime))
        out[:, :self.env.k] = self.env.g_all(xs)
        return out

    def predict(self, xs, latent) -> np.ndarray:
        latent = np.asarray(latent)
        if latent.ndim == 2:
            latent = latent.argmax(axis=1)
        xs = np.atleast_2d(xs)
        latent = np.broadcast_to(latent, (xs.shape[0],))
        return self.predict_all(xs)[np.arange(xs.shape[0]), latent]


def oracle_g(env: Environment, k_hat: int, x, a_hat: int) -> np.ndarray:
    """``g(x, a_hat)`` for a real action, the zero vector for a spare latent."""
    if not 0 <= a_hat < k_hat:
        raise ValueError(f"latent {a_hat} outside 0..{k_hat - 1}")
    x = np.asarray(x, dtype=np.float64)
    if a_hat >= env.k:
        return np.zeros(env.d_prime) if x.ndim == 1 else np.zeros((x.shape[0], env.d_prime))
    out = env.g(x, a_hat)
    return out[0] if x.ndim == 1 else out


@dataclass
class CertificationReport:
    env: str
    k_hat: int
    samples: int
    grid_resolution: int
    reconstruction_mean: float
    reconstruction_worst: float
    entropy_mean: float
    entropy_worst: float
    reconstruction_tolerance: float
    entropy_tolerance: float
    passed: bool
    worst_samples: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def certify_zero_loss(env: Environment, k_hat: int | None = None, n: int = 10_000, seed: int = 0,
                      resolution: int = 256, reconstruction_tol: float = 1e-8,
                      entropy_tol: float = 1e-4, n_worst: int = 5) -> CertificationReport:
    """Evaluate both loss terms of the oracle pair on ``n`` fresh transitions."""
    k_hat = env.k if k_hat is None else k_hat
    check_graphs_disjoint(env)
    idm = OracleIdm(GraphDistanceField(env, resolution), k_hat, validate=False)
    fdm = OracleFdm(env, k_hat)
    data = sample_transitions(env, n, seed, labeled=True)
    q = idm.probs(data.xs, data.xs_next)
    err = ((data.xs_next[:, None, :] - fdm.predict_all(data.xs)) ** 2).sum(axis=2)
    recon = (q * err).sum(axis=1)
    ent = categorical_entropy(q / q.sum(axis=1, keepdims=True))
    score = recon / reconstruction_tol + ent / entropy_tol
    worst = np.argsort(-score)[:n_worst]
    offenders = [{"x": data.xs[i].tolist(), "x_next": data.xs_next[i].tolist(),
                  "action": int(data.actions[i]), "reconstruction": float(recon[i]),
                  "entropy": float(ent[i])} for i in worst]
    r_mean, e_mean = float(recon.mean()), float(ent.mean())
    return CertificationReport(
        env=env.name, k_hat=k_hat, samples=n, grid_resolution=resolution,
        reconstruction_mean=r_mean, reconstruction_worst=float(recon.max()),
        entropy_mean=e_mean, entropy_worst=float(ent.max()),
        reconstruction_tolerance=reconstruction_tol, entropy_tolerance=entropy_tol,
        passed=r_mean <= reconstruction_tol and e_mean <= entropy_tol,
        worst_samples=offenders,
    )
