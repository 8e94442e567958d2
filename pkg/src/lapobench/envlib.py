"""Synthetic ground-truth environments and transition sampling.

States live in ``[0, 1]^d``, next states in ``[0, 1]^d'``; there are ``k``
actions, indexed ``0 .. k-1``. Transitions are affine per action,
``g(x, a) = A_a x + c_a``, so images of the state box are decided exactly
from its corners. Per-action supports are finite unions of closed
axis-aligned boxes; the state density is uniform on the union of supports.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import read_flat, write_flat
from .numcore import softmax

BUILTIN_ENVS = ("quadrant4", "affine8", "det-policy", "split-support", "disjoint-support")
POLICY_KINDS = ("uniform", "smooth-softmax", "deterministic-region")

A2_TOLERANCE = 1e-9
LIPSCHITZ_THRESHOLD = 1e3


class SupportError(RuntimeError):
    """A sampled state is covered by no action's support."""


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("box bounds differ in dimension")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box {self.lo} .. {self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        return np.all((xs >= np.array(self.lo)) & (xs <= np.array(self.hi)), axis=1)

    def intersects(self, other: Box) -> bool:
        # closed boxes: touching faces count
        return all(max(a, c) <= min(b, d) for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def intersection(self, other: Box) -> Box | None:
        if not self.intersects(other):
            return None
        return Box(tuple(max(a, c) for a, c in zip(self.lo, other.lo)),
                   tuple(min(b, d) for b, d in zip(self.hi, other.hi)))

    def to_list(self) -> list:
        return [list(self.lo), list(self.hi)]

    @classmethod
    def from_list(cls, data) -> Box:
        lo, hi = data
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    @classmethod
    def unit(cls, d: int) -> Box:
        return cls((0.0,) * d, (1.0,) * d)


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "uniform"
    temperature: float = 1.0
    field_seed: int = 0
    n_features: int = 16
    bandwidth: float = 1.0
    # deterministic-region: first containing box wins
    regions: tuple[tuple[Box, int], ...] = ()

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.kind == "smooth-softmax" and not self.temperature > 0:
            raise ValueError("smooth-softmax temperature must be positive")
        if self.kind == "deterministic-region" and not self.regions:
            raise ValueError("deterministic-region policy needs at least one region")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "smooth-softmax":
            out.update(temperature=self.temperature, field_seed=self.field_seed,
                       n_features=self.n_features, bandwidth=self.bandwidth)
        if self.kind == "deterministic-region":
            out["regions"] = [{"box": b.to_list(), "action": a} for b, a in self.regions]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> PolicySpec:
        data = dict(data)
        regions = tuple((Box.from_list(r["box"]), int(r["action"])) for r in data.pop("regions", ()))
        return cls(regions=regions, **data)


@dataclass(frozen=True, eq=False)
class TransitionSpec:
    """Per-action affine maps: ``matrices[a] @ x + offsets[a]``."""

    matrices: np.ndarray  # (k, d', d)
    offsets: np.ndarray  # (k, d')

    def __post_init__(self):
        m = np.array(self.matrices, dtype=np.float64)
        c = np.array(self.offsets, dtype=np.float64)
        if m.ndim != 3 or c.shape != m.shape[:2]:
            raise ValueError(f"transition shapes disagree: matrices {m.shape}, offsets {c.shape}")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "matrices", m)
        object.__setattr__(self, "offsets", c)

    def to_dict(self) -> dict:
        return {"kind": "affine", "matrices": self.matrices.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> TransitionSpec:
        if data.get("kind", "affine") != "affine":
            raise ValueError(f"unsupported transition kind {data.get('kind')!r}")
        return cls(np.asarray(data["matrices"], float), np.asarray(data["offsets"], float))


@dataclass(frozen=True)
class SupportSpec:
    boxes: tuple[tuple[Box, ...], ...]  # per action

    def to_list(self) -> list:
        return [[b.to_list() for b in boxes] for boxes in self.boxes]

    @classmethod
    def from_list(cls, data) -> SupportSpec:
        return cls(tuple(tuple(Box.from_list(b) for b in boxes) for boxes in data))

    @classmethod
    def full(cls, d: int, k: int) -> SupportSpec:
        return cls(tuple((Box.unit(d),) for _ in range(k)))


@dataclass(frozen=True, eq=False)
class Environment:
    name: str
    d: int
    d_prime: int
    k: int
    policy: PolicySpec
    transition: TransitionSpec
    support: SupportSpec
    assumption_flags: tuple[bool, bool, bool, bool] = (True, True, True, True)
    _field: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if min(self.d, self.d_prime, self.k) < 1:
            raise ValueError("d, d' and k must be positive")
        if self.transition.matrices.shape != (self.k, self.d_prime, self.d):
            raise ValueError("transition matrices must have shape (k, d', d)")
        if len(self.support.boxes) != self.k:
            raise ValueError("need one support region per action")
        unit = Box.unit(self.d)
        for a, boxes in enumerate(self.support.boxes):
            if not boxes:
                raise ValueError(f"support of action {a} is empty")
            for b in boxes:
                if b.dim != self.d or b.intersection(unit) != b:
                    raise ValueError(f"support box {b} of action {a} is not inside [0,1]^{self.d}")
        for b, a in self.policy.regions:
            if not 0 <= a < self.k:
                raise ValueError(f"policy region maps to unknown action {a}")
        # affine image of the box attains its extremes at the corners
        corners = np.array(list(itertools.product((0.0, 1.0), repeat=self.d)))
        images = self.g_all(corners)
        if images.min() < -1e-12 or images.max() > 1 + 1e-12:
            raise ValueError("transition map leaves [0,1]^d' for some state")
        if self.policy.kind == "smooth-softmax":
            rng = np.random.default_rng(self.policy.field_seed)
            n = self.policy.n_features
            freq = rng.normal(0.0, self.policy.bandwidth, size=(n, self.d))
            phase = rng.uniform(0.0, 2 * np.pi, size=n)
            weights = rng.normal(0.0, 1.0, size=(n, self.k)) * np.sqrt(2.0 / n)
            object.__setattr__(self, "_field", (freq, phase, weights))

    # -- ground truth ---------------------------------------------------------

    def g(self, xs: np.ndarray, actions) -> np.ndarray:
        """Next states for ``xs`` (N, d) under ``actions`` (scalar or (N,))."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (xs.shape[0],))
        m = self.transition.matrices[actions]
        return np.einsum("nij,nj->ni", m, xs) + self.transition.offsets[actions]

    def g_all(self, xs: np.ndarray) -> np.ndarray:
        """Next states under every action, shape (N, k, d')."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        return np.einsum("aij,nj->nai", self.transition.matrices, xs) + self.transition.offsets[None]

    def in_support(self, xs: np.ndarray) -> np.ndarray:
        """Boolean (N, k): whether each state lies in each action's support."""
        xs = np.atleast_2d(xs)
        out = np.zeros((xs.shape[0], self.k), dtype=bool)
        for a, boxes in enumerate(self.support.boxes):
            for b in boxes:
                out[:, a] |= b.contains(xs)
        return out

    def raw_policy(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        n = xs.shape[0]
        kind = self.policy.kind
        if kind == "uniform":
            return np.full((n, self.k), 1.0 / self.k)
        if kind == "smooth-softmax":
            freq, phase, weights = self._field
            feats = np.cos(2 * np.pi * xs @ freq.T + phase)
            return softmax(feats @ weights / self.policy.temperature)
        probs = np.zeros((n, self.k))
        assigned = np.zeros(n, dtype=bool)
        for box, a in self.policy.regions:
            hit = box.contains(xs) & ~assigned
            probs[hit, a] = 1.0
            assigned |= hit
        if not assigned.all():
            raise SupportError("deterministic-region policy does not cover every state")
        return probs

    def policy_probs(self, xs: np.ndarray) -> np.ndarray:
        """pi(a|x) restricted to actions whose support contains x, renormalised."""
        probs = self.raw_policy(xs) * self.in_support(xs)
        total = probs.sum(axis=1, keepdims=True)
        if np.any(total <= 0):
            bad = np.atleast_2d(xs)[np.flatnonzero(total[:, 0] <= 0)[0]]
            raise SupportError(f"state {bad.tolist()} has no action with positive mass")
        return probs / total

    def state_of_union(self, xs: np.ndarray) -> np.ndarray:
        return self.in_support(xs).any(axis=1)

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "d": self.d,
            "d_prime": self.d_prime,
            "k": self.k,
            "policy": self.policy.to_dict(),
            "transition": self.transition.to_dict(),
            "support": self.support.to_list(),
            "assumption_flags": list(self.assumption_flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Environment:
        return cls(
            name=str(data.get("name", "inline")),
            d=int(data["d"]),
            d_prime=int(data["d_prime"]),
            k=int(data["k"]),
            policy=PolicySpec.from_dict(data.get("policy", {"kind": "uniform"})),
            transition=TransitionSpec.from_dict(data["transition"]),
            support=SupportSpec.from_list(data["support"]) if "support" in data
            else SupportSpec.full(int(data["d"]), int(data["k"])),
            assumption_flags=tuple(bool(f) for f in data.get("assumption_flags", (True,) * 4)),
        )


# -- builtins -----------------------------------------------------------------

QUADRANT_OFFSETS = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]])

# rotation angle per action; offsets sit on a 3x3 lattice (centre removed)
# spanning the feasible range for each map
AFFINE8_ANGLES = (-0.25, -0.35, -0.15, -0.05, 0.15, 0.05, 0.35, 0.25)
AFFINE8_CELLS = ((0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2))


def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _affine8_transition() -> TransitionSpec:
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    mats, offs = [], []
    for theta, cell in zip(AFFINE8_ANGLES, AFFINE8_CELLS):
        m = 0.4 * _rotation(theta)
        img = corners @ m.T
        lo, hi = -img.min(axis=0), 1.0 - img.max(axis=0)
        mats.append(m)
        offs.append(lo + (hi - lo) * np.array(cell) / 2.0)
    return TransitionSpec(np.array(mats), np.array(offs))


def _quadrant_transition() -> TransitionSpec:
    return TransitionSpec(np.stack([0.5 * np.eye(2)] * 4), QUADRANT_OFFSETS.copy())


def quadrant_regions() -> tuple[tuple[Box, int], ...]:
    """Quadrant index ``(x1 >= .5) + 2 (x2 >= .5)``; upper/right wins on edges."""
    return (
        (Box((0.5, 0.5), (1.0, 1.0)), 3),
        (Box((0.0, 0.5), (0.5, 1.0)), 2),
        (Box((0.5, 0.0), (1.0, 0.5)), 1),
        (Box((0.0, 0.0), (0.5, 0.5)), 0),
    )


def make_builtin_env(name: str, seed: int = 0) -> Environment:
    """Build one of the named reference environments.

    ``seed`` only affects environments with random components (the smooth
    policy field of ``affine8``).
    """
    full4 = SupportSpec.full(2, 4)
    if name == "quadrant4":
        return Environment(name, 2, 2, 4, PolicySpec("uniform"), _quadrant_transition(), full4)
    if name == "affine8":
        policy = PolicySpec("smooth-softmax", temperature=1.0, field_seed=seed, n_features=16, bandwidth=0.5)
        return Environment(name, 2, 2, 8, policy, _affine8_transition(), SupportSpec.full(2, 8))
    if name == "det-policy":
        regions = quadrant_regions()
        support = SupportSpec(tuple((next(b for b, a in regions if a == act),) for act in range(4)))
        return Environment(name, 2, 2, 4, PolicySpec("deterministic-region", regions=regions),
                           _quadrant_transition(), support)
    if name == "split-support":
        unit = Box.unit(2)
        split = (Box((0.0, 0.0), (0.4, 1.0)), Box((0.6, 0.0), (1.0, 1.0)))
        return Environment(name, 2, 2, 4, PolicySpec("uniform"), _quadrant_transition(),
                           SupportSpec((split, (unit,), (unit,), (unit,))),
                           assumption_flags=(True, True, False, True))
    if name == "disjoint-support":
        unit = Box.unit(2)
        left, right = Box((0.0, 0.0), (0.45, 1.0)), Box((0.55, 0.0), (1.0, 1.0))
        return Environment(name, 2, 2, 4, PolicySpec("uniform"), _quadrant_transition(),
                           SupportSpec(((left,), (right,), (unit,), (unit,))),
                           assumption_flags=(True, True, True, False))
    raise ValueError(f"unknown environment {name!r}; valid names: {', '.join(BUILTIN_ENVS)}")


def env_from_config(spec) -> Environment:
    """``spec`` is a builtin name, ``{"builtin": name, "seed": s}`` or an inline dict."""
    if isinstance(spec, str):
        return make_builtin_env(spec)
    if "builtin" in spec:
        return make_builtin_env(spec["builtin"], int(spec.get("seed", 0)))
    return Environment.from_dict(spec)


# -- sampling ------------------------------------------------------------------

@dataclass(eq=False)
class TransitionSet:
    xs: np.ndarray
    xs_next: np.ndarray
    actions: np.ndarray | None
    seed: int

    def __len__(self) -> int:
        return self.xs.shape[0]

    @property
    def labeled(self) -> bool:
        return self.actions is not None

    def action_free(self) -> TransitionSet:
        return TransitionSet(self.xs, self.xs_next, None, self.seed)

    def subset(self, idx) -> TransitionSet:
        acts = None if self.actions is None else self.actions[idx]
        return TransitionSet(self.xs[idx], self.xs_next[idx], acts, self.seed)

    def save(self, path) -> None:
        cols = [self.xs, self.xs_next]
        if self.labeled:
            cols.append(self.actions[:, None].astype(np.float64))
        write_flat(path, np.hstack(cols), {
            "kind": "transitions", "n": len(self), "d": self.xs.shape[1],
            "d_prime": self.xs_next.shape[1], "labeled": self.labeled, "seed": self.seed,
        })

    @classmethod
    def load(cls, path) -> TransitionSet:
        data, h = read_flat(Path(path))
        d, dp = h["d"], h["d_prime"]
        acts = data[:, d + dp].astype(np.int64) if h["labeled"] else None
        return cls(data[:, :d].copy(), data[:, d:d + dp].copy(), acts, h["seed"])


def sample_states(env: Environment, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws on the union of supports, by rejection from the unit box."""
    out, have = [], 0
    while have < n:
        cand = rng.uniform(size=(max(2 * (n - have), 64), env.d))
        cand = cand[env.state_of_union(cand)]
        out.append(cand)
        have += cand.shape[0]
    return np.concatenate(out)[:n]


def sample_actions(env: Environment, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    probs = env.policy_probs(xs)
    u = rng.uniform(size=(xs.shape[0], 1))
    acts = (np.cumsum(probs, axis=1) < u).sum(axis=1)
    return np.minimum(acts, env.k - 1)


def sample_transitions(env: Environment, n: int, seed: int, labeled: bool = True) -> TransitionSet:
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    xs = sample_states(env, n, rng)
    acts = sample_actions(env, xs, rng)
    if not env.in_support(xs)[np.arange(n), acts].all():
        raise SupportError("sampled action outside its declared support")
    return TransitionSet(xs, env.g(xs, acts), acts if labeled else None, seed)


# -- assumption checks ---------------------------------------------------------

@dataclass
class Verdict:
    assumption: int
    holds: bool
    detail: str
    witness: object = None

    def to_dict(self) -> dict:
        return {"assumption": self.assumption, "holds": self.holds, "detail": self.detail,
                "witness": self.witness}


def _grid(d: int, r: int) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, r)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def _region_components(boxes) -> list[list[int]]:
    n = len(boxes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in itertools.combinations(range(n), 2):
        if boxes[i].intersects(boxes[j]):
            parent[find(i)] = find(j)
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return list(comps.values())


def _effective_support(env: Environment, a: int) -> list[Box]:
    """Support boxes of action ``a``, clipped to the policy regions that pick it."""
    boxes = list(env.support.boxes[a])
    if env.policy.kind != "deterministic-region":
        return boxes
    regions = [b for b, act in env.policy.regions if act == a]
    out = [c for b in boxes for r in regions if (c := b.intersection(r)) is not None]
    return out


def validate_assumptions(env: Environment, grid_resolution: int = 32) -> list[Verdict]:
    """Finite checks of the four identifiability assumptions.

    1. continuity of ``g(., a)``: largest difference quotient between grid
       neighbours, compared with ``LIPSCHITZ_THRESHOLD`` (a surrogate);
    2. action-injectivity: smallest pairwise distance between next states
       over the grid, compared with ``A2_TOLERANCE``;
    3. connectedness of each support via box adjacency;
    4. pairwise intersection of supports.
    """
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be at least 8")
    grid = _grid(env.d, grid_resolution)
    step = 1.0 / (grid_resolution - 1)
    verdicts = []

    worst, worst_at = 0.0, None
    for axis in range(env.d):
        lo = grid[grid[:, axis] < 1.0 - step / 2]
        hi = lo.copy()
        hi[:, axis] += step
        ratio = np.linalg.norm(env.g_all(hi) - env.g_all(lo), axis=2) / step
        i, a = np.unravel_index(np.argmax(ratio), ratio.shape)
        if ratio[i, a] > worst:
            worst, worst_at = float(ratio[i, a]), {"x": lo[i].tolist(), "action": int(a)}
    ok = worst <= LIPSCHITZ_THRESHOLD
    verdicts.append(Verdict(1, ok, f"{'pass (surrogate)' if ok else 'fail'}: max difference quotient {worst:.4g}",
                            None if ok else worst_at))

    nxt = env.g_all(grid)
    best, best_at = np.inf, None
    for a1, a2 in itertools.combinations(range(env.k), 2):
        dist = np.linalg.norm(nxt[:, a1] - nxt[:, a2], axis=1)
        i = int(np.argmin(dist))
        if dist[i] < best:
            best, best_at = float(dist[i]), {"x": grid[i].tolist(), "actions": [a1, a2]}
    ok = env.k == 1 or best > A2_TOLERANCE
    verdicts.append(Verdict(2, ok, f"min pairwise next-state distance {best:.4g}", None if ok else best_at))

    supports = [_effective_support(env, a) for a in range(env.k)]
    split = [a for a, boxes in enumerate(supports) if len(_region_components(boxes)) != 1]
    verdicts.append(Verdict(3, not split, "every support connected" if not split
                            else f"disconnected supports for actions {split}",
                            split[0] if split else None))

    disjoint = [(a1, a2) for a1, a2 in itertools.combinations(range(env.k), 2)
                if not any(b1.intersects(b2) for b1 in supports[a1] for b2 in supports[a2])]
    verdicts.append(Verdict(4, not disjoint, "all supports pairwise intersect" if not disjoint
                            else f"disjoint support pairs {disjoint}",
                            [list(p) for p in disjoint] if disjoint else None))
    return verdicts
