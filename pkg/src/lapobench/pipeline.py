"""Three-stage latent-action policy learning, a behaviour-cloning baseline and
two demonstrations of degenerate optima.

Stage 1 fits the IDM/FDM pair on action-free transitions. Stage 2 relabels
fresh transitions with the IDM's hard latent and fits ``pi_hat(latent | x)`` by
cross-entropy. Stage 3 builds the head ``sigma`` (latent -> action) from a small
labeled set and scores the composed policy ``sigma # pi_hat`` by mean total
variation against the expert.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .audit import Sigma, audit, extract_sigma
from .envlib import Environment, TransitionSet, make_builtin_env, sample_states, sample_transitions
from .numcore import AdamState, Network, adam_step, argmax_smallest, log_softmax, one_hot, softmax
from .objective import TrainConfig, hard_label, train

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("env", "N", "N_a", "method", "divergence", "seed")
COUNTEREXAMPLES = ("deterministic-policy", "continuous-latent")
TEST_STATES = 1000


def subseed(seed: int, *tags: int) -> int:
    """Independent child seed for a named stage of a run."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class PolicyConfig:
    """Classifier fit: full-batch L-BFGS on mean cross-entropy plus ``l2 * ||W||^2 / 2``."""
    hidden: tuple[int, ...] = (16,)
    l2: float = 1e-5
    max_iter: int = 300
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.max_iter < 0 or self.l2 < 0:
            raise ValueError("max_iter and l2 must be nonnegative")

    def to_dict(self) -> dict:
        return dict(asdict(self), hidden=list(self.hidden))


class LatentPolicy:
    """Categorical policy ``pi_hat(. | x)`` over ``n_classes`` outputs."""

    def __init__(self, net: Network):
        self.net = net

    @classmethod
    def init(cls, d: int, n_classes: int, hidden=(64,), seed: int = 0) -> LatentPolicy:
        return cls(Network.mlp(d, list(hidden), n_classes, seed, hidden_act="tanh", out_act="identity"))

    @property
    def n_classes(self) -> int:
        return self.net.output_dim

    def probs(self, xs) -> np.ndarray:
        return softmax(self.net.predict(np.atleast_2d(xs)))


class ExactPushforwardPolicy:
    """``sum_a pi(a|x) q(.|x, g(x, a))``: the latent policy implied by an encoder."""

    def __init__(self, env: Environment, idm, hard: bool = True):
        self.env, self.idm, self.hard = env, idm, hard

    def probs(self, xs) -> np.ndarray:
        xs = np.atleast_2d(xs)
        pi = self.env.policy_probs(xs)
        nxt = self.env.g_all(xs)
        out = None
        for a in range(self.env.k):
            q = self.idm.probs(xs, nxt[:, a])
            if self.hard:
                q = one_hot(argmax_smallest(q), q.shape[1])
            out = pi[:, a:a + 1] * q if out is None else out + pi[:, a:a + 1] * q
        return out


def fit_classifier(xs: np.ndarray, labels: np.ndarray, n_classes: int, cfg: PolicyConfig) -> LatentPolicy:
    """Softmax MLP fitted by cross-entropy; deterministic in ``cfg.seed``."""
    n = xs.shape[0]
    if n == 0:
        raise ValueError("cannot fit a policy on zero samples")
    policy = LatentPolicy.init(xs.shape[1], n_classes, cfg.hidden, subseed(cfg.seed, 0))
    net, targets = policy.net, one_hot(labels, n_classes)
    params = net.parameters()

    def unpack(flat):
        pos = 0
        for p in params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def objective(flat):
        unpack(flat)
        logp = log_softmax(net.forward(xs))
        grad = net.backward((np.exp(logp) - targets) / n)
        loss = -(targets * logp).sum() / n
        parts = []
        for layer, gw, gb in zip(net.layers, grad.weights, grad.biases):
            loss += 0.5 * cfg.l2 * (layer.weight ** 2).sum()
            parts += [(gw + cfg.l2 * layer.weight).ravel(), gb]
        return loss, np.concatenate(parts)

    if cfg.max_iter > 0:
        x0 = np.concatenate([p.ravel() for p in params])
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": cfg.max_iter})
        unpack(res.x)
    return policy


def stage1_train(env: Environment, n: int, cfg: TrainConfig, seed: int | None = None):
    """Fit IDM/FDM on ``n`` action-free transitions; returns the ``TrainResult``."""
    seed = cfg.seed if seed is None else seed
    data = sample_transitions(env, n, subseed(seed, 10), labeled=False)
    return train(data, cfg)


def stage2_train_policy(env: Environment, idm, n: int, cfg: PolicyConfig) -> LatentPolicy:
    if n <= 0:
        raise ValueError("stage 2 needs at least one transition")
    data = sample_transitions(env, n, subseed(cfg.seed, 20), labeled=False)
    labels = hard_label(idm, data)
    k_hat = idm.k_hat
    missing = sorted(set(range(k_hat)) - set(np.unique(labels).tolist()))
    if missing:
        log.warning("latents %s never appear in the relabeled data", missing)
    return fit_classifier(data.xs, labels, k_hat, cfg)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(axis=-1)


def pushforward(latent_probs: np.ndarray, sigma: Sigma, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Map latent probabilities through ``sigma``; returns (action probs, unmapped mass)."""
    out = np.zeros((latent_probs.shape[0], k))
    unmapped = np.zeros(latent_probs.shape[0])
    for lat in range(latent_probs.shape[1]):
        a = sigma(lat)
        if a is None:
            unmapped += latent_probs[:, lat]
        else:
            out[:, a] += latent_probs[:, lat]
    return out, unmapped


def composed_divergence(env: Environment, action_probs_fn, seed: int, n_test: int = TEST_STATES) -> float:
    xs = sample_states(env, n_test, np.random.default_rng(subseed(seed, 30)))
    pred, unmapped = action_probs_fn(xs)
    # unmapped latent mass lands on no action, so it counts fully as error
    tv = 0.5 * (np.abs(pred - env.policy_probs(xs)).sum(axis=1) + unmapped)
    return float(np.clip(tv.mean(), 0.0, 1.0))


@dataclass
class HeadResult:
    sigma: Sigma
    divergence: float
    unmapped_mass: float
    flags: list[str] = field(default_factory=list)


def stage3_fit_head(policy, idm, env: Environment, n_a: int, seed: int) -> HeadResult:
    if n_a < 1:
        raise ValueError("N_a must be at least 1")
    labeled = sample_transitions(env, n_a, subseed(seed, 40), labeled=True)
    sigma = extract_sigma(idm, labeled, env.k)
    flags = []
    if sigma.ties:
        flags.append(f"sigma vote ties at latents {sigma.ties}")
    if len(set(sigma.mapping.values())) < env.k:
        flags.append("sigma does not reach every action")
    xs = sample_states(env, TEST_STATES, np.random.default_rng(subseed(seed, 30)))
    _, unmapped = pushforward(policy.probs(xs), sigma, env.k)
    div = composed_divergence(env, lambda s: pushforward(policy.probs(s), sigma, env.k), seed)
    if unmapped.mean() > 0.01:
        flags.append(f"unmapped latent mass {unmapped.mean():.3f}")
    return HeadResult(sigma, div, float(unmapped.mean()), flags)


def behavior_cloning_baseline(env: Environment, n_a: int, cfg: PolicyConfig, seed: int | None = None) -> float:
    """Direct classifier ``x -> a`` on ``n_a`` labeled pairs, scored like the pipeline."""
    seed = cfg.seed if seed is None else seed
    if n_a <= 0:
        raise ValueError("behaviour cloning needs at least one labeled pair")
    labeled = sample_transitions(env, n_a, subseed(seed, 40), labeled=True)
    policy = fit_classifier(labeled.xs, labeled.actions, env.k, cfg)
    return composed_divergence(env, lambda s: (policy.probs(s), np.zeros(s.shape[0])), seed)


@dataclass
class PipelineResult:
    env: str
    seed: int
    n: int
    stage_losses: dict
    audit: dict
    divergence: dict[int, float]  # N_a -> LAPO divergence
    baseline_divergence: dict[int, float]  # N_a -> behaviour-cloning divergence
    flags: dict[int, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("divergence", "baseline_divergence", "flags"):
            out[key] = {str(k): v for k, v in out[key].items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> PipelineResult:
        data = dict(data)
        for key in ("divergence", "baseline_divergence", "flags"):
            data[key] = {int(k): v for k, v in data.get(key, {}).items()}
        return cls(**data)

    def csv_rows(self) -> list[dict]:
        rows = []
        for n_a in sorted(self.divergence):
            for method, table in (("lapo", self.divergence), ("bc", self.baseline_divergence)):
                if n_a in table:
                    rows.append({"env": self.env, "N": self.n, "N_a": n_a, "method": method,
                                 "divergence": repr(table[n_a]), "seed": self.seed})
        return rows


def write_result_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def run_pipeline(env: Environment, n: int, n_a_list, train_cfg: TrainConfig, policy_cfg: PolicyConfig,
                 seed: int, audit_samples: int = 5000, baseline: bool = True) -> PipelineResult:
    """All three stages plus the paired baseline for each labeled-set size."""
    tcfg = TrainConfig(**{**train_cfg.to_dict(), "seed": subseed(seed, 1)})
    pcfg = PolicyConfig(**{**policy_cfg.to_dict(), "seed": subseed(seed, 2)})
    fit = stage1_train(env, n, tcfg, seed)
    policy = stage2_train_policy(env, fit.idm, n, pcfg)
    rep = audit(env, fit.idm, audit_samples, subseed(seed, 3),
                final_loss=fit.final.get("total"), beta=tcfg.beta)
    div, base, flags = {}, {}, {}
    for n_a in n_a_list:
        head = stage3_fit_head(policy, fit.idm, env, n_a, seed)
        div[n_a] = head.divergence
        flags[n_a] = head.flags
        if baseline:
            base[n_a] = behavior_cloning_baseline(env, n_a, pcfg, seed)
    final = fit.final
    return PipelineResult(env.name, seed, n,
                          {"reconstruction": final.get("reconstruction"), "entropy": final.get("entropy"),
                           "total": final.get("total")},
                          rep.to_dict(), div, base, flags)


# --- degenerate optima -----------------------------------------------------

def latent_ablation_gap(idm, fdm, data: TransitionSet, seed: int) -> float:
    """Reconstruction with shuffled hard latents minus reconstruction with the true ones."""
    labels = hard_label(idm, data)
    shuffled = np.random.default_rng(seed).permutation(labels)
    err_true = ((data.xs_next - fdm.predict(data.xs, labels)) ** 2).sum(axis=1).mean()
    err_shuf = ((data.xs_next - fdm.predict(data.xs, shuffled)) ** 2).sum(axis=1).mean()
    return float(err_shuf - err_true)


@dataclass
class ContinuousConfig:
    hidden: tuple[int, ...] = (64,)
    lr: float = 3e-3
    lr_final: float = 3e-4
    steps: int = 5000
    batch: int = 256
    seed: int = 0


class ContinuousIdm:
    """Unconstrained real latent ``z = f(x, x')`` with ``dim(z) = d'``."""

    def __init__(self, net: Network):
        self.net = net

    def encode(self, xs, xs_next) -> np.ndarray:
        return self.net.predict(np.hstack([xs, xs_next]))


class ResidualFdm:
    """``g_hat(x, z) = z + r(x, z)``; the identity in ``z`` is one weight-setting away."""

    def __init__(self, net: Network):
        self.net = net

    def predict(self, xs, zs) -> np.ndarray:
        return zs + self.net.predict(np.hstack([xs, zs]))


def train_continuous(data: TransitionSet, cfg: ContinuousConfig) -> tuple[ContinuousIdm, ResidualFdm, float]:
    d, d_prime = data.xs.shape[1], data.xs_next.shape[1]
    idm = ContinuousIdm(Network.mlp(d + d_prime, list(cfg.hidden), d_prime, subseed(cfg.seed, 0),
                                    hidden_act="tanh", out_act="identity"))
    fdm = ResidualFdm(Network.mlp(d + d_prime, list(cfg.hidden), d_prime, subseed(cfg.seed, 1),
                                  hidden_act="tanh", out_act="identity"))
    # zero residual branch: the decoder starts as the identity in z
    fdm.net.layers[-1].weight[:] = 0.0
    rng = np.random.default_rng(subseed(cfg.seed, 2))
    s_idm, s_fdm = AdamState.for_network(idm.net), AdamState.for_network(fdm.net)
    n = len(data)
    perm, pos = rng.permutation(n), 0
    for step in range(cfg.steps):
        if pos + cfg.batch > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch]
        pos += cfg.batch
        x, xn = data.xs[idx], data.xs_next[idx]
        z = idm.net.forward(np.hstack([x, xn]))
        pred = z + fdm.net.forward(np.hstack([x, z]))
        up = 2.0 * (pred - xn) / len(idx)
        g_fdm = fdm.net.backward(up)
        dz = up + g_fdm.input[:, d:]
        g_idm = idm.net.backward(dz)
        lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (step / max(cfg.steps - 1, 1))
        adam_step(fdm.net, g_fdm, s_fdm, lr)
        adam_step(idm.net, g_idm, s_idm, lr)
    z = idm.encode(data.xs, data.xs_next)
    recon = float(((data.xs_next - fdm.predict(data.xs, z)) ** 2).sum(axis=1).mean())
    return idm, fdm, recon


def _split(n: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    return perm[: n // 2], perm[n // 2:]


def _r2(pred: np.ndarray, targets: np.ndarray) -> float:
    ss_tot = ((targets - targets.mean(axis=0)) ** 2).sum()
    return float(1.0 - ((targets - pred) ** 2).sum() / ss_tot)


def probe_r2(features: np.ndarray, targets: np.ndarray, seed: int, neighbours: int = 5) -> float:
    """Held-out R^2 of a k-nearest-neighbour regressor from ``features`` to ``targets``.

    Fit on one random half, scored on the other. Nonparametric, so it measures
    whether the targets are a function of the features at all.
    """
    tr, te = _split(features.shape[0], seed)
    _, idx = cKDTree(features[tr]).query(features[te], k=neighbours)
    return _r2(targets[tr][idx].mean(axis=1), targets[te])


def linear_probe_r2(features: np.ndarray, targets: np.ndarray, seed: int) -> float:
    tr, te = _split(features.shape[0], seed)
    design = np.hstack([features, np.ones((features.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design[tr], targets[tr], rcond=None)
    return _r2(design[te] @ coef, targets[te])


@dataclass
class CounterexampleReport:
    name: str
    env: str
    seed: int
    reconstruction: float
    demonstrated: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def run_counterexample(name: str, seed: int, n: int = 20_000, train_cfg: TrainConfig | None = None,
                       continuous_cfg: ContinuousConfig | None = None, env_name: str | None = None,
                       audit_samples: int = 5000) -> CounterexampleReport:
    """Train where a degenerate optimum exists and report whether it was reached.

    ``deterministic-policy``: when the expert picks the action as a function of
    the state, the FDM can read the action off ``x`` and ignore the latent, so
    informativeness may fail, or shuffling latents may cost nothing.

    ``continuous-latent``: with a real-valued latent the encoder can copy
    ``x'`` and the decoder can pass it through.

    ``env_name`` overrides the environment (for control runs).
    """
    if name == "deterministic-policy":
        env = make_builtin_env(env_name or "det-policy")
        cfg = train_cfg or TrainConfig(k_hat=env.k)
        cfg = TrainConfig(**{**cfg.to_dict(), "seed": subseed(seed, 1)})
        fit = stage1_train(env, n, cfg, seed)
        rep = audit(env, fit.idm, audit_samples, subseed(seed, 3), final_loss=fit.final["total"], beta=cfg.beta)
        held = sample_transitions(env, audit_samples, subseed(seed, 4), labeled=True)
        gap = latent_ablation_gap(fit.idm, fit.fdm, held, subseed(seed, 5))
        recon = fit.final["reconstruction"]
        demonstrated = (not rep.informative) or gap <= 1e-3
        return CounterexampleReport(name, env.name, seed, recon, bool(demonstrated), {
            "total": fit.final["total"], "entropy": fit.final["entropy"],
            "informative": rep.informative, "collisions": [list(c) for c in rep.collisions],
            "distinct_modes": len(set(rep.v_map.values())), "ablation_gap": gap,
            "verdicts": rep.verdicts,
        })
    if name == "continuous-latent":
        env = make_builtin_env(env_name or "quadrant4")
        cfg = continuous_cfg or ContinuousConfig()
        cfg = ContinuousConfig(**{**asdict(cfg), "seed": subseed(seed, 1)})
        data = sample_transitions(env, n, subseed(seed, 10), labeled=False)
        idm, fdm, recon = train_continuous(data, cfg)
        held = sample_transitions(env, audit_samples, subseed(seed, 4), labeled=False)
        z = idm.encode(held.xs, held.xs_next)
        r2 = probe_r2(z, held.xs_next, subseed(seed, 5))
        return CounterexampleReport(name, env.name, seed, recon, r2 >= 0.99, {
            "probe_r2": r2, "linear_probe_r2": linear_probe_r2(z, held.xs_next, subseed(seed, 5))})
    raise ValueError(f"unknown counterexample {name!r}; expected one of {COUNTEREXAMPLES}")
