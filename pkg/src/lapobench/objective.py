"""Entropy-regularised latent-action objective and its trainer.

For an encoder ``q(.|x, x')`` over ``k_hat`` latent actions and a decoder
``g_hat(x, a_hat)`` the per-sample loss is::

    sum_a_hat q(a_hat|x,x') * ||x' - g_hat(x, onehot(a_hat))||^2  +  beta * H(q(.|x,x'))

``exact-marginal`` mode enumerates every latent; ``relaxed-sample`` replaces
the expectation with a single Gumbel-softmax sample fed to the decoder;
``hard-argmax-ablation`` feeds a one-hot sample forward and the relaxed
sample's gradient backward (straight-through).
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envlib import TransitionSet
from .formats import load_network, save_network
from .numcore import (
    AdamState,
    Network,
    adam_step,
    argmax_smallest,
    gumbel_noise,
    log_softmax,
    one_hot,
    softmax,
    softmax_backward,
)

log = logging.getLogger(__name__)

MODES = ("exact-marginal", "relaxed-sample", "hard-argmax-ablation")
TRACE_COLUMNS = ("step", "reconstruction", "entropy", "total", "wallclock_ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class IdmModel:
    """Inverse dynamics model: ``(x, x') -> logits`` over ``k_hat`` latents."""

    net: Network
    d: int
    d_prime: int

    @property
    def k_hat(self) -> int:
        return self.net.output_dim

    @classmethod
    def init(cls, d: int, d_prime: int, k_hat: int, hidden=(64,), seed: int = 0) -> IdmModel:
        net = Network.mlp(d + d_prime, list(hidden), k_hat, seed, hidden_act="tanh", out_act="identity")
        return cls(net, d, d_prime)

    def _inputs(self, xs, xs_next) -> np.ndarray:
        xs, xs_next = np.atleast_2d(xs), np.atleast_2d(xs_next)
        if xs.shape[1] != self.d or xs_next.shape[1] != self.d_prime:
            raise ValueError(f"IDM expects states of width {self.d} and {self.d_prime}, "
                             f"got {xs.shape[1]} and {xs_next.shape[1]}")
        return np.hstack([xs, xs_next])

    def logits(self, xs, xs_next) -> np.ndarray:
        return self.net.predict(self._inputs(xs, xs_next))

    def probs(self, xs, xs_next) -> np.ndarray:
        return softmax(self.logits(xs, xs_next))

    def log_probs(self, xs, xs_next) -> np.ndarray:
        return log_softmax(self.logits(xs, xs_next))

    def copy(self) -> IdmModel:
        return IdmModel(self.net.copy(), self.d, self.d_prime)


@dataclass
class FdmModel:
    """Forward dynamics model: ``(x, latent vector) -> (0, 1)^d'``."""

    net: Network
    d: int
    k_hat: int

    @property
    def d_prime(self) -> int:
        return self.net.output_dim

    @classmethod
    def init(cls, d: int, d_prime: int, k_hat: int, hidden=(64,), seed: int = 0) -> FdmModel:
        # sigmoid head keeps predictions inside the next-state box
        net = Network.mlp(d + k_hat, list(hidden), d_prime, seed, hidden_act="tanh", out_act="sigmoid")
        return cls(net, d, k_hat)

    def predict(self, xs, latent) -> np.ndarray:
        """``latent`` is (N, k_hat) one-hot/relaxed vectors or (N,) indices."""
        xs = np.atleast_2d(xs)
        latent = np.asarray(latent)
        if latent.ndim == 1 and latent.shape[0] == xs.shape[0] and np.issubdtype(latent.dtype, np.integer):
            latent = one_hot(latent, self.k_hat)
        latent = np.atleast_2d(latent)
        if xs.shape[1] != self.d or latent.shape[1] != self.k_hat:
            raise ValueError(f"FDM expects state width {self.d} and latent width {self.k_hat}")
        return self.net.predict(np.hstack([xs, latent]))

    def predict_all(self, xs) -> np.ndarray:
        """Predictions under every latent, shape (N, k_hat, d')."""
        xs = np.atleast_2d(xs)
        n, k = xs.shape[0], self.k_hat
        inp = np.hstack([np.repeat(xs, k, axis=0), np.tile(np.eye(k), (n, 1))])
        return self.net.predict(inp).reshape(n, k, -1)

    def copy(self) -> FdmModel:
        return FdmModel(self.net.copy(), self.d, self.k_hat)


@dataclass
class TrainConfig:
    beta: float = 0.05
    beta_start: float = -0.05
    beta_warmup: float = 0.3
    k_hat: int = 4
    mode: str = "exact-marginal"
    lr: float = 3e-3
    lr_final: float = 3e-4
    steps: int = 20000
    batch: int = 256
    hidden: tuple[int, ...] = (64,)
    temperature: float = 1.0
    temperature_final: float = 0.1
    eval_every: int = 500
    eval_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.beta_warmup <= 1.0:
            raise ValueError("beta_warmup is a fraction of the run")
        if self.k_hat < 1:
            raise ValueError("k_hat must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.temperature <= 0 or self.temperature_final <= 0:
            raise ValueError("temperatures must be positive")

    def lr_at(self, step: int) -> float:
        # geometric decay from lr to lr_final
        frac = step / max(self.steps - 1, 1)
        return self.lr * (self.lr_final / self.lr) ** frac

    def beta_at(self, step: int) -> float:
        # linear ramp from beta_start to beta over the first beta_warmup fraction
        ramp = self.beta_warmup * self.steps
        if step >= ramp:
            return self.beta
        return self.beta_start + (self.beta - self.beta_start) * step / ramp

    def temperature_at(self, step: int) -> float:
        frac = step / max(self.steps - 1, 1)
        return self.temperature * (self.temperature_final / self.temperature) ** frac

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def init_models(d: int, d_prime: int, cfg: TrainConfig) -> tuple[IdmModel, FdmModel]:
    idm_seed, fdm_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    idm = IdmModel.init(d, d_prime, cfg.k_hat, cfg.hidden, int(idm_seed))
    fdm = FdmModel.init(d, d_prime, cfg.k_hat, cfg.hidden, int(fdm_seed))
    return idm, fdm


def _check_dims(idm: IdmModel, fdm: FdmModel, xs, xs_next):
    if idm.k_hat != fdm.k_hat:
        raise ValueError(f"IDM has {idm.k_hat} latents but FDM expects {fdm.k_hat}")
    if xs.shape[1] != idm.d or xs_next.shape[1] != idm.d_prime or fdm.d != idm.d or fdm.d_prime != idm.d_prime:
        raise ValueError("state dimensions of batch, IDM and FDM disagree")


def loss_rows(idm, fdm, xs, xs_next) -> tuple[np.ndarray, np.ndarray]:
    """Per-row reconstruction and entropy terms.

    ``idm`` needs ``log_probs(xs, xs_next)`` and ``fdm`` needs
    ``predict_all(xs)``; the oracle pair qualifies as well as trained models.
    """
    xs, xs_next = np.atleast_2d(xs), np.atleast_2d(xs_next)
    _check_dims(idm, fdm, xs, xs_next)
    logp = idm.log_probs(xs, xs_next)
    q = np.exp(logp)
    err = ((xs_next[:, None, :] - fdm.predict_all(xs)) ** 2).sum(axis=2)
    with np.errstate(invalid="ignore"):
        plogp = np.where(q > 0, q * logp, 0.0)
    return (q * err).sum(axis=1), np.maximum(-plogp.sum(axis=1), 0.0)


def loss_terms(idm, fdm, batch: TransitionSet) -> tuple[float, float]:
    """Mean (reconstruction, entropy) with the latent expectation enumerated exactly."""
    recon, ent = loss_rows(idm, fdm, batch.xs, batch.xs_next)
    return float(recon.mean()), float(ent.mean())


def total_objective(idm, fdm, batch, beta: float) -> float:
    recon, ent = loss_terms(idm, fdm, batch)
    return recon + beta * ent


def objective_gradients(idm: IdmModel, fdm: FdmModel, xs: np.ndarray, xs_next: np.ndarray,
                        beta: float, mode: str = "exact-marginal", rng=None,
                        temperature: float = 1.0):
    """Loss terms on a minibatch and their gradients for both networks.

    Returns ``(reconstruction, entropy, idm_gradient, fdm_gradient)``. In the
    sampled modes the reconstruction is the single-sample estimate.
    """
    _check_dims(idm, fdm, xs, xs_next)
    n, k, d = xs.shape[0], idm.k_hat, idm.d
    logits = idm.net.forward(idm._inputs(xs, xs_next))
    logp = log_softmax(logits)
    q = np.exp(logp)
    ent_rows = -(q * logp).sum(axis=1)
    # d(beta * mean H)/dq; the constant -1 is annihilated by the softmax Jacobian
    dq = beta * (-logp - 1.0) / n

    if mode == "exact-marginal":
        inp = np.hstack([np.repeat(xs, k, axis=0), np.tile(np.eye(k), (n, 1))])
        pred = fdm.net.forward(inp).reshape(n, k, -1)
        diff = pred - xs_next[:, None, :]
        err = (diff ** 2).sum(axis=2)
        recon = float((q * err).sum(axis=1).mean())
        dq = dq + err / n
        g_fdm = fdm.net.backward(((2.0 / n) * q[:, :, None] * diff).reshape(n * k, -1))
        dlogits = softmax_backward(q, dq)
    else:
        if rng is None:
            raise ValueError(f"mode {mode!r} needs a random generator")
        y = softmax((logits + gumbel_noise(logits.shape, rng)) / temperature)
        latent = y if mode == "relaxed-sample" else one_hot(argmax_smallest(y), k)
        pred = fdm.net.forward(np.hstack([xs, latent]))
        diff = pred - xs_next
        recon = float((diff ** 2).sum(axis=1).mean())
        g_fdm = fdm.net.backward((2.0 / n) * diff)
        dy = g_fdm.input[:, d:]
        dlogits = softmax_backward(y, dy) / temperature + softmax_backward(q, dq)

    g_idm = idm.net.backward(dlogits)
    return recon, float(ent_rows.mean()), g_idm, g_fdm


@dataclass
class TrainResult:
    idm: IdmModel
    fdm: FdmModel
    trace: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def final(self) -> dict:
        return self.trace[-1] if self.trace else {}


def train(data: TransitionSet, cfg: TrainConfig, idm: IdmModel | None = None,
          fdm: FdmModel | None = None) -> TrainResult:
    """Minimise the objective with Adam on minibatches of ``data``.

    Actions in ``data`` (if any) are ignored. The trace holds exact-marginal
    loss terms on a fixed evaluation subset, recorded every ``eval_every``
    steps and after the last step.
    """
    xs, xs_next = data.xs, data.xs_next
    if idm is None or fdm is None:
        idm, fdm = init_models(xs.shape[1], xs_next.shape[1], cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    eval_set = TransitionSet(xs[:cfg.eval_size], xs_next[:cfg.eval_size], None, data.seed)
    opt_idm, opt_fdm = AdamState.for_network(idm.net), AdamState.for_network(fdm.net)
    n = xs.shape[0]
    trace: list[dict] = []
    t0 = time.perf_counter()

    def record(step):
        recon, ent = loss_terms(idm, fdm, eval_set)
        row = {"step": step, "reconstruction": recon, "entropy": ent,
               "total": recon + cfg.beta * ent,
               "wallclock_ms": round(1000 * (time.perf_counter() - t0), 3)}
        trace.append(row)
        if not np.isfinite(row["total"]):
            raise TrainingDiverged(f"non-finite objective at step {step}", trace)
        return row

    if cfg.steps == 0:
        record(0)
        return TrainResult(idm, fdm, trace, cfg)

    perm, pos = rng.permutation(n), 0
    for step in range(cfg.steps):
        if pos + cfg.batch > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch]
        pos += cfg.batch
        recon, ent, g_idm, g_fdm = objective_gradients(
            idm, fdm, xs[idx], xs_next[idx], cfg.beta_at(step), cfg.mode, rng, cfg.temperature_at(step))
        if not (np.isfinite(recon) and np.isfinite(ent)):
            record(step)
            raise TrainingDiverged(f"non-finite minibatch loss at step {step}", trace)
        lr = cfg.lr_at(step)
        adam_step(idm.net, g_idm, opt_idm, lr)
        adam_step(fdm.net, g_fdm, opt_fdm, lr)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            record(step + 1)
    if opt_idm.rejected or opt_fdm.rejected:
        log.warning("%d optimizer steps rejected for non-finite gradients",
                    opt_idm.rejected + opt_fdm.rejected)
    return TrainResult(idm, fdm, trace, cfg)


def encode(idm: IdmModel, x, x_next) -> np.ndarray:
    """Distribution over latent actions for one transition (or a batch)."""
    p = idm.probs(x, x_next)
    return p[0] if np.ndim(x) == 1 else p


def hard_label(idm, batch: TransitionSet) -> np.ndarray:
    """Most likely latent per row; exact ties go to the smallest index."""
    return argmax_smallest(idm.probs(batch.xs, batch.xs_next))


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) and k != "wallclock_ms" else row[k])
                        for k in TRACE_COLUMNS})


def save_models(directory, result: TrainResult) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    step = result.final.get("step", 0)
    save_network(result.idm.net, directory / "idm.json", step, {"d": result.idm.d, "d_prime": result.idm.d_prime})
    save_network(result.fdm.net, directory / "fdm.json", step, {"d": result.fdm.d, "k_hat": result.fdm.k_hat})
    if result.config is not None:
        (directory / "train_config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True))
    return directory


def load_models(directory) -> tuple[IdmModel, FdmModel]:
    directory = Path(directory)
    inet, imeta = load_network(directory / "idm.json")
    fnet, fmeta = load_network(directory / "fdm.json")
    return (IdmModel(inet, imeta["extra"]["d"], imeta["extra"]["d_prime"]),
            FdmModel(fnet, fmeta["extra"]["d"], fmeta["extra"]["k_hat"]))
