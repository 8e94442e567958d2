"""Scoring an encoder against the three action-representation desiderata.

Given an encoder ``q(.|x, x')`` the entanglement map is
``v(.|x, a) = q(.|x, g(x, a))``, evaluated on ``(x, a)`` drawn from the
environment's joint state-action distribution.

* determinism: mean entropy of ``v`` rows (0 iff every row is one-hot);
* disentanglement: per action, the share of rows whose argmax equals that
  action's modal latent; the score is the minimum over actions;
* informativeness: modal latents of distinct actions never coincide.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envlib import Environment, TransitionSet, sample_transitions
from .numcore import argmax_smallest, categorical_entropy

log = logging.getLogger(__name__)

MIN_ROWS_PER_ACTION = 30
SUMMARY_COLUMNS = ("env", "k_hat", "beta", "seed", "D1", "D2", "D3", "pass1", "pass2", "pass3")


@dataclass(frozen=True)
class Thresholds:
    determinism: float = 0.05  # nats
    disentanglement: float = 0.99


@dataclass(eq=False)
class EntanglementTable:
    xs: np.ndarray
    actions: np.ndarray
    v: np.ndarray  # (n, k_hat) rows v(.|x, a)
    k: int

    @property
    def k_hat(self) -> int:
        return self.v.shape[1]

    def __len__(self) -> int:
        return self.v.shape[0]

    def groups(self) -> dict[int, np.ndarray]:
        return {a: np.flatnonzero(self.actions == a) for a in range(self.k)}


def build_table(env: Environment, idm, n: int, seed: int) -> EntanglementTable:
    """Sample ``(x, a)`` from the environment and record the encoder's output
    on the exact transition ``(x, g(x, a))``. ``idm`` needs ``probs``."""
    if n < 1:
        raise ValueError("need at least one sample")
    data = sample_transitions(env, n, seed, labeled=True)
    return EntanglementTable(data.xs, data.actions, np.asarray(idm.probs(data.xs, data.xs_next)), env.k)


def score_determinism(table: EntanglementTable) -> float:
    if len(table) == 0:
        raise ValueError("empty table")
    return float(np.mean(categorical_entropy(table.v)))


@dataclass
class Disentanglement:
    score: float
    modes: dict[int, int]
    consistency: dict[int, float]
    counts: dict[int, int]
    undersampled: list[int] = field(default_factory=list)


def score_disentanglement(table: EntanglementTable, min_rows: int = MIN_ROWS_PER_ACTION) -> Disentanglement:
    labels = argmax_smallest(table.v)
    modes, cons, counts, under = {}, {}, {}, []
    for a, rows in table.groups().items():
        counts[a] = len(rows)
        if len(rows) < min_rows:
            if len(rows):
                under.append(a)
            continue
        hist = np.bincount(labels[rows], minlength=table.k_hat)
        modes[a] = int(np.argmax(hist))
        cons[a] = float(hist[modes[a]] / len(rows))
    if under:
        log.warning("actions %s have fewer than %d rows and are excluded", under, min_rows)
    score = min(cons.values()) if cons else float("nan")
    return Disentanglement(score, modes, cons, counts, under)


def score_informativeness(result: Disentanglement | EntanglementTable) -> tuple[bool, list[tuple[int, int]]]:
    """Whether the modal latents are pairwise distinct, plus colliding action pairs."""
    if isinstance(result, EntanglementTable):
        result = score_disentanglement(result)
    collisions = [(a1, a2) for a1, a2 in itertools.combinations(sorted(result.modes), 2)
                  if result.modes[a1] == result.modes[a2]]
    return not collisions, collisions


@dataclass
class Sigma:
    mapping: dict[int, int]
    ties: list[int] = field(default_factory=list)

    def __call__(self, latent: int) -> int | None:
        return self.mapping.get(int(latent))


def extract_sigma(idm, labeled_set: TransitionSet, k: int | None = None) -> Sigma:
    """Majority ground-truth action for every latent observed in the labeled set.

    Latents that never occur stay unmapped; vote ties go to the smallest
    action and are listed in ``ties``.
    """
    if labeled_set.actions is None:
        raise ValueError("extract_sigma needs action labels")
    if len(labeled_set) == 0:
        raise ValueError("labeled set is empty")
    k = int(labeled_set.actions.max()) + 1 if k is None else k
    latents = argmax_smallest(idm.probs(labeled_set.xs, labeled_set.xs_next))
    mapping, ties = {}, []
    for lat in np.unique(latents):
        votes = np.bincount(labeled_set.actions[latents == lat], minlength=k)
        best = int(np.argmax(votes))
        if np.sum(votes == votes[best]) > 1:
            ties.append(int(lat))
        mapping[int(lat)] = best
    return Sigma(mapping, ties)


@dataclass
class AuditReport:
    env: str
    k: int
    k_hat: int
    samples: int
    seed: int
    determinism_score: float
    disentanglement_score: float
    consistency: dict[int, float]
    v_map: dict[int, int]
    undersampled: list[int]
    informative: bool
    collisions: list[tuple[int, int]]
    verdicts: dict[str, bool]
    thresholds: dict[str, float]
    sigma: dict[int, int] | None = None
    sigma_ties: list[int] | None = None
    final_loss: float | None = None
    beta: float | None = None

    @property
    def all_pass(self) -> bool:
        return all(self.verdicts.values())

    def sigma_inverts_v(self) -> bool:
        if self.sigma is None:
            return False
        return all(self.sigma.get(m) == a for a, m in self.v_map.items())

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("consistency", "v_map", "sigma"):
            if out[key] is not None:
                out[key] = {str(k): v for k, v in out[key].items()}
        out["collisions"] = [list(c) for c in self.collisions]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> AuditReport:
        data = dict(data)
        for key in ("consistency", "v_map", "sigma"):
            if data.get(key) is not None:
                data[key] = {int(k): v for k, v in data[key].items()}
        data["collisions"] = [tuple(c) for c in data.get("collisions", [])]
        return cls(**data)

    def summary_row(self, seed: int | None = None) -> dict:
        return {
            "env": self.env, "k_hat": self.k_hat, "beta": self.beta,
            "seed": self.seed if seed is None else seed,
            "D1": repr(self.determinism_score), "D2": repr(self.disentanglement_score),
            "D3": int(self.informative),
            "pass1": int(self.verdicts["D1"]), "pass2": int(self.verdicts["D2"]),
            "pass3": int(self.verdicts["D3"]),
        }


def audit(env: Environment, idm, n: int = 5000, seed: int = 0, thresholds: Thresholds = Thresholds(),
          labeled_set: TransitionSet | None = None, final_loss: float | None = None,
          beta: float | None = None) -> AuditReport:
    table = build_table(env, idm, n, seed)
    d1 = score_determinism(table)
    dis = score_disentanglement(table)
    informative, collisions = score_informativeness(dis)
    sigma = extract_sigma(idm, labeled_set, env.k) if labeled_set is not None else None
    return AuditReport(
        env=env.name, k=env.k, k_hat=table.k_hat, samples=n, seed=seed,
        determinism_score=d1, disentanglement_score=dis.score,
        consistency=dis.consistency, v_map=dis.modes, undersampled=dis.undersampled,
        informative=informative, collisions=collisions,
        verdicts={"D1": d1 <= thresholds.determinism,
                  "D2": bool(dis.score >= thresholds.disentanglement),
                  "D3": informative},
        thresholds=asdict(thresholds),
        sigma=None if sigma is None else sigma.mapping,
        sigma_ties=None if sigma is None else sigma.ties,
        final_loss=final_loss, beta=beta,
    )


def append_summary_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        if new:
            w.writeheader()
        for row in rows:
            w.writerow(row)
