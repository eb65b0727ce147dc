"""Log-space HMM inference: Forward likelihood, Viterbi decoding, and
transition-only Baum-Welch estimation.

Emissions come from the shared procedure database and are frozen; only the
transition matrix is attack-specific. The initial state distribution is
fixed uniform 1/m and never learned. Emissions at step t may read the
previous change (line search), which keeps the chain a valid HMM because
they condition on observations only, never on hidden history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .extraction import Trace
from .procedures import ProcedureDB, emission_features, log_emission_table
from .signal import Image, delta_between


def validate_transition_matrix(a: np.ndarray, m: int | None = None):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"transition matrix must be square, got {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise InvalidInputError(f"transition matrix is {arr.shape[0]}x{arr.shape[0]}, expected {m}")
    if arr.min() < 0:
        raise InvalidInputError("transition probabilities must be non-negative")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("transition matrix rows must sum to 1 within 1e-9")
    return arr


@dataclass(frozen=True, eq=False)
class AttackModel:
    """A known attack: its id and row-stochastic transition matrix over a
    fixed procedure ordering."""

    id: str
    transition: np.ndarray

    def __post_init__(self):
        arr = validate_transition_matrix(self.transition).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "transition", arr)

    @property
    def m(self) -> int:
        return self.transition.shape[0]


class ObservationSequence:
    """The per-query changes of a trace, plus the adversarial example the
    interpolation emission needs. Emission features are computed lazily and
    cached; instances are read-only after construction."""

    def __init__(self, deltas: np.ndarray, adv: Image | None):
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.ndim == 3:
            deltas = deltas[np.newaxis]
        if deltas.ndim != 4 or deltas.shape[0] < 1:
            raise InvalidInputError("observations must be a nonempty (T, H, W, C) stack")
        self.deltas = deltas
        self.adv = adv
        self._features: dict | None = None

    @classmethod
    def from_trace(cls, trace: Trace) -> "ObservationSequence":
        if len(trace) < 2:
            raise InvalidInputError("trace needs at least 2 queries to form observations")
        deltas = np.stack([delta_between(b, a)
                           for a, b in zip(trace.queries, trace.queries[1:])])
        return cls(deltas, trace.adv)

    def __len__(self) -> int:
        return self.deltas.shape[0]

    @property
    def d(self) -> int:
        return int(np.prod(self.deltas.shape[1:]))

    def features(self) -> dict:
        if self._features is None:
            adv = self.adv.data if self.adv is not None else None
            self._features = emission_features(self.deltas, adv)
        return self._features

    def log_emissions(self, db: ProcedureDB) -> np.ndarray:
        return log_emission_table(db, self.features())


def _shifted_emissions(log_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step max-shifted linear emissions; states hundreds of nats below
    the step maximum flush to zero, which a log-sum-exp would also treat as
    exact zero at double precision. A tiny floor keeps dead steps alive."""
    shift = log_e.max(axis=1)
    e = np.exp(log_e - shift[:, None])
    return np.maximum(e, 1e-300), shift


def _scaled_forward(log_e: np.ndarray, a: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Scaled Forward recursion: alpha rows normalized to sum 1, with the
    per-step normalizers accumulated into the log-likelihood."""
    t, m = log_e.shape
    e, shift = _shifted_emissions(log_e)
    alpha = np.empty((t, m))
    norms = np.empty(t)
    v = e[0] / m
    for i in range(t):
        if i:
            v = (alpha[i - 1] @ a) * e[i]
        norms[i] = v.sum()
        alpha[i] = v / norms[i]
    ll = float(np.log(norms).sum() + shift.sum())
    return alpha, norms, ll


def _scaled_backward(log_e: np.ndarray, a: np.ndarray, norms: np.ndarray) -> np.ndarray:
    t, m = log_e.shape
    e, _ = _shifted_emissions(log_e)
    beta = np.empty((t, m))
    beta[-1] = 1.0
    for i in range(t - 2, -1, -1):
        beta[i] = a @ (beta[i + 1] * e[i + 1]) / norms[i + 1]
    return beta


def forward_log_likelihood(obs: ObservationSequence, attack: AttackModel,
                           db: ProcedureDB) -> float:
    """log P(observations | attack) by the Forward recursion."""
    a = validate_transition_matrix(attack.transition, db.m)
    log_e = obs.log_emissions(db)
    return _scaled_forward(log_e, a)[2]


def viterbi_decode(obs: ObservationSequence, attack: AttackModel,
                   db: ProcedureDB) -> list[str]:
    """Most likely procedure sequence; ties broken by lowest state index
    (at the final step, then backwards through the backpointers)."""
    a = validate_transition_matrix(attack.transition, db.m)
    log_e = obs.log_emissions(db)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    t, m = log_e.shape
    score = np.empty((t, m))
    back = np.zeros((t, m), dtype=np.intp)
    score[0] = -np.log(m) + log_e[0]
    for i in range(1, t):
        cand = score[i - 1][:, None] + log_a  # cand[k, j]
        back[i] = np.argmax(cand, axis=0)     # argmax picks the lowest k on ties
        score[i] = cand[back[i], np.arange(m)] + log_e[i]
    path = np.empty(t, dtype=np.intp)
    path[-1] = int(np.argmax(score[-1]))
    for i in range(t - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    ids = db.ids
    return [ids[j] for j in path]


def viterbi_log_joint(obs: ObservationSequence, attack: AttackModel,
                      db: ProcedureDB) -> float:
    """Joint log probability of the Viterbi path and the observations."""
    a = validate_transition_matrix(attack.transition, db.m)
    log_e = obs.log_emissions(db)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    score = -np.log(db.m) + log_e[0]
    for i in range(1, log_e.shape[0]):
        score = np.max(score[:, None] + log_a, axis=0) + log_e[i]
    return float(np.max(score))


def default_transition_init(m: int, seed: int = 0) -> np.ndarray:
    """Uniform matrix plus symmetric Dirichlet jitter (alpha=10)."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(m, 10.0), size=m)


def fit_transition(obs: ObservationSequence, db: ProcedureDB,
                   init: np.ndarray | None = None, max_iters: int = 100,
                   tol: float = 1e-4, history: list | None = None) -> np.ndarray:
    """Baum-Welch estimation of the transition matrix only.

    Emissions stay frozen (they are a global setting shared by all attacks)
    and the initial distribution stays uniform. Iteration stops when the
    per-observation log-likelihood improves by less than ``tol`` or after
    ``max_iters`` rounds. Rows of states never visited are reset to uniform.
    ``history``, if given, collects the per-iteration log-likelihoods.
    """
    if max_iters < 1:
        raise InvalidInputError("max_iters must be >= 1")
    m = db.m
    a = default_transition_init(m, seed=0) if init is None else \
        validate_transition_matrix(init, m).copy()
    log_e = obs.log_emissions(db)
    t = log_e.shape[0]
    e, _ = _shifted_emissions(log_e)
    prev_ll = -np.inf
    for _ in range(max_iters):
        alpha, norms, ll = _scaled_forward(log_e, a)
        if history is not None:
            history.append(ll)
        if ll - prev_ll < tol * t and np.isfinite(prev_ll):
            break
        prev_ll = ll
        if t == 1:
            break  # no transitions to estimate
        beta = _scaled_backward(log_e, a, norms)
        # expected transition counts: sum_t alpha_t (x) (e*beta)_{t+1} / norm
        weighted = beta[1:] * e[1:] / norms[1:, None]
        xi = (alpha[:-1].T @ weighted) * a
        denom = xi.sum(axis=1, keepdims=True)
        # a state holding a negligible share of the t-1 expected transitions
        # was never visited; its row is unestimated and resets to uniform
        visited = denom > (t - 1) * 1e-10
        fresh = np.divide(xi, denom, out=np.full_like(xi, 1.0 / m), where=visited)
        fresh /= fresh.sum(axis=1, keepdims=True)
        a = fresh
    return a
