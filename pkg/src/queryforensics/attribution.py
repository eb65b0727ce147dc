"""Attack attribution and per-query explanation.

Attribution is model selection over the enrolled HMMs: rank every attack by
the trace's forward log-likelihood and decode the winner's Viterbi path as
the per-query explanation timeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .extraction import Trace
from .hmm import AttackModel, ObservationSequence, forward_log_likelihood, viterbi_decode
from .procedures import ProcedureDB


@dataclass
class AttackDB:
    """The enrolled attacks: one transition matrix per attack id."""

    attacks: list[AttackModel] = field(default_factory=list)

    def __post_init__(self):
        ids = [a.id for a in self.attacks]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("attack ids must be unique")
        dims = {a.m for a in self.attacks}
        if len(dims) > 1:
            raise InvalidInputError(f"attacks disagree on state count: {sorted(dims)}")

    @property
    def size(self) -> int:
        return len(self.attacks)

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.attacks]

    def __iter__(self):
        return iter(self.attacks)

    def get(self, attack_id: str) -> AttackModel:
        for a in self.attacks:
            if a.id == attack_id:
                return a
        raise KeyError(attack_id)

    def with_attack(self, attack: AttackModel) -> "AttackDB":
        return AttackDB(self.attacks + [attack])

    def to_json(self, procedure_order: list[str]) -> dict:
        return {
            "procedure_order": list(procedure_order),
            "attacks": [{"id": a.id, "transition": a.transition.tolist()}
                        for a in self.attacks],
        }

    @classmethod
    def from_json(cls, data: dict) -> tuple["AttackDB", list[str]]:
        db = cls([AttackModel(e["id"], np.asarray(e["transition"], dtype=np.float64))
                  for e in data["attacks"]])
        return db, list(data["procedure_order"])

    def save(self, path, procedure_order: list[str]):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(procedure_order), fh)

    @classmethod
    def load(cls, path) -> tuple["AttackDB", list[str]]:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class AttributionReport:
    """Ranked attacks plus the winner's decoded procedure timeline.

    ``decoded[i]`` explains the change into query i+1, i.e. delta_i =
    x_{i+1} - x_i; ``decoded_log_emissions`` carries the per-step log
    emission of the decoded procedure for the text timeline.
    """

    ranking: list[tuple[str, float]]
    decoded: list[tuple[int, str]]
    decoded_log_emissions: list[float]
    trace_length: int
    dims: tuple[int, int, int]

    @property
    def top(self) -> str:
        return self.ranking[0][0]

    def topk(self, k: int) -> list[str]:
        return [attack_id for attack_id, _ in self.ranking[:k]]

    def to_json(self, topk: int = 3) -> dict:
        k = max(topk, 3) if len(self.ranking) >= 3 else len(self.ranking)
        return {
            "trace": {"length": self.trace_length, "dims": list(self.dims)},
            "ranking": [{"attack_id": a, "log_likelihood": ll} for a, ll in self.ranking],
            "top": self.topk(k),
            "decoded": [{"query_index": i, "procedure": p} for i, p in self.decoded],
        }

    def to_text(self) -> str:
        lines = [f"trace: {self.trace_length} queries, dims {self.dims}"]
        lines.append("ranking:")
        for rank, (attack_id, ll) in enumerate(self.ranking, start=1):
            lines.append(f"  {rank:2d}. {attack_id:24s} log-likelihood {ll:.3f}")
        lines.append("timeline (query, procedure, log-emission):")
        for (idx, proc), le in zip(self.decoded, self.decoded_log_emissions):
            lines.append(f"  {idx:6d}  {proc:8s} {le:14.3f}")
        return "\n".join(lines)


def attribute(trace: Trace, adb: AttackDB, pdb: ProcedureDB) -> AttributionReport:
    """Rank every enrolled attack by forward log-likelihood and decode the
    winner. Equal likelihoods are broken by lexicographic attack id."""
    if len(trace) < 2:
        raise InvalidInputError("trace needs at least 2 queries to attribute")
    if adb.size == 0:
        raise InvalidInputError("attack database is empty")
    obs = ObservationSequence.from_trace(trace)
    scores = [(attack.id, forward_log_likelihood(obs, attack, pdb)) for attack in adb]
    scores.sort(key=lambda pair: (-pair[1], pair[0]))
    winner = adb.get(scores[0][0])
    path = viterbi_decode(obs, winner, pdb)
    table = obs.log_emissions(pdb)
    emissions = [float(table[i, pdb.index_of(p)]) for i, p in enumerate(path)]
    return AttributionReport(
        ranking=scores,
        decoded=[(i + 1, p) for i, p in enumerate(path)],
        decoded_log_emissions=emissions,
        trace_length=len(trace),
        dims=trace.adv.dims,
    )


def explain(trace: Trace, attack: AttackModel, pdb: ProcedureDB) -> list[tuple[int, str]]:
    """Viterbi timeline of a trace under one attack model; entry i explains
    delta_i = x_{i+1} - x_i. Stable under re-invocation."""
    if len(trace) < 2:
        raise InvalidInputError("trace needs at least 2 queries to explain")
    obs = ObservationSequence.from_trace(trace)
    path = viterbi_decode(obs, attack, pdb)
    return [(i + 1, p) for i, p in enumerate(path)]
