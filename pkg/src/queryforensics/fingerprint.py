"""Per-incident fingerprints and average-fingerprint matching.

A fingerprint is the EM-estimated transition matrix of one observed trace,
annotated with the procedure ordering that fixes its row/column meaning so
two deployments can align before comparing. Matching ranks attacks by the
cosine similarity between a fingerprint and each attack's entrywise-mean
fingerprint.
"""

from __future__ import annotations

import datetime as _dt
import json
import uuid
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleDatabaseError, InvalidInputError
from .extraction import Trace
from .hmm import ObservationSequence, default_transition_init, fit_transition, \
    validate_transition_matrix
from .procedures import ProcedureDB
from .signal import cosine_sim

UNKNOWN_ATTACK = "unknown"


@dataclass
class Fingerprint:
    """Shareable description of one incident: a row-stochastic transition
    matrix over an explicit procedure ordering."""

    matrix: np.ndarray
    procedure_order: list[str]
    incident_id: str
    attack_id: str = UNKNOWN_ATTACK
    created_at: str = ""
    trace_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = validate_transition_matrix(self.matrix, len(self.procedure_order))

    def flatten(self) -> np.ndarray:
        """Row-major flattening over procedure_order; fixed so serialized
        fingerprints are portable across deployments."""
        return self.matrix.ravel()

    def to_json(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "attack_id": self.attack_id,
            "procedure_order": list(self.procedure_order),
            "matrix": self.flatten().tolist(),
            "created_at": self.created_at,
            "trace_meta": dict(self.trace_meta),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Fingerprint":
        order = list(data["procedure_order"])
        m = len(order)
        matrix = np.asarray(data["matrix"], dtype=np.float64).reshape(m, m)
        return cls(matrix=matrix, procedure_order=order,
                   incident_id=data["incident_id"],
                   attack_id=data.get("attack_id", UNKNOWN_ATTACK),
                   created_at=data.get("created_at", ""),
                   trace_meta=dict(data.get("trace_meta", {})))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "Fingerprint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class FingerprintDB:
    """All recorded fingerprints, grouped by attack id on demand."""

    fingerprints: list[Fingerprint] = field(default_factory=list)

    def __post_init__(self):
        ids = [f.incident_id for f in self.fingerprints]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("incident ids must be unique")

    def add(self, fp: Fingerprint):
        if fp.incident_id in {f.incident_id for f in self.fingerprints}:
            raise InvalidInputError(f"incident id {fp.incident_id!r} already present")
        self.fingerprints.append(fp)

    def by_attack(self) -> dict[str, list[Fingerprint]]:
        groups: dict[str, list[Fingerprint]] = {}
        for fp in self.fingerprints:
            groups.setdefault(fp.attack_id, []).append(fp)
        return groups

    def __len__(self) -> int:
        return len(self.fingerprints)


def fingerprint_trace(trace: Trace, pdb: ProcedureDB,
                      incident_id: str | None = None,
                      attack_id: str = UNKNOWN_ATTACK,
                      seed: int = 0) -> Fingerprint:
    """Fit a fingerprint to one trace via EM from the seeded jittered init."""
    if len(trace) < 2:
        raise InvalidInputError("trace needs at least 2 queries to fingerprint")
    obs = ObservationSequence.from_trace(trace)
    matrix = fit_transition(obs, pdb, init=default_transition_init(pdb.m, seed=seed))
    return Fingerprint(
        matrix=matrix,
        procedure_order=pdb.ids,
        incident_id=incident_id or f"incident-{uuid.uuid4().hex[:12]}",
        attack_id=attack_id,
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        trace_meta={"length": len(trace), "dims": list(trace.adv.dims)},
    )


def match_fingerprint(fp: Fingerprint, db: FingerprintDB) -> list[tuple[str, float]]:
    """Rank attacks by cosine similarity between ``fp`` and each attack's
    entrywise-mean fingerprint (means of stochastic matrices are already
    stochastic; no re-normalization). Lexicographic tie-break."""
    if len(db) == 0:
        raise InvalidInputError("fingerprint database is empty")
    flat = fp.flatten()
    ranking = []
    for attack_id, group in db.by_attack().items():
        for other in group:
            if other.procedure_order != fp.procedure_order:
                raise IncompatibleDatabaseError(
                    f"procedure order of incident {other.incident_id!r} does not match")
        mean = np.mean([g.matrix for g in group], axis=0)
        ranking.append((attack_id, cosine_sim(flat, mean.ravel())))
    ranking.sort(key=lambda pair: (-pair[1], pair[0]))
    return ranking
