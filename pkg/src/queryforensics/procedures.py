"""Emission models for the hidden states and the shared procedure database.

Four emission families:

* noise      -- i.i.d. pixel differences scored by a discrete PMF over the
                511 quantized difference levels,
* pattern    -- spectral-template match, scored |D|^(M-1) with M the absolute
                Pearson correlation between the change's binarized PSD and
                the template mask,
* interpolation -- same score with M measured between the raw change and the
                adversarial example in pixel space,
* line-search / null -- model-free: cosine match against the previous change,
                or a point mass on the exact-zero change.

All scores are returned as natural-log probabilities, floored so Viterbi
paths always exist.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTemplateError, InvalidInputError
from .signal import DELTA_LEVELS, LEVELS, binarize, cosine_sim, pearson, psd2

# Generic procedure ids that every database must carry.
NULL_ID = "NULL"
LINE_SEARCH_ID = "LS"
INTERPOLATION_ID = "IMG"

DEFAULT_BINARIZE_FACTOR = 3.0
SMOOTHING_FLOOR = 1e-12
LN_LEVELS = math.log(LEVELS)


def log_floor(d: int) -> float:
    """Finite lower bound for any emission over d pixels.

    Strictly below the uniform-PMF noise score d*log(1/511), so a missing
    context or a NULL mismatch never outranks a real emission.
    """
    return d * math.log(1.0 / DELTA_LEVELS) - 50.0


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Discrete PMF over the 511 pixel-difference levels {-255..255}/255."""

    pmf: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pmf, dtype=np.float64)
        if arr.shape != (DELTA_LEVELS,):
            raise InvalidInputError(f"pmf must have {DELTA_LEVELS} entries, got {arr.shape}")
        if arr.min() <= 0.0:
            raise InvalidInputError("pmf entries must be positive (smoothed)")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pmf must sum to 1 within 1e-9")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "pmf", arr)

    @property
    def log_pmf(self) -> np.ndarray:
        return np.log(self.pmf)


@dataclass(frozen=True, eq=False)
class PatternModel:
    """Spectral mask template, or a pixel-space image for interpolation."""

    template: np.ndarray
    kind: str = "spectral"  # "spectral" | "image-interpolation"
    binarize_factor: float = DEFAULT_BINARIZE_FACTOR

    def __post_init__(self):
        arr = np.asarray(self.template, dtype=np.float64)
        if self.kind not in ("spectral", "image-interpolation"):
            raise InvalidInputError(f"unknown pattern kind {self.kind!r}")
        if self.kind == "spectral":
            if arr.ndim != 2:
                raise InvalidInputError("spectral template must be a 2-D mask")
            if not np.any(arr):
                raise InvalidInputError("spectral template needs at least one nonzero bin")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "template", arr)


@dataclass(frozen=True)
class Procedure:
    """A hidden state: id, kind, and the emission model the kind requires.

    ``context_arity`` is 1 for procedures scored from the current change
    alone and 2 for line search, which also reads the previous change.
    """

    id: str
    kind: str  # "noise" | "pattern" | "line-search" | "interpolation" | "null"
    model: NoiseModel | PatternModel | None = None
    context_arity: int = 1

    def __post_init__(self):
        if self.kind == "noise" and not isinstance(self.model, NoiseModel):
            raise InvalidInputError(f"{self.id}: noise procedure needs a NoiseModel")
        if self.kind in ("pattern", "interpolation") and not isinstance(self.model, PatternModel):
            raise InvalidInputError(f"{self.id}: {self.kind} procedure needs a PatternModel")
        if self.kind in ("line-search", "null") and self.model is not None:
            raise InvalidInputError(f"{self.id}: {self.kind} procedure carries no model")
        if self.kind == "line-search" and self.context_arity != 2:
            raise InvalidInputError("line-search procedures have context_arity 2")


@dataclass
class ProcedureDB:
    """Ordered, shared set of procedures; the hidden-state space.

    System databases always contain the generic NULL, LS and IMG procedures;
    :meth:`validate` enforces that and is called on load/save and enrollment.
    The constructor itself stays permissive so small synthetic state spaces
    can be built for analysis.
    """

    procedures: list[Procedure] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.procedures]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("procedure ids must be unique")

    @classmethod
    def generic(cls) -> "ProcedureDB":
        """Fresh database holding only the built-in generic procedures."""
        return cls([
            Procedure(NULL_ID, "null"),
            Procedure(LINE_SEARCH_ID, "line-search", context_arity=2),
            Procedure(INTERPOLATION_ID, "interpolation",
                      PatternModel(np.zeros((1, 1)), kind="image-interpolation")),
        ])

    def validate(self):
        present = {p.id for p in self.procedures}
        missing = {NULL_ID, LINE_SEARCH_ID, INTERPOLATION_ID} - present
        if missing:
            raise InvalidInputError(f"database lacks generic procedures: {sorted(missing)}")

    @property
    def m(self) -> int:
        return len(self.procedures)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.procedures]

    def __iter__(self):
        return iter(self.procedures)

    def __getitem__(self, i: int) -> Procedure:
        return self.procedures[i]

    def index_of(self, proc_id: str) -> int:
        for i, p in enumerate(self.procedures):
            if p.id == proc_id:
                return i
        raise KeyError(proc_id)

    def with_procedure(self, proc: Procedure) -> "ProcedureDB":
        """Append-only copy; existing entries are never mutated."""
        return ProcedureDB(self.procedures + [proc])

    def next_id(self, prefix: str) -> str:
        """Continue the N1../P1.. naming scheme for discovered procedures."""
        top = 0
        for p in self.procedures:
            if p.id.startswith(prefix) and p.id[len(prefix):].isdigit():
                top = max(top, int(p.id[len(prefix):]))
        return f"{prefix}{top + 1}"

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        self.validate()
        out = []
        for p in self.procedures:
            entry: dict = {"id": p.id, "kind": p.kind, "context_arity": p.context_arity}
            if isinstance(p.model, NoiseModel):
                entry["pmf"] = p.model.pmf.tolist()
            elif isinstance(p.model, PatternModel):
                if p.model.kind == "spectral":
                    mask = p.model.template.astype(np.uint8)
                    entry["template"] = {
                        "dims": list(mask.shape),
                        "bits": base64.b64encode(np.packbits(mask.ravel())).decode("ascii"),
                        "binarize_factor": p.model.binarize_factor,
                    }
                else:
                    entry["template"] = {"kind": "image-interpolation"}
            out.append(entry)
        return {"procedures": out}

    @classmethod
    def from_json(cls, data: dict) -> "ProcedureDB":
        procs = []
        for entry in data["procedures"]:
            kind = entry["kind"]
            model: NoiseModel | PatternModel | None = None
            if kind == "noise":
                model = NoiseModel(np.asarray(entry["pmf"], dtype=np.float64))
            elif kind == "pattern":
                t = entry["template"]
                dims = tuple(t["dims"])
                bits = np.unpackbits(
                    np.frombuffer(base64.b64decode(t["bits"]), dtype=np.uint8),
                    count=dims[0] * dims[1])
                model = PatternModel(bits.reshape(dims).astype(np.float64),
                                     kind="spectral",
                                     binarize_factor=float(t.get("binarize_factor",
                                                                 DEFAULT_BINARIZE_FACTOR)))
            elif kind == "interpolation":
                model = PatternModel(np.zeros((1, 1)), kind="image-interpolation")
            procs.append(Procedure(entry["id"], kind, model,
                                   context_arity=int(entry.get("context_arity", 1))))
        db = cls(procs)
        db.validate()
        return db

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ProcedureDB":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def delta_levels(delta: np.ndarray) -> np.ndarray:
    """Integer level index (0..510) of each pixel difference."""
    return (np.clip(np.rint(np.asarray(delta) * 255.0), -255, 255) + 255).astype(np.intp)


def _pattern_score_to_log(match: float, d: int) -> float:
    """Truncated-exponential transform: log of |D|^(M-1) = (M-1)*d*ln 256."""
    return (match - 1.0) * d * LN_LEVELS


def pattern_match(delta: np.ndarray, model: PatternModel, adv: np.ndarray | None) -> float:
    """Similarity M in [0, 1] between a change and a pattern template."""
    if model.kind == "spectral":
        spec_mask = binarize(psd2(delta), model.binarize_factor)
        if spec_mask.shape != model.template.shape:
            raise InvalidInputError(
                f"template dims {model.template.shape} do not match delta spectrum "
                f"{spec_mask.shape}")
        return abs(pearson(spec_mask.ravel(), model.template.ravel()))
    if adv is None:
        return 0.0
    return abs(pearson(np.asarray(delta).ravel(), np.asarray(adv).ravel()))


def log_emission(proc: Procedure, delta: np.ndarray,
                 prev_delta: np.ndarray | None = None,
                 adv: np.ndarray | None = None) -> float:
    """Natural-log emission probability of one change under one procedure.

    Missing context (no previous change for line search, no adversarial
    example for interpolation) yields the log floor instead of an error so
    decoding can always proceed. The result is finite and <= 0.
    """
    arr = np.asarray(delta, dtype=np.float64)
    d = arr.size
    floor = log_floor(d)
    if proc.kind == "null":
        return 0.0 if not np.any(arr) else floor
    if proc.kind == "noise":
        assert isinstance(proc.model, NoiseModel)
        return float(proc.model.log_pmf[delta_levels(arr)].sum())
    if proc.kind == "line-search":
        if prev_delta is None:
            return floor
        m = abs(cosine_sim(arr.ravel(), np.asarray(prev_delta).ravel()))
        return _pattern_score_to_log(m, d)
    assert isinstance(proc.model, PatternModel)
    if proc.kind == "interpolation" and adv is None:
        return floor
    m = pattern_match(arr, proc.model, adv)
    return _pattern_score_to_log(m, d)


def estimate_noise_pmf(cluster: list[np.ndarray], bandwidth: float = 1.0,
                       smoothing_floor: float = SMOOTHING_FLOOR) -> NoiseModel:
    """Estimate a pixel-difference PMF from a cluster of changes.

    Discrete analogue of KDE: a histogram over the 511 levels, convolved with
    a Gaussian kernel of the given width in levels (width <= 1 is the
    identity kernel), floored at ``smoothing_floor`` and renormalized.
    """
    if not cluster:
        raise InvalidInputError("cluster must be nonempty")
    counts = np.zeros(DELTA_LEVELS, dtype=np.float64)
    for delta in cluster:
        counts += np.bincount(delta_levels(np.asarray(delta)).ravel(), minlength=DELTA_LEVELS)
    if bandwidth > 1.0:
        sigma = bandwidth / 2.0
        radius = max(1, int(math.ceil(3.0 * sigma)))
        kernel = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
        kernel /= kernel.sum()
        counts = np.convolve(counts, kernel, mode="same")
    pmf = counts / counts.sum()
    below = pmf < smoothing_floor
    if below.any():
        # raise starved levels to the floor; pay for it out of the rest so the
        # dominant mass loses exactly the floored total, nothing more
        floored_total = smoothing_floor * np.count_nonzero(below)
        above_sum = pmf[~below].sum()
        pmf[below] = smoothing_floor
        pmf[~below] *= (1.0 - floored_total) / above_sum
    return NoiseModel(pmf)


def extract_template(cluster: list[np.ndarray],
                     threshold_factor: float = DEFAULT_BINARIZE_FACTOR) -> PatternModel:
    """Spectral template of a cluster: binarized mean PSD of its changes."""
    if not cluster:
        raise InvalidInputError("cluster must be nonempty")
    mean_spec = np.mean([psd2(d) for d in cluster], axis=0)
    mask = binarize(mean_spec, threshold_factor)
    if not np.any(mask):
        raise DegenerateTemplateError("cluster mean spectrum binarized to an empty mask")
    return PatternModel(mask.astype(np.float64), kind="spectral",
                        binarize_factor=threshold_factor)


def uniform_noise_model() -> NoiseModel:
    return NoiseModel(np.full(DELTA_LEVELS, 1.0 / DELTA_LEVELS))


def gaussian_noise_model(sigma_levels: float) -> NoiseModel:
    """Analytic discrete Gaussian PMF with the given std in levels."""
    if sigma_levels <= 0:
        raise InvalidInputError("sigma_levels must be positive")
    k = np.arange(DELTA_LEVELS, dtype=np.float64) - (DELTA_LEVELS // 2)
    pmf = np.exp(-0.5 * (k / sigma_levels) ** 2)
    pmf /= pmf.sum()
    pmf = np.maximum(pmf, SMOOTHING_FLOOR)
    pmf /= pmf.sum()
    return NoiseModel(pmf)


# -- vectorized emission table (used by the HMM layer) -----------------------

def emission_features(deltas: np.ndarray, adv: np.ndarray | None):
    """Precompute per-change features shared by all procedures.

    Returns a dict with level indices, PSDs, binarized-PSD cache, previous-
    change cosines and adversarial-example correlations for a (T, H, W, C)
    stack of changes.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    t, h, w, c = deltas.shape
    flat = deltas.reshape(t, -1)
    spec = (np.abs(np.fft.fft2(deltas, axes=(1, 2))) ** 2).mean(axis=3)

    norms = np.linalg.norm(flat, axis=1)
    cos_prev = np.zeros(t)
    denom = norms[1:] * norms[:-1]
    dots = np.einsum("ij,ij->i", flat[1:], flat[:-1])
    np.divide(dots, denom, out=cos_prev[1:], where=denom > 0)

    corr_adv = np.zeros(t)
    if adv is not None:
        a = np.asarray(adv, dtype=np.float64).ravel()
        ac = a - a.mean()
        an = np.linalg.norm(ac)
        if an > 0:
            fc = flat - flat.mean(axis=1, keepdims=True)
            fn = np.linalg.norm(fc, axis=1)
            np.divide(fc @ ac, fn * an, out=corr_adv, where=fn * an > 0)

    return {
        "deltas": deltas,
        "levels": (np.clip(np.rint(flat * 255.0), -255, 255) + 255).astype(np.intp),
        "is_zero": ~np.any(flat, axis=1),
        "psd": spec,
        "binpsd": {},
        "cos_prev": np.abs(np.clip(cos_prev, -1.0, 1.0)),
        "has_prev": np.arange(t) > 0,
        "corr_adv": np.abs(np.clip(corr_adv, -1.0, 1.0)),
        "has_adv": adv is not None,
        "d": h * w * c,
    }


def _binpsd_rows(feat: dict, factor: float) -> np.ndarray:
    """Centered/normalized flattened binarized PSDs, cached per factor."""
    cache = feat["binpsd"]
    if factor not in cache:
        spec = feat["psd"]
        med = np.median(spec.reshape(spec.shape[0], -1), axis=1)
        rows = (spec > factor * med[:, None, None]).reshape(spec.shape[0], -1).astype(np.float64)
        centered = rows - rows.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(centered, axis=1)
        cache[factor] = (centered, norms)
    return cache[factor]


def log_emission_table(db: ProcedureDB, feat: dict) -> np.ndarray:
    """(T, m) table of log emissions for every change and procedure."""
    t = feat["levels"].shape[0]
    d = feat["d"]
    floor = log_floor(d)
    table = np.empty((t, db.m))
    for j, proc in enumerate(db):
        if proc.kind == "null":
            table[:, j] = np.where(feat["is_zero"], 0.0, floor)
        elif proc.kind == "noise":
            assert isinstance(proc.model, NoiseModel)
            table[:, j] = proc.model.log_pmf[feat["levels"]].sum(axis=1)
        elif proc.kind == "line-search":
            score = (feat["cos_prev"] - 1.0) * d * LN_LEVELS
            table[:, j] = np.where(feat["has_prev"], score, floor)
        elif proc.kind == "interpolation":
            if feat["has_adv"]:
                table[:, j] = (feat["corr_adv"] - 1.0) * d * LN_LEVELS
            else:
                table[:, j] = floor
        else:  # spectral pattern
            assert isinstance(proc.model, PatternModel)
            centered, norms = _binpsd_rows(feat, proc.model.binarize_factor)
            tmpl = proc.model.template.ravel()
            if tmpl.size != centered.shape[1]:
                raise InvalidInputError(
                    f"{proc.id}: template size {tmpl.size} does not match spectrum "
                    f"{centered.shape[1]}")
            tc = tmpl - tmpl.mean()
            tn = np.linalg.norm(tc)
            denom = norms * tn
            match = np.zeros(t)
            np.divide(centered @ tc, denom, out=match, where=denom > 0)
            table[:, j] = (np.abs(np.clip(match, -1.0, 1.0)) - 1.0) * d * LN_LEVELS
    return table
