"""Forensic attribution, explanation, and fingerprinting of query-based
black-box attack traces."""

__version__ = "0.1.0"

from .attribution import AttackDB, AttributionReport, attribute, explain
from .discovery import Cluster, DiscoveryConfig, enroll_attack, gain, gain_improves, \
    classify_cluster, segment_and_merge
from .errors import DegenerateTemplateError, IncompatibleDatabaseError, InvalidInputError
from .extraction import QueryLog, Trace, downscale, extract_trace
from .fingerprint import Fingerprint, FingerprintDB, fingerprint_trace, match_fingerprint
from .hmm import AttackModel, ObservationSequence, default_transition_init, \
    fit_transition, forward_log_likelihood, viterbi_decode
from .procedures import NoiseModel, PatternModel, Procedure, ProcedureDB, \
    estimate_noise_pmf, extract_template, gaussian_noise_model, log_emission, \
    uniform_noise_model
from .signal import Image, binarize, cosine_sim, delta_between, mse, pearson, psd2, quantize
from .simulator import LabeledTrace, SyntheticAttackSpec, canonical_variants, \
    embed_in_log, make_benign_log, make_clean_image, simulate
from .workspace import Workspace

__all__ = [
    "AttackDB", "AttackModel", "AttributionReport", "Cluster", "DiscoveryConfig",
    "DegenerateTemplateError", "Fingerprint", "FingerprintDB", "Image",
    "IncompatibleDatabaseError", "InvalidInputError", "LabeledTrace", "NoiseModel",
    "ObservationSequence", "PatternModel", "Procedure", "ProcedureDB", "QueryLog",
    "SyntheticAttackSpec", "Trace", "Workspace", "attribute", "binarize",
    "canonical_variants", "classify_cluster", "cosine_sim", "default_transition_init",
    "delta_between", "downscale", "embed_in_log", "enroll_attack", "estimate_noise_pmf",
    "explain", "extract_template", "extract_trace", "fingerprint_trace",
    "fit_transition", "forward_log_likelihood", "gain", "gain_improves",
    "gaussian_noise_model", "log_emission", "make_benign_log", "make_clean_image",
    "match_fingerprint", "mse", "pearson", "psd2", "quantize", "segment_and_merge",
    "simulate", "uniform_noise_model", "viterbi_decode",
]
