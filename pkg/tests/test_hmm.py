import itertools
import math

import numpy as np
import pytest

from queryforensics import AttackModel, InvalidInputError, ObservationSequence, \
    Procedure, ProcedureDB, default_transition_init, fit_transition, \
    forward_log_likelihood, gaussian_noise_model, uniform_noise_model, viterbi_decode
from queryforensics.hmm import validate_transition_matrix, viterbi_log_joint

from conftest import random_image

DIMS = (2, 2, 1)


# -- exhaustive path-enumeration oracles ---------------------------------------

def forward_oracle(log_e, a):
    t, m = log_e.shape
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    terms = []
    for path in itertools.product(range(m), repeat=t):
        s = -math.log(m) + log_e[0, path[0]]
        for i in range(1, t):
            s += log_a[path[i - 1], path[i]] + log_e[i, path[i]]
        terms.append(s)
    mx = max(terms)
    if mx == -np.inf:
        return -np.inf
    return mx + math.log(sum(math.exp(v - mx) for v in terms))


def viterbi_oracle(log_e, a):
    """Max-scoring path; among ties the one whose reversed tuple is smallest,
    the order induced by lowest-index tie-breaks in the backward pass."""
    t, m = log_e.shape
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    best_score = -np.inf
    best_paths = []
    for path in itertools.product(range(m), repeat=t):
        s = -math.log(m) + log_e[0, path[0]]
        for i in range(1, t):
            s += log_a[path[i - 1], path[i]] + log_e[i, path[i]]
        if s > best_score:
            best_score, best_paths = s, [path]
        elif s == best_score:
            best_paths.append(path)
    return min(best_paths, key=lambda p: p[::-1]), best_score


def random_instance(rng, m, t):
    """Random noise-only database, transition matrix and observations."""
    procs = []
    for j in range(m):
        pmf = rng.random(511) + 1e-6
        pmf /= pmf.sum()
        from queryforensics import NoiseModel
        procs.append(Procedure(f"S{j}", "noise", NoiseModel(pmf)))
    db = ProcedureDB(procs)
    a = rng.dirichlet(np.ones(m), size=m)
    deltas = np.clip(np.rint(rng.normal(0, 0.1, (t,) + DIMS) * 255), -255, 255) / 255
    obs = ObservationSequence(deltas, None)
    return db, AttackModel("rand", a), obs


def generic_instance(rng, t):
    """Instance over the generic db so NULL/LS/IMG code paths are exercised."""
    db = ProcedureDB.generic()
    a = rng.dirichlet(np.ones(3), size=3)
    deltas = []
    prev = None
    for _ in range(t):
        kind = rng.random()
        if kind < 0.3:
            d = np.zeros(DIMS)
        elif kind < 0.6 and prev is not None:
            d = np.rint(prev * 255 * 0.5) / 255  # collinear-ish with prev
        else:
            d = np.clip(np.rint(rng.normal(0, 0.2, DIMS) * 255), -255, 255) / 255
        deltas.append(d)
        prev = d
    obs = ObservationSequence(np.stack(deltas), random_image(rng, DIMS))
    return db, AttackModel("gen", a), obs


# -- forward -----------------------------------------------------------------

def test_forward_single_state_closed_form(rng):
    db = ProcedureDB([Procedure("NU", "noise", uniform_noise_model())])
    deltas = np.stack([np.clip(np.rint(rng.normal(0, 0.1, DIMS) * 255), -255, 255) / 255
                       for _ in range(7)])
    obs = ObservationSequence(deltas, None)
    attack = AttackModel("one", np.array([[1.0]]))
    d = int(np.prod(DIMS))
    expected = 7 * d * math.log(1 / 511)
    assert forward_log_likelihood(obs, attack, db) == pytest.approx(expected, abs=1e-9)


def test_forward_matches_enumeration(rng):
    for _ in range(30):
        m = int(rng.integers(1, 4))
        t = int(rng.integers(1, 7))
        db, attack, obs = random_instance(rng, m, t)
        log_e = obs.log_emissions(db)
        expected = forward_oracle(log_e, attack.transition)
        assert forward_log_likelihood(obs, attack, db) == pytest.approx(expected, abs=1e-9)


def test_forward_matches_enumeration_generic_db(rng):
    for _ in range(20):
        t = int(rng.integers(2, 7))
        db, attack, obs = generic_instance(rng, t)
        log_e = obs.log_emissions(db)
        expected = forward_oracle(log_e, attack.transition)
        assert forward_log_likelihood(obs, attack, db) == pytest.approx(expected, abs=1e-9)


def test_identity_transition_favors_pure_state_sequences(rng):
    db = ProcedureDB([
        Procedure("S0", "noise", gaussian_noise_model(3.0)),
        Procedure("S1", "noise", gaussian_noise_model(40.0)),
    ])
    ident = AttackModel("ident", np.eye(2))
    uniform = AttackModel("unif", np.full((2, 2), 0.5))
    wins = []
    for k in range(50):
        r = np.random.default_rng(k)
        deltas = np.clip(np.rint(r.normal(0, 40 / 255, (6,) + DIMS) * 255), -255, 255) / 255
        obs = ObservationSequence(deltas, None)
        wins.append(forward_log_likelihood(obs, ident, db)
                    >= forward_log_likelihood(obs, uniform, db))
    assert np.mean(wins) == 1.0


def test_forward_permutation_equivariant(rng):
    db, attack, obs = random_instance(rng, 3, 5)
    base = forward_log_likelihood(obs, attack, db)
    perm = [2, 0, 1]
    db_p = ProcedureDB([db[j] for j in perm])
    a_p = attack.transition[np.ix_(perm, perm)]
    permuted = forward_log_likelihood(obs, AttackModel("p", a_p), db_p)
    assert permuted == pytest.approx(base, abs=1e-9)


# -- viterbi ------------------------------------------------------------------

def test_viterbi_single_state_constant(rng):
    db = ProcedureDB([Procedure("NU", "noise", uniform_noise_model())])
    deltas = np.stack([np.clip(np.rint(rng.normal(0, 0.1, DIMS) * 255), -255, 255) / 255
                       for _ in range(5)])
    obs = ObservationSequence(deltas, None)
    assert viterbi_decode(obs, AttackModel("one", np.array([[1.0]])), db) == ["NU"] * 5


def test_viterbi_matches_enumeration(rng):
    for _ in range(30):
        m = int(rng.integers(1, 4))
        t = int(rng.integers(1, 6))
        db, attack, obs = random_instance(rng, m, t)
        log_e = obs.log_emissions(db)
        expected_path, expected_score = viterbi_oracle(log_e, attack.transition)
        got = viterbi_decode(obs, attack, db)
        assert [db.index_of(p) for p in got] == list(expected_path)
        assert viterbi_log_joint(obs, attack, db) == pytest.approx(expected_score, abs=1e-9)


def test_viterbi_tie_break_matches_oracle(rng):
    # identical emissions everywhere force total ties across all paths
    pmf = np.full(511, 1 / 511)
    from queryforensics import NoiseModel
    db = ProcedureDB([Procedure(f"S{j}", "noise", NoiseModel(pmf)) for j in range(3)])
    a = np.full((3, 3), 1 / 3)
    deltas = np.stack([np.clip(np.rint(rng.normal(0, 0.1, DIMS) * 255), -255, 255) / 255
                       for _ in range(4)])
    obs = ObservationSequence(deltas, None)
    log_e = obs.log_emissions(db)
    expected_path, _ = viterbi_oracle(log_e, a)
    got = viterbi_decode(obs, AttackModel("tie", a), db)
    assert [db.index_of(p) for p in got] == list(expected_path)


def test_viterbi_joint_never_exceeds_forward(rng):
    for _ in range(20):
        db, attack, obs = random_instance(rng, 3, 6)
        assert viterbi_log_joint(obs, attack, db) <= \
            forward_log_likelihood(obs, attack, db) + 1e-12


def test_viterbi_deterministic(rng):
    db, attack, obs = generic_instance(rng, 6)
    assert viterbi_decode(obs, attack, db) == viterbi_decode(obs, attack, db)


# -- fit_transition -------------------------------------------------------------

def _sample_chain(rng, truth, emitters, n):
    m = truth.shape[0]
    states = [int(rng.integers(m))]
    for _ in range(n - 1):
        states.append(int(rng.choice(m, p=truth[states[-1]])))
    sigmas = [emitters[s] for s in states]
    deltas = np.stack([
        np.clip(np.rint(rng.normal(0, s / 255, DIMS) * 255), -255, 255) / 255
        for s in sigmas])
    return states, deltas


def test_fit_recovers_two_state_chain(rng):
    truth_block = np.array([[0.9, 0.1], [0.25, 0.75]])
    db = ProcedureDB([
        Procedure("S0", "noise", gaussian_noise_model(3.0)),
        Procedure("S1", "noise", gaussian_noise_model(45.0)),
    ])
    _, deltas = _sample_chain(rng, truth_block, [3.0, 45.0], 2000)
    obs = ObservationSequence(deltas, None)
    fitted = fit_transition(obs, db, init=default_transition_init(2, seed=1))
    assert np.abs(fitted - truth_block).max() < 0.05


def test_fit_loglik_monotone_from_truth(rng):
    truth = np.array([[0.8, 0.2], [0.3, 0.7]])
    db = ProcedureDB([
        Procedure("S0", "noise", gaussian_noise_model(3.0)),
        Procedure("S1", "noise", gaussian_noise_model(45.0)),
    ])
    _, deltas = _sample_chain(rng, truth, [3.0, 45.0], 400)
    obs = ObservationSequence(deltas, None)
    history = []
    fit_transition(obs, db, init=truth, history=history)
    diffs = np.diff(history)
    assert (diffs >= -1e-8).all()


def test_fit_rows_stochastic(rng):
    db, _, obs = random_instance(rng, 3, 40)
    fitted = fit_transition(obs, db)
    assert np.allclose(fitted.sum(axis=1), 1.0, atol=1e-9)
    assert fitted.min() >= 0.0


def test_fit_unvisited_state_row_uniform(rng):
    # state S2's emissions never fire, so its outgoing row stays unestimated
    db = ProcedureDB([
        Procedure("S0", "noise", gaussian_noise_model(3.0)),
        Procedure("S1", "noise", gaussian_noise_model(45.0)),
        Procedure("NULLISH", "null"),
    ])
    truth = np.array([[0.9, 0.1], [0.2, 0.8]])
    _, deltas = _sample_chain(rng, truth, [3.0, 45.0], 500)
    obs = ObservationSequence(deltas, None)
    fitted = fit_transition(obs, db)
    assert np.allclose(fitted[2], 1 / 3, atol=1e-6)


def test_transition_matrix_validation():
    with pytest.raises(InvalidInputError):
        validate_transition_matrix(np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(InvalidInputError):
        validate_transition_matrix(np.array([[1.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        AttackModel("bad", np.array([[-0.1, 1.1], [0.5, 0.5]]))


def test_observation_sequence_from_trace(rng):
    from queryforensics import Trace
    imgs = [random_image(rng, DIMS) for _ in range(4)]
    trace = Trace(queries=imgs, adv_index=3)
    obs = ObservationSequence.from_trace(trace)
    assert len(obs) == 3
    assert np.allclose(obs.deltas[1], imgs[2].data - imgs[1].data)
