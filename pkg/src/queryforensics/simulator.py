"""Synthetic black-box attack traces with ground-truth procedure labels.

Seven scripted families stand in for real query-based attacks at desk scale.
No classifier is queried: decision feedback is scripted, because everything
under test here is trace structure, not attack success. Each family realizes
a distinctive program over a shared procedure vocabulary:

* noise probes   -- random-walk perturbation steps at one of three scales
                    (per-pixel std 0.10 / 0.030 / 0.008 at 32x32x3), plus a
                    sign-flip probe and a low-frequency-subspace probe. The
                    scales are simulator-owned constants, chosen so probes
                    survive 256-level quantization, extraction keeps recall
                    at r=0.5, and the discovery gain gate separates them.
* pattern steps  -- grid/stripe/square updates with per-trace frequencies
                    or block size, so one trace yields one coherent template.
* line search    -- geometrically decaying collinear steps toward the target.
* interpolation  -- single jumps toward the final adversarial example.

Adaptive decorators emulate evasive strategies: dummy noisy copies,
noise-magnitude scaling, learning-rate scaling, per-query rotation, and the
duplicate-query bug. Rotation leaves the final query untouched so the
epsilon contract holds for every spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .extraction import QueryLog, Trace
from .signal import Image, quantize

FAMILIES = (
    "gauss-grad",      # HSJ-like: small probes, line search, rare big probes
    "subspace-noise",  # GeoDA-like: subspace + mid noise and grid patterns
    "block-pattern",   # Square-like: square block updates
    "ray-search",      # RayS-like: stripe flips and line search
    "sign-step",       # SignOPT-like: probe/line-search alternation, big tail
    "boundary-walk",   # Boundary-like: mid noise walk with contractions
    "evo-grad",        # NES-like: long small-probe batches and jumps
)

ADAPTIVE_KINDS = ("none", "dummy-noise", "scaled-noise", "scaled-lr",
                  "rotation", "duplicate-bug")

DEFAULT_EPSILON = {"l2": 10.0, "linf": 4.0 / 255.0}
DEFAULT_ADAPTIVE_PARAM = {"dummy-noise": 0.10, "scaled-noise": 10.0,
                          "scaled-lr": 5.0, "rotation": 10.0}

# Per-pixel probe scales (std of one walk step).
SIGMA_BIG = 0.10     # "N1": large-constant Gaussian steps
SIGMA_MID = 0.030    # "N3": mid-scale Gaussian steps
SIGMA_SMALL = 0.008  # "N2"/"N4": small-constant Gaussian steps
SIGMA_SIGN = 0.04    # "NS": sign-flip probes at fixed magnitude
SUBSPACE_KEEP = 0.6  # fraction of spectral bins kept by subspace probes


@dataclass(frozen=True)
class SyntheticAttackSpec:
    """Configuration of one synthetic attack run."""

    family: str
    norm: str = "l2"
    epsilon: float | None = None
    max_queries: int = 1000
    adaptive: str = "none"
    adaptive_param: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown family {self.family!r}")
        if self.norm not in ("l2", "linf"):
            raise InvalidInputError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.adaptive not in ADAPTIVE_KINDS:
            raise InvalidInputError(f"unknown adaptive strategy {self.adaptive!r}")
        if self.max_queries < 2:
            raise InvalidInputError("max_queries must be >= 2")
        if self.epsilon is not None and self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")

    @property
    def budget(self) -> float:
        return self.epsilon if self.epsilon is not None else DEFAULT_EPSILON[self.norm]

    @property
    def strategy_param(self) -> float:
        if self.adaptive_param is not None:
            return self.adaptive_param
        return DEFAULT_ADAPTIVE_PARAM.get(self.adaptive, 0.0)

    def variant_name(self) -> str:
        name = f"{self.family}-{self.norm}"
        if self.adaptive != "none":
            name += f"+{self.adaptive}"
        return name


@dataclass
class LabeledTrace:
    """A trace plus one ground-truth procedure label per delta."""

    trace: Trace
    labels: list[str]
    spec: SyntheticAttackSpec

    def __post_init__(self):
        if len(self.labels) != len(self.trace) - 1:
            raise InvalidInputError("labels must cover every delta (trace length - 1)")

    @property
    def injected_null_positions(self) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == "NULL"]


def canonical_variants(seed: int = 0, max_queries: int = 1000) -> list[SyntheticAttackSpec]:
    """The 11 attack variants the synthetic roster mirrors."""
    combos = [
        ("gauss-grad", "l2"), ("gauss-grad", "linf"),
        ("subspace-noise", "l2"), ("subspace-noise", "linf"),
        ("block-pattern", "l2"), ("block-pattern", "linf"),
        ("evo-grad", "l2"), ("evo-grad", "linf"),
        ("ray-search", "linf"), ("sign-step", "l2"), ("boundary-walk", "l2"),
    ]
    return [SyntheticAttackSpec(family=f, norm=n, seed=seed, max_queries=max_queries)
            for f, n in combos]


# -- image material -----------------------------------------------------------


def _smooth_field(rng: np.random.Generator, dims, sigma_spatial: float,
                  std: float, mean: float = 0.5) -> np.ndarray:
    raw = rng.standard_normal(dims)
    smooth = ndimage.gaussian_filter(raw, sigma=(sigma_spatial, sigma_spatial, 0.5))
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-9)
    # squash smoothly into (0.2, 0.8): hard clipping would leave point masses
    # at the walls where pattern steps saturate and distort their spectra
    return mean + 0.3 * np.tanh(smooth * std / 0.26)


def make_clean_image(dims=(32, 32, 3), seed: int = 0) -> Image:
    """A pseudo-natural clean input: a smooth random field."""
    rng = np.random.default_rng(seed)
    return Image(quantize(_smooth_field(rng, dims, sigma_spatial=2.0, std=0.16)))


def make_benign_log(count: int, dims=(32, 32, 3), seed: int = 0) -> QueryLog:
    """Benign traffic: independent smooth fields, pairwise correlation well
    under the extraction threshold with high probability."""
    if count < 0:
        raise InvalidInputError("count must be >= 0")
    if count == 0:
        return QueryLog()
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((count,) + tuple(dims))
    smooth = ndimage.gaussian_filter(raw, sigma=(0, 1.2, 1.2, 0.5))
    flat = smooth.reshape(count, -1)
    flat = (flat - flat.mean(axis=1, keepdims=True)) / np.maximum(
        flat.std(axis=1, keepdims=True), 1e-9)
    images = np.clip(0.5 + 0.18 * flat.reshape(smooth.shape), 0.02, 0.98)
    return QueryLog(timestamps=list(range(count)),
                    images=[Image(quantize(img)) for img in images])


def _adversarial_target(rng: np.random.Generator, clean: Image, norm: str,
                        epsilon: float) -> Image:
    dims = clean.dims
    field = _smooth_field(rng, dims, sigma_spatial=1.5, std=1.0, mean=0.0) - 0.5
    field -= field.mean()
    if norm == "linf":
        pert = np.clip(field * (4.0 * epsilon / max(np.abs(field).max(), 1e-9)),
                       -epsilon, epsilon)
        adv = quantize(np.clip(clean.data + pert, 0.0, 1.0))
        # requantization cannot push past the budget when epsilon is on-grid,
        # but clamp pixelwise to be safe
        adv = np.clip(adv, np.maximum(clean.data - epsilon, 0.0),
                      np.minimum(clean.data + epsilon, 1.0))
        adv = quantize(adv)
    else:
        scale = 0.9 * epsilon / max(np.linalg.norm(field), 1e-9)
        adv = quantize(np.clip(clean.data + field * scale, 0.0, 1.0))
        while np.linalg.norm(adv - clean.data) > epsilon:
            field *= 0.9
            adv = quantize(np.clip(clean.data + field * scale, 0.0, 1.0))
    target = Image(adv)
    if target == clean:  # degenerate budget; force one representable level
        bumped = clean.data.copy()
        bumped[0, 0, 0] = min(1.0, bumped[0, 0, 0] + 1.0 / 255.0)
        target = Image(bumped)
    return target


# -- trace builder ------------------------------------------------------------


class _Builder:
    """Accumulates quantized queries and per-delta labels under a budget."""

    def __init__(self, rng: np.random.Generator, clean: Image, target: Image,
                 max_queries: int, lr_scale: float = 1.0, noise_scale: float = 1.0):
        self.rng = rng
        self.clean = clean.data
        self.target = target.data
        self.dims = clean.dims
        self.max_queries = max_queries
        self.lr = lr_scale
        self.noise = noise_scale
        self.queries: list[np.ndarray] = []
        self.labels: list[str] = []
        self.axis: np.ndarray | None = None  # set on the first content step
        self.axis_pos = 0.0  # accumulated displacement along the axis

    @property
    def current(self) -> np.ndarray:
        return self.queries[-1]

    def distance(self) -> np.ndarray:
        return self.target - self.current

    def room(self, reserve: int = 1) -> int:
        return self.max_queries - len(self.queries) - reserve

    def push(self, arr: np.ndarray, label: str | None) -> bool:
        if self.max_queries - len(self.queries) <= 0:
            return False
        q = quantize(np.clip(arr, 0.0, 1.0))
        if self.queries:
            if label != "NULL" and np.array_equal(q, self.current):
                return True  # quantization collapsed the step; skip silently
            self.queries.append(q)
            self.labels.append(label or "NULL")
        else:
            self.queries.append(q)
        return True

    # probe steps: a random walk, so consecutive deltas stay independent
    # (star-probing around a fixed base would anticorrelate them at -0.5 and
    # hand every probe block to the line-search state)

    def walk_block(self, count: int, label: str, sampler) -> None:
        for _ in range(count):
            if self.room() <= 0:
                return
            self.push(self.current + self.noise * sampler(), label)

    def eta_gaussian(self, sigma: float):
        return lambda: self.rng.standard_normal(self.dims) * sigma

    def eta_sign(self, magnitude: float):
        return lambda: np.sign(self.rng.standard_normal(self.dims)) * magnitude

    def eta_subspace(self, sigma: float, keep: float = SUBSPACE_KEEP):
        h, w, _ = self.dims
        side = int(np.sqrt(keep) * h / 2)
        fy = np.fft.fftfreq(h) * h
        fx = np.fft.fftfreq(w) * w
        mask = (np.abs(fy)[:, None] <= side) & (np.abs(fx)[None, :] <= side)

        def sample():
            white = self.rng.standard_normal(self.dims)
            spec = np.fft.fft2(white, axes=(0, 1)) * mask[:, :, None]
            band = np.real(np.fft.ifft2(spec, axes=(0, 1)))
            return band / max(band.std(), 1e-9) * sigma
        return sample

    # content-coupled steps. The attack explores along the clean-to-target
    # axis: steps stay image-correlated and spectrally concentrated for the
    # whole trace instead of degenerating into drift corrections, and the
    # final convergence onto the target happens in finish().

    def _content_axis(self) -> np.ndarray:
        if self.axis is None:
            direction = self.target - self.queries[0]
            rms = float(np.sqrt(np.mean(direction ** 2)))
            self.axis = direction / max(rms, 1e-9)
        return self.axis

    def _content_label(self, delta: np.ndarray, fallback: str) -> str:
        flat = delta.ravel()
        adv = self.target.ravel()
        fc = flat - flat.mean()
        ac = adv - adv.mean()
        denom = np.linalg.norm(fc) * np.linalg.norm(ac)
        if denom == 0:
            return fallback
        return "IMG" if abs(float(fc @ ac / denom)) >= 0.35 else fallback

    def _axis_sign(self) -> float:
        # keep the accumulated axis displacement bounded: runaway stepping
        # saturates pixels at the [0, 1] walls and distorts the spectra
        if abs(self.axis_pos) > 0.15:
            return -float(np.sign(self.axis_pos))
        return float(self.rng.choice([-1.0, 1.0]))

    def img_jump(self, fallback: str = "NW") -> None:
        if self.room() <= 0:
            return
        rms = self.rng.uniform(0.06, 0.10) * min(self.lr, 3.0)
        sign = self._axis_sign()
        delta = sign * rms * self._content_axis()
        if self.push(self.current + delta, self._content_label(delta, fallback)):
            self.axis_pos += sign * rms

    def ls_run(self, count: int, first_label: str = "IMG",
               fallback: str = "NW") -> None:
        # collinear constant-scale probing along the content axis; strict
        # sign alternation brackets the boundary without drifting
        rms = self.rng.uniform(0.07, 0.10) * min(self.lr, 3.0)
        direction = rms * self._content_axis()
        label = first_label
        sign = self._axis_sign()
        for _ in range(count):
            if self.room() <= 0:
                return
            delta = sign * direction
            if label == "IMG":
                label = self._content_label(delta, fallback)
            self.push(self.current + delta, label)
            self.axis_pos += sign * rms
            sign = -sign
            label = "LS"

    def pattern_block(self, count: int, label: str, sampler) -> None:
        for _ in range(count):
            if self.room() <= 0:
                return
            self.push(self.current + self.lr * sampler(), label)

    def warmup(self) -> None:
        sampler = self.eta_gaussian(0.16)
        for _ in range(3):
            if self.room() <= 0:
                return
            self.push(self.current + sampler(), "NW")

    def finish(self, fallback: str = "NW") -> None:
        # contract the remaining distance in a couple of interpolation hops,
        # then land exactly on the adversarial example
        for frac in (0.5, 0.5):
            if self.room() > 0:
                delta = frac * self.distance()
                self.push(self.current + delta, self._content_label(delta, fallback))
        if not np.array_equal(self.current, self.target):
            if self.max_queries - len(self.queries) <= 0 and len(self.queries) >= 2:
                # replace the last wander step so the budget still ends at adv
                self.queries.pop()
                self.labels.pop()
            delta = self.distance()
            self.push(self.target, self._content_label(delta, fallback))


# -- family programs ----------------------------------------------------------


def _pattern_grid(rng, dims, with_dc: bool, row_freqs, col_freqs):
    """Horizontal+vertical spectral grid: two row and two column frequencies
    plus their products. The frequencies are family constants (the pattern is
    intrinsic to the attack's update rule, not to one run) and only the six
    signs vary per step, so the block's PSD stays constant and consecutive
    steps are almost never collinear."""
    h, w, c = dims
    rows = [np.cos(2 * np.pi * f * np.arange(h) / h)[:, None, None] for f in row_freqs]
    cols = [np.cos(2 * np.pi * g * np.arange(w) / w)[None, :, None] for g in col_freqs]
    terms = rows + cols + [rows[0] * cols[0], rows[1] * cols[1]]

    def sample():
        signs = rng.choice([-1.0, 1.0], size=len(terms))
        delta = 0.035 * sum(s * t for s, t in zip(signs, terms)) * np.ones((1, 1, c))
        if with_dc:
            delta = delta + 0.05 * rng.choice([-1.0, 1.0])
        # gradient-estimation dither; also pins the spectral floor so the
        # median-relative binarization threshold is stable
        return delta + rng.normal(0.0, 0.012, (h, w, c))
    return sample


def _pattern_square(rng, dims, size_lo: int, size_hi: int, amp: float):
    """Square block update at a random position; size fixed per trace, so the
    shift-invariant magnitude spectrum is identical across the block."""
    h, w, c = dims
    size = int(rng.integers(size_lo, size_hi + 1))

    def sample():
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        delta = np.zeros(dims)
        delta[y:y + size, x:x + size, :] = amp * rng.choice([-1.0, 1.0], size=(1, 1, c))
        return delta + rng.normal(0.0, 0.012, dims)
    return sample


def _pattern_stripes(rng, dims, with_dc: bool, freqs):
    """Vertical stripes mixing a fixed set of column frequencies at equal
    magnitude; only the phases vary per step. The frequency comb is a family
    constant, so the spectrum is stable across steps and runs, binarized
    masks reproduce exactly, and consecutive steps are not collinear."""
    h, w, c = dims
    x = np.arange(w)

    def sample():
        phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
        wave = sum(np.cos(2 * np.pi * f * x / w + p) for f, p in zip(freqs, phases))
        delta = 0.022 * wave[None, :, None] * np.ones((h, 1, c))
        if with_dc:
            delta = delta + 0.05 * rng.choice([-1.0, 1.0])
        return delta + rng.normal(0.0, 0.012, (h, w, c))
    return sample


def _run_gauss_grad(b: _Builder, linf: bool) -> None:
    # per-trace style: how often the big re-sampling probes fire and how
    # long the probe batches run varies between runs of the same attack
    rng = b.rng
    probe = b.eta_sign(SIGMA_SIGN) if linf else b.eta_gaussian(SIGMA_SMALL)
    probe_label = "NS" if linf else "N2"
    p_big = rng.uniform(0.08, 0.45)
    p_ls = rng.uniform(0.35, 0.75)
    probe_lo = int(rng.integers(9, 14))
    b.warmup()
    while b.room(reserve=6) > 8:
        b.walk_block(int(rng.integers(probe_lo, probe_lo + 6)), probe_label, probe)
        b.img_jump(fallback=probe_label)
        if rng.random() < p_ls:
            b.ls_run(int(rng.integers(2, 5)), first_label="LS")
        if rng.random() < p_big and b.room(reserve=6) > 8:
            b.walk_block(int(rng.integers(3, 7)), "N1", b.eta_gaussian(SIGMA_BIG))
            b.img_jump(fallback="N1")
    b.finish(fallback=probe_label)


def _run_subspace(b: _Builder, linf: bool) -> None:
    rng = b.rng
    if linf:
        grid = _pattern_grid(rng, b.dims, with_dc=True, row_freqs=(2, 4), col_freqs=(1, 3))
    else:
        grid = _pattern_grid(rng, b.dims, with_dc=False, row_freqs=(1, 3), col_freqs=(2, 4))
    label = "P2" if linf else "P1"
    p_mid = rng.uniform(0.4, 1.0)
    p_ls = rng.uniform(0.2, 0.8)
    b.warmup()
    while b.room(reserve=6) > 8:
        b.walk_block(int(rng.integers(8, 15)), "N4", b.eta_subspace(SIGMA_SMALL))
        b.pattern_block(int(rng.integers(3, 6)), label, grid)
        if rng.random() < p_mid:
            b.walk_block(int(rng.integers(4, 9)), "N3", b.eta_gaussian(SIGMA_MID))
            b.pattern_block(int(rng.integers(2, 5)), label, grid)
        if rng.random() < p_ls:
            b.ls_run(int(rng.integers(2, 5)), first_label="IMG", fallback="N3")
    b.finish(fallback="N3")


def _run_block_pattern(b: _Builder, linf: bool) -> None:
    rng = b.rng
    square = _pattern_square(rng, b.dims, 16, 22, 0.05) if linf else \
        _pattern_square(rng, b.dims, 8, 14, 0.18)
    b.warmup()
    iteration = 0
    while b.room(reserve=6) > 8:
        b.pattern_block(int(rng.integers(10, 19)), "P3", square)
        if linf or iteration % 2 == 1:
            b.img_jump(fallback="P3")
        iteration += 1
    b.finish(fallback="P3")


def _run_ray_search(b: _Builder) -> None:
    rng = b.rng
    plain = _pattern_stripes(rng, b.dims, with_dc=False,
                             freqs=(2, 4, 5, 7, 9, 11, 13, 15))
    dc = _pattern_stripes(rng, b.dims, with_dc=True,
                          freqs=(1, 3, 6, 8, 10, 12, 14, 15))
    b.warmup()
    while b.room(reserve=6) > 8:
        b.pattern_block(int(rng.integers(3, 7)), "P5", plain)
        b.ls_run(int(rng.integers(3, 6)), first_label="IMG", fallback="P5")
        b.pattern_block(int(rng.integers(3, 7)), "P4", dc)
        b.ls_run(int(rng.integers(3, 6)), first_label="IMG", fallback="P4")
    b.finish(fallback="P5")


def _run_sign_step(b: _Builder) -> None:
    rng = b.rng
    tail = int(rng.integers(8, 21))
    probe_hi = int(rng.integers(6, 9))
    b.warmup()
    while b.room(reserve=6 + tail) > 8:
        b.walk_block(int(rng.integers(3, probe_hi)), "N4", b.eta_subspace(SIGMA_SMALL))
        b.ls_run(int(rng.integers(2, 5)), first_label="IMG", fallback="N4")
    b.walk_block(tail, "N1", b.eta_gaussian(SIGMA_BIG))
    b.finish(fallback="N1")


def _run_boundary_walk(b: _Builder) -> None:
    rng = b.rng
    p_ls = rng.uniform(0.1, 0.7)
    walk_lo = int(rng.integers(4, 8))
    b.warmup()
    while b.room(reserve=6) > 8:
        b.walk_block(int(rng.integers(walk_lo, walk_lo + 5)), "N3",
                     b.eta_gaussian(SIGMA_MID))
        b.img_jump(fallback="N3")
        if rng.random() < p_ls:
            b.ls_run(2, first_label="LS")
    b.finish(fallback="N3")


def _run_evo_grad(b: _Builder, linf: bool) -> None:
    rng = b.rng
    probe = b.eta_sign(SIGMA_SIGN) if linf else b.eta_gaussian(SIGMA_SMALL)
    label = "NS" if linf else "N2"
    p_ls = rng.uniform(0.2, 0.6)
    block_lo = int(rng.integers(10, 18))
    b.warmup()
    while b.room(reserve=6) > 8:
        b.walk_block(int(rng.integers(block_lo, block_lo + 7)), label, probe)
        b.img_jump(fallback=label)
        if rng.random() < p_ls:
            b.ls_run(2, first_label="LS")
    b.finish(fallback=label)


_PROGRAMS = {
    "gauss-grad": lambda b, linf: _run_gauss_grad(b, linf),
    "subspace-noise": lambda b, linf: _run_subspace(b, linf),
    "block-pattern": lambda b, linf: _run_block_pattern(b, linf),
    "ray-search": lambda b, linf: _run_ray_search(b),
    "sign-step": lambda b, linf: _run_sign_step(b),
    "boundary-walk": lambda b, linf: _run_boundary_walk(b),
    "evo-grad": lambda b, linf: _run_evo_grad(b, linf),
}


# -- adaptive decorators ------------------------------------------------------


def _decorate_dummy_noise(queries, labels, rng, sigma):
    out_q = [queries[0]]
    out_l: list[str] = []
    for i in range(1, len(queries)):
        prev_real = queries[i - 1]
        if i < len(queries) - 1:  # never occlude the final adversarial example
            dummy = quantize(np.clip(
                prev_real + rng.standard_normal(prev_real.shape) * sigma, 0, 1))
            if not np.array_equal(dummy, out_q[-1]):
                out_q.append(dummy)
                out_l.append("N-DUMMY")
        out_q.append(queries[i])
        out_l.append(labels[i - 1] if np.array_equal(out_q[-2], prev_real)
                     else "N-DUMMY")
    return out_q, out_l


def _decorate_duplicates(queries, labels):
    out_q = [queries[0]]
    out_l: list[str] = []
    for i in range(1, len(queries)):
        out_q.append(queries[i])
        out_l.append(labels[i - 1])
        if i < len(queries) - 1:
            out_q.append(queries[i])
            out_l.append("NULL")
    # one extra duplicate of the first query keeps identical pairs at >= 50%
    out_q.insert(1, queries[0])
    out_l.insert(0, "NULL")
    return out_q, out_l


def _decorate_rotation(queries, labels, rng, theta_deg):
    out_q = []
    for i, q in enumerate(queries):
        if i == len(queries) - 1:
            out_q.append(q)  # the submitted adversarial example is not rotated
            continue
        angle = rng.uniform(-theta_deg, theta_deg)
        rotated = ndimage.rotate(q, angle, axes=(1, 0), reshape=False, order=1,
                                 mode="nearest")
        out_q.append(quantize(np.clip(rotated, 0.0, 1.0)))
    return out_q, list(labels)


def simulate(spec: SyntheticAttackSpec, clean: Image) -> LabeledTrace:
    """Generate one labeled attack trace; deterministic given (spec, clean)."""
    rng = np.random.default_rng(spec.seed)
    target = _adversarial_target(rng, clean, spec.norm, spec.budget)

    lr_scale = 1.0
    noise_scale = 1.0
    if spec.adaptive == "scaled-lr":
        lr_scale = spec.strategy_param
    elif spec.adaptive == "scaled-noise":
        noise_scale = spec.strategy_param

    builder = _Builder(rng, clean, target, spec.max_queries,
                       lr_scale=lr_scale, noise_scale=noise_scale)
    start = 0.6 * clean.data + 0.4 * _smooth_field(rng, clean.dims, 2.0, 0.16)
    builder.push(start, None)
    _PROGRAMS[spec.family](builder, spec.norm == "linf")

    # Decorators run on top of the base budget: evading forensics costs the
    # attacker extra queries, so decorated traces may exceed max_queries.
    queries, labels = builder.queries, builder.labels
    if spec.adaptive == "dummy-noise":
        queries, labels = _decorate_dummy_noise(queries, labels, rng,
                                                spec.strategy_param)
    elif spec.adaptive == "duplicate-bug":
        queries, labels = _decorate_duplicates(queries, labels)
    elif spec.adaptive == "rotation":
        queries, labels = _decorate_rotation(queries, labels, rng,
                                             spec.strategy_param)

    trace = Trace(queries=[Image(q) for q in queries],
                  adv_index=len(queries) - 1)
    return LabeledTrace(trace=trace, labels=labels, spec=spec)


def embed_in_log(trace: Trace, benign: QueryLog, seed: int = 0
                 ) -> tuple[QueryLog, list[int]]:
    """Interleave a trace into benign traffic at random positions, preserving
    trace order. Returns the mixed log and the trace's log indices."""
    rng = np.random.default_rng(seed)
    total = len(trace) + len(benign)
    positions = np.sort(rng.choice(total, size=len(trace), replace=False))
    trace_at = {int(p): i for i, p in enumerate(positions)}
    images = []
    benign_iter = iter(benign.images)
    for slot in range(total):
        if slot in trace_at:
            images.append(trace.queries[trace_at[slot]])
        else:
            images.append(next(benign_iter))
    log = QueryLog(timestamps=list(range(total)), images=images)
    return log, [int(p) for p in positions]
