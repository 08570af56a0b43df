"""Cargo-flow and spot-rate uncertainty.

Counts are Poisson with intensities driven by an INGARCH-type recursion.
Cross-sectional dependence comes from a Gaussian copula: every exponential
inter-arrival term ``l`` of every flow dimension is built from the same
correlated normal vector, and a dimension's count is the number of its
cumulative exponential terms that stay at or below one.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .core import Instance, StageRealization, ValidationError

_U_MAX = np.nextafter(1.0, 0.0)
_U_MIN = np.finfo(float).tiny


def _path_key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RandomStream:
    """A seed plus a path; equal (seed, path) pairs produce equal draws."""

    seed: int
    path: tuple = ()

    def child(self, *parts) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(_path_key(p) for p in self.path))
        return np.random.Generator(np.random.PCG64(seq))

    def describe(self) -> str:
        return "/".join(str(p) for p in (self.seed,) + self.path)


@dataclass(frozen=True)
class IntensityModel:
    """Per-dimension recursion ``lam_t = base + fb_int*lam_{t-1} + fb_count*count_{t-1} + coef @ z_t``.

    Dimensions are ordered entry hubs first, then exit hubs. ``covariates``
    has shape (stages, dims, p) and ``covariate_coef`` shape (dims, p).
    """

    base: np.ndarray
    intensity_feedback: np.ndarray
    count_feedback: np.ndarray
    covariate_coef: np.ndarray | None = None
    covariates: np.ndarray | None = None

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        fb1 = np.broadcast_to(np.asarray(self.intensity_feedback, dtype=float), base.shape).copy()
        fb2 = np.broadcast_to(np.asarray(self.count_feedback, dtype=float), base.shape).copy()
        if np.any(base <= 0):
            raise ValidationError("base intensities must be positive")
        if np.any(fb1 < 0) or np.any(fb2 < 0) or np.any(fb1 + fb2 >= 1):
            raise ValidationError("feedback coefficients must be nonnegative with sum below 1")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "intensity_feedback", fb1)
        object.__setattr__(self, "count_feedback", fb2)
        if (self.covariate_coef is None) != (self.covariates is None):
            raise ValidationError("covariate_coef and covariates must be given together")
        if self.covariates is not None:
            coef = np.asarray(self.covariate_coef, dtype=float)
            z = np.asarray(self.covariates, dtype=float)
            if coef.shape[0] != base.size or z.ndim != 3 or z.shape[1:] != coef.shape:
                raise ValidationError("covariate arrays do not match the dimension count")
            object.__setattr__(self, "covariate_coef", coef)
            object.__setattr__(self, "covariates", z)

    @classmethod
    def constant(cls, rates) -> "IntensityModel":
        rates = np.asarray(rates, dtype=float)
        return cls(rates, np.zeros_like(rates), np.zeros_like(rates))

    @property
    def dim(self) -> int:
        return self.base.size

    def covariate_term(self, t: int) -> np.ndarray:
        if self.covariates is None:
            return np.zeros(self.dim)
        z = self.covariates[min(t, self.covariates.shape[0]) - 1]
        return np.einsum("dp,dp->d", self.covariate_coef, z)

    def stationary(self, t: int) -> np.ndarray:
        """Fixed point of the recursion with stage-``t`` covariates held constant."""
        return (self.base + self.covariate_term(t)) / (1.0 - self.intensity_feedback - self.count_feedback)


def intensity_step(prev_intensity, prev_count, covariates, base, intensity_feedback, count_feedback, covariate_coef=None):
    """One step of the autoregressive intensity recursion."""
    prev_intensity = np.asarray(prev_intensity, dtype=float)
    prev_count = np.asarray(prev_count, dtype=float)
    if np.any(prev_intensity < 0) or np.any(prev_count < 0):
        raise ValidationError("previous intensity and count must be nonnegative")
    lam = base + intensity_feedback * prev_intensity + count_feedback * prev_count
    if covariate_coef is not None:
        lam = lam + np.sum(np.asarray(covariate_coef) * np.asarray(covariates), axis=-1)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValidationError("intensity recursion produced a nonpositive rate")
    return lam if lam.ndim else float(lam)


def _psd_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == cov``, allowing zero pivots."""
    n = cov.shape[0]
    low = np.zeros_like(cov)
    for j in range(n):
        d = cov[j, j] - low[j, :j] @ low[j, :j]
        if d <= 1e-12 * cov[j, j]:
            continue
        low[j, j] = np.sqrt(d)
        low[j + 1:, j] = (cov[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


@dataclass(frozen=True)
class CopulaSpec:
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValidationError("covariance must be a square matrix")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValidationError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-10:
            raise ValidationError(f"covariance is not positive semidefinite (min eigenvalue {eig.min():.3e})")
        if np.any(np.diag(cov) <= 0):
            raise ValidationError("covariance diagonal must be positive")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_root", _psd_cholesky(cov))
        object.__setattr__(self, "_scale", np.sqrt(np.diag(cov)))

    @classmethod
    def identity(cls, dim: int) -> "CopulaSpec":
        return cls(np.eye(dim))

    @classmethod
    def equicorrelated(cls, dim: int, rho: float) -> "CopulaSpec":
        return cls((1.0 - rho) * np.eye(dim) + rho * np.ones((dim, dim)))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def normals(self, rng: np.random.Generator, size) -> np.ndarray:
        """Correlated normal vectors with shape ``size + (dim,)``."""
        size = (size,) if np.isscalar(size) else tuple(size)
        z = rng.standard_normal(size + (self.dim,))
        return z @ self._root.T

    def uniforms(self, rng: np.random.Generator, size) -> np.ndarray:
        return np.clip(ndtr(self.normals(rng, size) / self._scale), _U_MIN, _U_MAX)


def sample_copula_uniforms(copula: CopulaSpec, stream, size=None) -> np.ndarray:
    """Uniform vector(s) on (0,1)^dim whose dependence is the Gaussian copula of the covariance."""
    rng = stream.generator() if isinstance(stream, RandomStream) else stream
    if size is None:
        return copula.uniforms(rng, 1)[0]
    return copula.uniforms(rng, size)


def poisson_count_from_uniforms(rate: float, uniforms) -> int:
    """Number of unit-rate arrivals in ``[0, 1]`` built from successive uniforms."""
    if rate < 0:
        raise ValidationError("rate must be nonnegative")
    if rate == 0:
        return 0
    total = 0.0
    count = 0
    for u in uniforms:
        if not 0.0 < u < 1.0:
            raise ValidationError(f"uniform {u} outside (0, 1)")
        total += -np.log(u) / rate
        if total > 1.0:
            return count
        count += 1
    raise ValidationError("uniform stream exhausted before the threshold was crossed")


def counts_from_uniform_terms(rates: np.ndarray, terms: np.ndarray) -> tuple[np.ndarray, bool]:
    """Counts for uniform terms of shape (samples, terms, dims).

    Returns the counts and whether every dimension crossed the threshold.
    """
    with np.errstate(divide="ignore"):
        exps = -np.log(terms) / rates
    cum = np.cumsum(exps, axis=1)
    counts = np.sum(cum <= 1.0, axis=1)
    crossed = bool(np.all((cum[:, -1, :] > 1.0) | (rates == 0)))
    return counts, crossed


def sample_flow_counts(rates, copula: CopulaSpec, rng: np.random.Generator, n: int, chunk: int = 256) -> np.ndarray:
    """``n`` joint Poisson count vectors with the given rates; shape (n, dims)."""
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (copula.dim,):
        raise ValidationError(f"{rates.size} rates for a {copula.dim}-dimensional copula")
    if np.any(rates < 0):
        raise ValidationError("rates must be nonnegative")
    out = np.zeros((n, rates.size), dtype=np.int64)
    lam = rates.max()
    if lam == 0:
        return out
    block = int(lam + 6.0 * np.sqrt(lam) + 16)
    for start in range(0, n, chunk):
        size = min(chunk, n - start)
        terms = copula.uniforms(rng, (size, block))
        counts, crossed = counts_from_uniform_terms(rates, terms)
        while not crossed:
            # rare: extend every sample in the chunk with more terms
            terms = np.concatenate([terms, copula.uniforms(rng, (size, block))], axis=1)
            counts, crossed = counts_from_uniform_terms(rates, terms)
        out[start:start + size] = counts
    return out


def sample_flows(t: int, intensities, copula: CopulaSpec, stream, n_entry: int | None = None):
    """One joint draw of (inflow, outflow) counts for stage ``t``."""
    rng = stream.generator() if isinstance(stream, RandomStream) else stream
    counts = sample_flow_counts(intensities, copula, rng, 1)[0].astype(float)
    if n_entry is None:
        n_entry = counts.size // 2
    return counts[:n_entry], counts[n_entry:]


def sample_spot_rates(instance: Instance, t: int, stream, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValidationError("spot rate bounds must satisfy lo <= hi")
    rng = stream.generator() if isinstance(stream, RandomStream) else stream
    return rng.uniform(lo, hi, size=(instance.n_carriers, instance.n_lanes))


@dataclass(frozen=True)
class FlowModel:
    intensity: IntensityModel
    copula: CopulaSpec

    def __post_init__(self):
        if self.intensity.dim != self.copula.dim:
            raise ValidationError("intensity model and copula differ in dimension")

    @classmethod
    def constant(cls, instance: Instance, rate: float | None = None, rho: float = 0.0) -> "FlowModel":
        dim = instance.n_entry + instance.n_exit
        rate = instance.flow_rate if rate is None else rate
        return cls(IntensityModel.constant(np.full(dim, float(rate))), CopulaSpec.equicorrelated(dim, rho))


@dataclass
class ScenarioLattice:
    stages: list  # per stage: list of StageRealization
    probabilities: list  # per stage: np.ndarray

    def __post_init__(self):
        if len(self.stages) != len(self.probabilities):
            raise ValidationError("stages and probabilities differ in length")
        for t, (nodes, probs) in enumerate(zip(self.stages, self.probabilities), start=1):
            probs = np.asarray(probs, dtype=float)
            if not nodes:
                raise ValidationError(f"stage {t} has no realizations")
            if probs.shape != (len(nodes),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ValidationError(f"stage {t} probabilities must be nonnegative and sum to 1")
            self.probabilities[t - 1] = probs

    @property
    def horizon(self) -> int:
        return len(self.stages)

    def size(self, t: int) -> int:
        return len(self.stages[t - 1])

    def realizations(self, t: int) -> list:
        return self.stages[t - 1]

    def probs(self, t: int) -> np.ndarray:
        return self.probabilities[t - 1]

    def n_paths(self) -> int:
        return int(np.prod([len(s) for s in self.stages]))

    def path(self, indices: Sequence[int]) -> tuple:
        return tuple(self.stages[t][k] for t, k in enumerate(indices))

    def digest(self) -> str:
        h = hashlib.sha256()
        for nodes, probs in zip(self.stages, self.probabilities):
            h.update(np.asarray(probs).tobytes())
            for xi in nodes:
                for arr in (xi.inflow, xi.outflow, xi.spot_rate):
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def deterministic(cls, scenario: Sequence[StageRealization]) -> "ScenarioLattice":
        return cls([[xi] for xi in scenario], [np.ones(1) for _ in scenario])


def build_lattice(
    instance: Instance,
    flow_model: FlowModel,
    spot_bounds: tuple | None,
    realizations_per_stage: int,
    stream: RandomStream,
) -> ScenarioLattice:
    """Stagewise-independent lattice with intensities held at their stationary values."""
    n = int(realizations_per_stage)
    if n < 1:
        raise ValidationError("realizations_per_stage must be at least 1")
    lo, hi = instance.spot_rate_range if spot_bounds is None else spot_bounds
    stages, probs = [], []
    for t in range(1, instance.horizon + 1):
        rates = flow_model.intensity.stationary(t)
        flow_rng = stream.child("lattice-flows", t).generator()
        counts = sample_flow_counts(rates, flow_model.copula, flow_rng, n).astype(float)
        spot_rng = stream.child("lattice-spot", t).generator()
        nodes = [
            StageRealization(c[:instance.n_entry], c[instance.n_entry:], sample_spot_rates(instance, t, spot_rng, lo, hi))
            for c in counts
        ]
        stages.append(nodes)
        probs.append(np.full(n, 1.0 / n))
    return ScenarioLattice(stages, probs)


def simulate_scenario(
    instance: Instance, flow_model: FlowModel, spot_bounds: tuple | None, stream: RandomStream
) -> tuple:
    """One full-horizon path; intensities follow the autoregressive recursion."""
    lo, hi = instance.spot_rate_range if spot_bounds is None else spot_bounds
    model = flow_model.intensity
    rng = stream.generator()
    lam = model.stationary(1)
    prev_count = lam.copy()
    path = []
    for t in range(1, instance.horizon + 1):
        if t > 1:
            z = model.covariates[min(t, model.covariates.shape[0]) - 1] if model.covariates is not None else None
            lam = intensity_step(lam, prev_count, z, model.base, model.intensity_feedback,
                                 model.count_feedback, model.covariate_coef)
        counts = sample_flow_counts(lam, flow_model.copula, rng, 1)[0].astype(float)
        path.append(StageRealization(counts[:instance.n_entry], counts[instance.n_entry:],
                                     sample_spot_rates(instance, t, rng, lo, hi)))
        prev_count = counts
    return tuple(path)


def simulate_scenarios(
    instance: Instance, flow_model: FlowModel, spot_bounds: tuple | None, count: int, stream: RandomStream
) -> list:
    return [simulate_scenario(instance, flow_model, spot_bounds, stream.child("scenario", m)) for m in range(count)]


def lattice_paths(lattice: ScenarioLattice):
    """Every (probability, path) pair of a lattice, in lexicographic order."""
    sizes = [lattice.size(t) for t in range(1, lattice.horizon + 1)]
    for idx in np.ndindex(*sizes):
        p = float(np.prod([lattice.probs(t + 1)[k] for t, k in enumerate(idx)]))
        yield p, lattice.path(idx)


def panel_table(scenario: Sequence[StageRealization], instance: Instance) -> str:
    """Delimited ``stage,dimension,value`` table of a scenario's flows and spot rates."""
    buf = io.StringIO()
    buf.write("stage,dimension,value\n")
    for t, xi in enumerate(scenario, start=1):
        for i, hub in enumerate(instance.entry_hubs):
            buf.write(f"{t},inflow:{hub},{float(xi.inflow[i])!r}\n")
        for j, hub in enumerate(instance.exit_hubs):
            buf.write(f"{t},outflow:{hub},{float(xi.outflow[j])!r}\n")
        for k, carrier in enumerate(instance.carriers):
            for lane in range(instance.n_lanes):
                buf.write(f"{t},spot:{carrier.id}:{lane},{float(xi.spot_rate[k, lane])!r}\n")
    return buf.getvalue()
