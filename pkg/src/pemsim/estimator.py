"""Extended Kalman filter over the reduced macromodel chain.

The filter sees only what the coordinator sees: metered or reconstructed
demand, request counts and (optionally) opt-out counts per reporting interval.
It estimates the 3n_b bin distribution and from it the fleet SoC.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .macromodel import ControlInput, Macromodel, pmf_soc


class EstimatorError(RuntimeError):
    pass


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto {x >= 0, sum(x) = total}."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def gain(cov: np.ndarray, c: np.ndarray, r: np.ndarray) -> np.ndarray:
    s = c @ cov @ c.T + r
    try:
        return np.linalg.solve(s, c @ cov).T
    except np.linalg.LinAlgError as exc:
        raise EstimatorError("innovation covariance is singular") from exc


def covariance_update(cov, k, c):
    """Standard form (I - K C) Cov."""
    return (np.eye(cov.shape[0]) - k @ c) @ cov


def joseph_update(cov, k, c, r):
    """Joseph stabilised form; equals ``covariance_update`` for the optimal gain."""
    a = np.eye(cov.shape[0]) - k @ c
    return a @ cov @ a.T + k @ r @ k.T


@dataclass
class NoiseConfig:
    demand_fraction: float = 0.01  # metering noise as a fraction of the baseline power
    process: float = 1e-6
    count_floor: float = 1.0  # lower bound of a count's variance
    # closed-loop counts are overdispersed: rejected devices repeat requests
    # every tick, so variance = dispersion * mean + (relative * mean)^2
    count_dispersion: float = 1.0
    count_relative: float = 0.0
    use_optout: bool = False


@dataclass
class EstimatorState:
    q_post: np.ndarray
    q_prior: np.ndarray
    cov_post: np.ndarray
    cov_prior: np.ndarray
    meas_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    process_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    steps: int = 0
    innovation: np.ndarray = field(default_factory=lambda: np.zeros(0))
    projection_shift: float = 0.0
    correction: float = 0.0


@dataclass(frozen=True)
class SocEstimate:
    z: float
    z_lower: float
    z_upper: float
    near_lower: bool
    near_upper: bool


class FleetEstimator:
    """EKF for one homogeneous device group described by ``model``."""

    def __init__(self, model: Macromodel, q0=None, noise: NoiseConfig | None = None,
                 p_nom: float | None = None, limits: tuple[float, float] | None = None,
                 initial_variance: float = 1e-4):
        self.model = model
        self.noise = noise or NoiseConfig()
        n3 = 3 * model.n
        if q0 is None:
            q0 = model.uniform_state().q
        q0 = np.asarray(q0, dtype=float)
        q0 = q0 / q0.sum()
        if p_nom is None:
            p_nom = max(abs(model.h_dem(q0)), model.n_devices * model.params.charge_power * 0.1)
        self.p_nom = float(p_nom)
        self.limits = limits
        cov0 = initial_variance * np.eye(n3)
        self.state = EstimatorState(q0.copy(), q0.copy(), cov0.copy(), cov0.copy(),
                                    process_cov=self.noise.process * np.eye(n3))
        self._beta = (0.0, 0.0)
        self._pending_demand: float | None = None

    # ------------------------------------------------------------ model
    def linearize(self, u: ControlInput, q):
        """Jacobians ``(A_u, C)`` of the chain and output map at ``q``.

        The reduced chain is linear in q for fixed u, so A_u is its transition
        matrix and C stacks the affine output weights.
        """
        a = self.model.reduced_matrix(u)
        return a, self.output_matrix(u)

    def output_matrix(self, u: ControlInput) -> np.ndarray:
        m = self.model
        rows = [m.demand_weights()]
        w_c, w_d = m.request_weights(u.beta_c, u.beta_d)
        rows.append(w_c)
        if m.slots_d:
            rows.append(w_d)
        if self.noise.use_optout:
            rows.append(m.optout_weights())
        return np.array(rows)

    def measurement_vector(self, demand, n_req_c, n_req_d, n_optout=0) -> np.ndarray:
        y = [demand - self.model.base_load, n_req_c]
        if self.model.slots_d:
            y.append(n_req_d)
        if self.noise.use_optout:
            y.append(n_optout)
        return np.array(y, dtype=float)

    def measurement_noise(self, predicted: np.ndarray) -> np.ndarray:
        mean = np.maximum(predicted, 0.0)
        var = np.maximum(self.noise.count_dispersion * mean + (self.noise.count_relative * mean) ** 2,
                         self.noise.count_floor)
        var[0] = (self.noise.demand_fraction * self.p_nom) ** 2
        return np.diag(var)

    # ------------------------------------------------------------ filter
    def ekf_step(self, state: EstimatorState, u: ControlInput, y) -> EstimatorState:
        """Measurement update of the prior at step k with ``y``, then the time update."""
        y = np.asarray(y, dtype=float)
        a, c = self.linearize(u, state.q_prior)
        q_prior, cov_prior = state.q_prior, state.cov_prior
        predicted = c @ q_prior
        r = self.measurement_noise(predicted)
        k = gain(cov_prior, c, r)
        innovation = y - predicted
        raw = q_prior + k @ innovation
        total = q_prior.sum()
        q_post = project_simplex(raw, total)
        cov_post = symmetrize(covariance_update(cov_prior, k, c))
        q_next = a @ q_post
        q_next = project_simplex(q_next, total)
        cov_next = symmetrize(a @ cov_post @ a.T + state.process_cov)
        return replace(state, q_post=q_post, q_prior=q_next, cov_post=cov_post,
                       cov_prior=cov_next, meas_cov=r, steps=state.steps + 1,
                       innovation=innovation,
                       projection_shift=float(np.abs(q_post - raw).sum()),
                       correction=float(np.abs(raw - q_prior).sum()))

    def on_report(self, report) -> EstimatorState:
        """Consume one coordinator report.

        Request counts over ``(t_k, t_k+1]`` are paired with the demand observed
        at ``t_k`` (kept from the previous report) and with the prior at step k.
        """
        if report.beta_c is not None:
            self._beta = (report.beta_c, self._beta[1])
        if report.beta_d is not None:
            self._beta = (self._beta[0], report.beta_d)
        if self._pending_demand is not None:
            u = ControlInput(self._beta[0], self._beta[1] if self.model.slots_d else 0.0,
                             report.expire_c, report.expire_d)
            y = self.measurement_vector(self._pending_demand, report.n_req_c, report.n_req_d,
                                        report.n_optout)
            self.state = self.ekf_step(self.state, u, y)
        self._pending_demand = report.demand
        return self.state

    # ------------------------------------------------------------ outputs
    @property
    def q(self) -> np.ndarray:
        """Current best estimate (prediction for the present step)."""
        return self.state.q_prior

    def estimated_soc(self, state: EstimatorState | None = None, margin: float = 0.2) -> SocEstimate:
        state = state or self.state
        z = pmf_soc(state.q_prior, self.model.grid)
        lo, hi = self.limits if self.limits is not None else (0.0, 1.0)
        band = margin * (hi - lo)
        return SocEstimate(z, lo, hi, z <= lo + band, z >= hi - band)


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())
