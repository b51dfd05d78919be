"""Exact value-discrepancy analysis on pairs of finite MDPs.

For a training MDP ``M`` and a deployment MDP ``M_R`` sharing state and action
spaces, the optimal action values satisfy, for every ``(s, a)``::

    Q*(s,a) - Q*_R(s,a) = dr(s,a)
                          + gamma * sum_s' P(s'|s,a) (V*(s') - V*_R(s'))      # policy term
                          + gamma * sum_s' (P - P_R)(s'|s,a) V*_R(s')          # transition term

:func:`decompose` evaluates every term and the residual of that identity;
:func:`bound_rhs` evaluates the accompanying upper bound so that it can be
compared against ``sup |Q* - Q*_R|``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from loopsr.errors import ConfigError


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    gamma: float
    mu0: np.ndarray  # (S,)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.gamma = float(self.gamma)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.r).max())

    def validate(self) -> None:
        S, A = self.r.shape if self.r.ndim == 2 else (0, 0)
        if self.P.shape != (S, A, S) or S == 0 or A == 0:
            raise ConfigError(f"transition tensor {self.P.shape} does not match rewards {self.r.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ConfigError("transition rows must be probability vectors (within 1e-12)")
        if not np.all(np.isfinite(self.r)):
            raise ConfigError("rewards must be finite")
        if self.mu0.shape != (S,) or np.any(self.mu0 < 0) or abs(self.mu0.sum() - 1.0) > 1e-12:
            raise ConfigError("initial distribution must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount {self.gamma} outside [0, 1)")

    def to_json(self) -> dict:
        S, A = self.r.shape
        return {
            "n_states": S,
            "n_actions": A,
            "gamma": self.gamma,
            "P": self.P.reshape(-1).tolist(),
            "r": self.r.reshape(-1).tolist(),
            "mu0": self.mu0.tolist(),
        }

    @classmethod
    def unchecked(cls, P, r, gamma, mu0) -> "TabularMDP":
        """Build without validation (used to replay dumped failing pairs as they were)."""
        M = object.__new__(cls)
        M.P = np.asarray(P, dtype=np.float64)
        M.r = np.asarray(r, dtype=np.float64)
        M.gamma = float(gamma)
        M.mu0 = np.asarray(mu0, dtype=np.float64)
        return M

    @classmethod
    def from_json(cls, doc: dict, check: bool = True) -> "TabularMDP":
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        P = np.asarray(doc["P"], dtype=np.float64)
        r = np.asarray(doc["r"], dtype=np.float64)
        if P.size != S * A * S or r.size != S * A:
            raise ConfigError("flattened arrays do not match the declared dimensions")
        build = cls if check else cls.unchecked
        return build(P.reshape(S, A, S), r.reshape(S, A), doc["gamma"], doc["mu0"])


def value_iteration(M: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000, history: list | None = None):
    """Optimal action values, stopping once the Bellman residual is below ``tol (1-gamma)/gamma``.

    If floating-point precision stalls the residual above that threshold the
    iteration stops at the stall point.  ``history`` collects residuals.
    """
    if not M.gamma < 1.0:
        raise ConfigError("value iteration needs gamma < 1")
    if tol <= 0:
        raise ConfigError("tol must be positive")
    threshold = tol * (1 - M.gamma) / M.gamma if M.gamma > 0 else np.inf
    Q = np.zeros_like(M.r)
    prev = np.inf
    for _ in range(max_iter):
        Q_new = M.r + M.gamma * M.P @ Q.max(axis=1)
        res = float(np.abs(Q_new - Q).max())
        if res >= prev:
            break
        Q, prev = Q_new, res
        if history is not None:
            history.append(res)
        if res < threshold:
            break
    return Q


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy as an ``(S, A)`` matrix; ties go to the lowest action."""
    pi = np.zeros_like(Q)
    pi[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return pi


def policy_evaluation(M: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Exact ``Q^pi`` by a linear solve."""
    S, A = M.r.shape
    P_pi = np.einsum("sap,pb->sapb", M.P, pi).reshape(S * A, S * A)
    return np.linalg.solve(np.eye(S * A) - M.gamma * P_pi, M.r.reshape(-1)).reshape(S, A)


def tv(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"distributions of different length: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def occupancy(M: TabularMDP, pi: np.ndarray, mu0=None) -> np.ndarray:
    """Normalized discounted state occupancy ``(1-gamma) sum_t gamma^t Pr(s_t = s)``."""
    mu0 = M.mu0 if mu0 is None else np.asarray(mu0, dtype=np.float64)
    P_pi = np.einsum("sap,sa->sp", M.P, pi)
    A = np.eye(M.n_states) - M.gamma * P_pi.T
    try:
        return np.linalg.solve(A, (1 - M.gamma) * mu0)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("occupancy system is singular") from exc


@dataclass
class DiscrepancyReport:
    Q: np.ndarray
    Q_R: np.ndarray
    V: np.ndarray
    V_R: np.ndarray
    delta_r: np.ndarray
    term_policy: np.ndarray  # (i) total policy discrepancy, per (s, a)
    term_transition: np.ndarray  # (ii) transition discrepancy, per (s, a)
    residual: np.ndarray
    eps_pi: float
    eps_rho: float
    lhs: float
    rhs: float = float("nan")
    rhs_reward: float = float("nan")
    rhs_policy: float = float("nan")
    rhs_transition: float = float("nan")

    @property
    def max_residual(self) -> float:
        return float(np.abs(self.residual).max())

    @property
    def bound_holds(self) -> bool:
        return self.lhs <= self.rhs


def _check_pair(M: TabularMDP, M_R: TabularMDP) -> None:
    if M.P.shape != M_R.P.shape:
        raise ConfigError(f"state/action spaces differ: {M.P.shape} vs {M_R.P.shape}")
    if M.gamma != M_R.gamma:
        raise ConfigError("discount factors differ")


def decompose(M: TabularMDP, M_R: TabularMDP, tol: float = 1e-12) -> DiscrepancyReport:
    _check_pair(M, M_R)
    Q = value_iteration(M, tol)
    Q_R = value_iteration(M_R, tol)
    V, V_R = Q.max(axis=1), Q_R.max(axis=1)
    g = M.gamma
    delta_r = M.r - M_R.r
    term_policy = g * M.P @ (V - V_R)
    term_transition = g * (M.P - M_R.P) @ V_R
    residual = (Q - Q_R) - (delta_r + term_policy + term_transition)
    pi, pi_R = greedy_policy(Q), greedy_policy(Q_R)
    eps_pi = max(tv(pi[s], pi_R[s]) for s in range(M.n_states))
    eps_rho = tv(occupancy(M, pi_R), occupancy(M_R, pi_R))
    lhs = float(np.abs(Q - Q_R).max())
    return DiscrepancyReport(Q, Q_R, V, V_R, delta_r, term_policy, term_transition, residual, eps_pi, eps_rho, lhs)


def bound_rhs(M: TabularMDP, M_R: TabularMDP, report: DiscrepancyReport | None = None) -> DiscrepancyReport:
    """Fill in the bound terms; returns the report with ``lhs`` and ``rhs`` side by side."""
    rep = report if report is not None else decompose(M, M_R)
    g = M.gamma
    r_max = max(M.r_max, M_R.r_max)
    rep.rhs_reward = float(np.abs(rep.delta_r).max()) / (1 - g)
    rep.rhs_policy = 2 * g * r_max / (1 - g) ** 2 * rep.eps_pi
    rep.rhs_transition = g / (1 - g) * float(rep.V_R.max()) * rep.eps_rho
    rep.rhs = rep.rhs_reward + rep.rhs_policy + rep.rhs_transition
    return rep


def random_pair(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
                transition_shift: float = 0.3, reward_shift: float = 0.2) -> tuple[TabularMDP, TabularMDP]:
    """A random MDP and a perturbed copy (mixed transitions, jittered rewards)."""
    S, A = n_states, n_actions
    P = rng.dirichlet(np.ones(S), size=(S, A))
    r = rng.uniform(-1, 1, size=(S, A))
    mu0 = rng.dirichlet(np.ones(S))
    kappa = rng.uniform(0, transition_shift)
    P_R = (1 - kappa) * P + kappa * rng.dirichlet(np.ones(S), size=(S, A))
    P_R /= P_R.sum(axis=2, keepdims=True)
    P /= P.sum(axis=2, keepdims=True)
    r_R = r + rng.uniform(-reward_shift, reward_shift, size=(S, A))
    return TabularMDP(P, r, gamma, mu0), TabularMDP(P_R, r_R, gamma, mu0)


@dataclass
class SweepConfig:
    pairs: int = 100
    max_states: int = 10
    max_actions: int = 5
    gamma_min: float = 0.5
    gamma_max: float = 0.99
    seed: int = 0
    residual_tol: float = 1e-9
    corrupt_pair: int = -1  # test hook: break the transition rows of this pair

    def validate(self) -> None:
        if self.pairs < 1 or self.max_states < 1 or self.max_actions < 1:
            raise ConfigError("pairs, max_states and max_actions must be positive")
        if not 0 <= self.gamma_min <= self.gamma_max < 1:
            raise ConfigError("need 0 <= gamma_min <= gamma_max < 1")


def sweep_pairs(cfg: SweepConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    for k in range(cfg.pairs):
        S = int(rng.integers(1, cfg.max_states + 1))
        A = int(rng.integers(1, cfg.max_actions + 1))
        gamma = float(rng.uniform(cfg.gamma_min, cfg.gamma_max))
        M, M_R = random_pair(rng, S, A, gamma)
        if k == cfg.corrupt_pair:
            M = corrupt(M)
        yield k, (M, M_R)


def corrupt(M: TabularMDP) -> TabularMDP:
    """Copy of ``M`` whose transition rows sum to ``2 / gamma``, so value iteration cannot converge."""
    return TabularMDP.unchecked(M.P * (2.0 / M.gamma), M.r.copy(), M.gamma, M.mu0.copy())


SWEEP_COLUMNS = ["pair_id", "n_states", "n_actions", "gamma", "lhs", "rhs", "rhs_reward", "rhs_policy",
                 "rhs_transition", "residual", "eps_pi", "eps_rho", "bound_holds"]


def report_row(pair_id: int, M: TabularMDP, rep: DiscrepancyReport) -> dict:
    return {
        "pair_id": pair_id,
        "n_states": M.n_states,
        "n_actions": M.n_actions,
        "gamma": repr(M.gamma),
        "lhs": repr(rep.lhs),
        "rhs": repr(rep.rhs),
        "rhs_reward": repr(rep.rhs_reward),
        "rhs_policy": repr(rep.rhs_policy),
        "rhs_transition": repr(rep.rhs_transition),
        "residual": repr(rep.max_residual),
        "eps_pi": repr(rep.eps_pi),
        "eps_rho": repr(rep.eps_rho),
        "bound_holds": int(rep.bound_holds),
    }


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def dump_pair(M: TabularMDP, M_R: TabularMDP, path) -> None:
    with open(path, "w") as fh:
        json.dump({"M": M.to_json(), "M_R": M_R.to_json()}, fh)


def load_pair(path, check: bool = True) -> tuple[TabularMDP, TabularMDP]:
    with open(path) as fh:
        doc = json.load(fh)
    return TabularMDP.from_json(doc["M"], check), TabularMDP.from_json(doc["M_R"], check)


