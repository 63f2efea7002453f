"""Damped Gauss-Newton over the stacked hand parameters.

Each iteration solves ``(J^T J + lambda diag(J^T J)) delta = J^T f`` with a
Jacobi-preconditioned conjugate gradient and proposes ``x - delta``. A proposal
is accepted only if it lowers the energy; otherwise the damping grows and the
step is re-solved.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .energy import assemble
from .handmodel import HandParams, pose_hands, vertex_normals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 20
    cg_max_iterations: int = 200
    cg_tolerance: float = 1e-8
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.3
    step_tolerance: float = 1e-7
    energy_tolerance: float = 1e-6
    max_retries: int = 8
    facing_cutoff: float = 0.2  # None: use every match in a single round
    rejection_radii: tuple = (0.01, 0.006)  # metres, one extra round each

    def __post_init__(self):
        for name in ("max_iterations", "cg_max_iterations", "cg_tolerance", "damping_init",
                     "step_tolerance", "energy_tolerance", "max_retries"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if any(not r > 0 for r in self.rejection_radii):
            raise ValueError("rejection radii must be positive")
        if self.facing_cutoff is not None and not -1 <= self.facing_cutoff < 1:
            raise ValueError("facing_cutoff must lie in [-1, 1)")
        if not (self.damping_up > 1 > self.damping_down > 0):
            raise ValueError("need damping_up > 1 > damping_down > 0")


@dataclass
class SolveReport:
    iterations_run: int
    energy_trace: list
    final_params: HandParams
    converged: bool
    per_term_energies: dict
    stop_reason: str = ""
    n_visible: int = 0
    row_counts: dict = field(default_factory=dict)
    round_starts: list = field(default_factory=lambda: [0])

    def round_traces(self):
        """The energy trace split at gating rounds (each piece is non-increasing)."""
        edges = list(self.round_starts) + [len(self.energy_trace)]
        return [self.energy_trace[a:b] for a, b in zip(edges[:-1], edges[1:])]


class FitError(RuntimeError):
    pass


def normal_equations(system, damping):
    """``A = J^T J + damping * diag(J^T J)`` (zero diagonals damped by 1) and ``b = J^T f``.

    Products are accumulated block by block in assembly order.
    """
    J, f = system.jacobian, system.residuals
    n = J.shape[1]
    A = np.zeros((n, n))
    b = np.zeros(n)
    for s in system.block_index.values():
        Jb = J[s]
        A += Jb.T @ Jb
        b += Jb.T @ f[s]
    d = np.diag(A).copy()
    d[d == 0] = 1.0
    A[np.diag_indices(n)] += damping * d
    return A, b


def pcg_solve(A, b, config=SolverConfig(), return_info=False):
    """Jacobi-preconditioned conjugate gradient for symmetric PSD ``A``."""
    n = len(b)
    x = np.zeros(n)
    bnorm2 = b @ b
    if bnorm2 == 0:
        return (x, 0) if return_info else x
    d = np.diag(A).copy()
    d[d <= 0] = 1.0
    Minv = 1.0 / d
    r = b.copy()
    z = Minv * r
    p = z.copy()
    rz = r @ z
    it = 0
    for it in range(1, config.cg_max_iterations + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if r @ r <= config.cg_tolerance ** 2 * bnorm2:
            break
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return (x, it) if return_info else x


def _check_finite(system):
    for name, s in system.block_index.items():
        if not np.all(np.isfinite(system.residuals[s])):
            raise FitError(f"non-finite residuals in energy block '{name}'")


def visibility_mask(template, params, cutoff):
    """Vertices whose outward normal points towards the camera by more than ``cutoff`` (cosine)."""
    V = pose_hands(template, params).vertex_positions
    N = vertex_normals(V, template.both_faces)
    view = V / np.maximum(np.linalg.norm(V, axis=1, keepdims=True), 1e-12)
    return np.sum(N * view, axis=1) < -cutoff


def _round_budgets(config):
    n = 1 + len(config.rejection_radii) if config.facing_cutoff is not None else 1
    return [len(b) for b in np.array_split(np.arange(config.max_iterations), n)]


def _gauss_newton(template, params, data, weights, config, budget, trace):
    """Damped GN on a fixed residual set; appends accepted energies to ``trace``."""
    ns = params.n_shape
    x = params.to_vector()
    system = assemble(template, params, data, weights)
    _check_finite(system)
    energy = system.energy
    lam = config.damping_init
    it = 0
    while it < budget:
        A0, b = normal_equations(system, 0.0)
        if not np.any(b):
            return params, it, "zero_gradient"
        diag = np.diag(A0).copy()
        diag[diag == 0] = 1.0
        for _ in range(config.max_retries):
            delta = pcg_solve(A0 + np.diag(lam * diag), b, config)
            cand = HandParams.from_vector(x - delta, ns)
            e_new = assemble(template, cand, data, weights, jacobian=False).energy
            if np.isfinite(e_new) and e_new < energy:
                lam = max(lam * config.damping_down, 1e-12)
                break
            lam *= config.damping_up
        else:
            return params, it, "no_decrease"
        it += 1
        rel = (energy - e_new) / energy if energy > 0 else 0.0
        x = x - delta
        params, energy = cand, e_new
        trace.append(energy)
        if np.linalg.norm(delta) < config.step_tolerance:
            return params, it, "step_tolerance"
        if rel < config.energy_tolerance:
            return params, it, "energy_tolerance"
        system = assemble(template, params, data, weights)
    return params, it, "max_iterations"


def gate(template, params, data, config, radius=None):
    """``data`` restricted to camera-facing vertices (and matches within ``radius``) at ``params``."""
    if config.facing_cutoff is None:
        return data
    keep = visibility_mask(template, params, config.facing_cutoff)
    if radius is not None:
        V = pose_hands(template, params).vertex_positions
        vis = data.visible
        far = np.linalg.norm(data.points[data.rows[vis]] - V[vis], axis=1) >= radius
        keep[vis[far]] = False
    return data.restricted(keep)


def fit_frame(template, init, data, weights, config=SolverConfig()):
    """Minimise the fitting energy for one frame starting from ``init``.

    With ``config.facing_cutoff`` set the solve runs in rounds that share the
    iteration budget. Before each round the correspondences are re-gated at the
    current estimate: vertices facing away from the camera are dropped, and
    from the second round on so are matches farther than that round's
    rejection radius. The residual set is fixed within a round, so the energy
    trace is non-increasing inside each round; ``round_starts`` marks where
    each round begins in the trace.
    """
    if not np.all(np.isfinite(init.to_vector())):
        raise FitError("initial parameters are not finite")
    params = init.copy()
    trace, starts = [], []
    total, spare = 0, 0
    reason = "max_iterations"
    radii = (None,) + tuple(config.rejection_radii)
    for k, budget in enumerate(_round_budgets(config)):
        active = gate(template, params, data, config, radii[k])
        starts.append(len(trace))
        trace.append(assemble(template, params, active, weights, jacobian=False).energy)
        params, it, reason = _gauss_newton(template, params, active, weights, config, budget + spare, trace)
        spare += budget - it
        total += it
    final = assemble(template, params, active, weights, jacobian=False)
    rows = {k: s.stop - s.start for k, s in final.block_index.items()}
    return SolveReport(
        iterations_run=total, energy_trace=trace, final_params=params,
        converged=reason != "max_iterations", per_term_energies=final.term_energies(),
        stop_reason=reason, n_visible=len(active.visible), row_counts=rows, round_starts=starts,
    )


def track_sequence(template, frames, init, weights, config=SolverConfig(), pipelined=False):
    """Fit frames in order, each initialised from (and temporally tied to) the previous solution.

    ``frames`` holds ``FrameData`` objects or zero-argument callables producing
    them. With ``pipelined=True`` the callable for frame t+1 runs in a worker
    thread while frame t is optimised; results match sequential execution.
    """
    reports = []
    prev = None
    current = init
    pool = ThreadPoolExecutor(max_workers=1) if pipelined else None

    def load(t):
        src = frames[t]
        return src() if callable(src) else src

    try:
        pending = pool.submit(load, 0) if pool else None
        for t in range(len(frames)):
            try:
                data = pending.result() if pool else load(t)
                if pool and t + 1 < len(frames):
                    pending = pool.submit(load, t + 1)
                data = data.with_prev(prev)
                rep = fit_frame(template, current, data, weights, config)
            except Exception as exc:
                raise FitError(f"frame {t}: {exc}") from exc
            reports.append(rep)
            prev = current = rep.final_params
            log.debug("frame %d: E=%.3e after %d iterations (%s)", t, rep.energy_trace[-1],
                      rep.iterations_run, rep.stop_reason)
    finally:
        if pool:
            pool.shutdown(wait=True)
    return reports
