"""Hard-label query oracle with exact accounting.

The session wraps a hidden target network and exposes labels only. Attack
code (boundary/recovery/crosslayer/pipeline) must work through ``query`` and
the batched probe primitives below, all of which charge the query counter
exactly. ``whitebox_probe`` is an evaluation-mode escape hatch for
verification code and raises in attack mode.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import accel
from .network import MlpParams, pack

GROWTH = 2.0


class BudgetExhaustedError(RuntimeError):
    """The session's query budget cannot cover the requested probes."""


class WhiteboxAccessError(RuntimeError):
    """Whitebox access was requested from an attack-mode session."""


class PreconditionError(ValueError):
    """A probe primitive was called with inputs violating its contract."""


class OracleSession:
    """Hard-label oracle over a fixed target, counting every query issued.

    mode is 'attack' (no whitebox access) or 'evaluation' (verification code
    may read the target). The counter is lock-protected; label results are
    pure functions of the input, so interleaving does not affect them.
    """

    def __init__(self, target: MlpParams, mode: str = "attack", budget: int | None = None):
        if mode not in ("attack", "evaluation"):
            raise ValueError(f"unknown mode {mode!r}")
        if budget is not None and budget <= 0:
            raise ValueError("budget must be positive when set")
        self._target = target
        self._mode = mode
        self._budget = budget
        self._count = 0
        self._lock = threading.Lock()
        self._packed = pack(target)
        self._kern = accel.ACTIVE

    # -- accounting --------------------------------------------------------

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def budget(self) -> int | None:
        return self._budget

    @property
    def input_dim(self) -> int:
        return self._target.dims[0]

    @property
    def output_dim(self) -> int:
        return self._target.dims[-1]

    @property
    def dims(self) -> tuple[int, ...]:
        # architecture knowledge is part of the adversary model
        return self._target.dims

    def query_count(self) -> int:
        with self._lock:
            return self._count

    def remaining(self) -> int | None:
        with self._lock:
            return None if self._budget is None else self._budget - self._count

    def _reserve(self, n: int) -> None:
        """Fail before issuing probes that could not fit in the budget."""
        if self._budget is None:
            return
        with self._lock:
            if self._count + n > self._budget:
                raise BudgetExhaustedError(
                    f"budget {self._budget}: {self._count} used, {n} more requested"
                )

    def _charge(self, n: int) -> None:
        with self._lock:
            self._count += n

    # -- the oracle --------------------------------------------------------

    def query(self, x: np.ndarray) -> int:
        """Hard label of the target at x; exactly one query charged."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.input_dim:
            raise PreconditionError(f"query length {x.shape[0]} != d0 {self.input_dim}")
        if not np.isfinite(x).all():
            raise PreconditionError("query point must be finite")
        self._reserve(1)
        w, b, dims, removed = self._packed
        label = int(self._kern.label_at(w, b, dims, removed, x))
        self._charge(1)
        return label

    # -- batched hard-label probe primitives -------------------------------
    #
    # These run the inner loops in the compiled kernels and charge the exact
    # number of label evaluations performed. Budget reservation uses an upper
    # bound on the probe count, so a budgeted session never overshoots.

    def bisect(self, xa, xb, tol: float, max_iter: int = 200):
        """Binary search between points with differing labels.

        Returns (lo, hi): a bracket of width <= tol (or after max_iter
        halvings) with lo on xa's label side and hi on xb's.
        """
        xa = np.ascontiguousarray(xa, dtype=float)
        xb = np.ascontiguousarray(xb, dtype=float)
        self._reserve(2 + max_iter)
        w, b, dims, removed = self._packed
        lo, hi, n, status = self._kern.bisect_segment(w, b, dims, removed, xa, xb, tol, max_iter)
        self._charge(int(n))
        if status != 0:
            raise PreconditionError("bisect endpoints have equal labels")
        return lo, hi

    def first_flip(self, x0, u, ref_label: int, t0: float, tmax: float):
        """Geometric scan along x0 + t*u for the first label != ref_label.

        Returns (t_lo, t_hi, found): consecutive scan points bracketing the
        flip, or found=False if no flip occurs up to tmax.
        """
        if not (0 < t0 <= tmax):
            raise PreconditionError("need 0 < t0 <= tmax")
        x0 = np.ascontiguousarray(x0, dtype=float)
        u = np.ascontiguousarray(u, dtype=float)
        bound = int(math.log(tmax / t0, GROWTH)) + 3
        self._reserve(bound)
        w, b, dims, removed = self._packed
        t_lo, t_hi, n, found = self._kern.first_flip_scan(
            w, b, dims, removed, x0, u, ref_label, t0, tmax, GROWTH
        )
        self._charge(int(n))
        return float(t_lo), float(t_hi), bool(found)

    def walk_to_bend(self, a, b, u, step0: float, max_dist: float, alpha_tol: float):
        """Translate the straddling bracket (a, b) along u until it stops
        straddling, then bisect the leave parameter.

        Returns (alpha_on, alpha_off, status): status 0 = leave point
        bracketed to alpha_tol, 1 = still straddling at max_dist.
        """
        if not (0 < step0 <= max_dist) or alpha_tol <= 0:
            raise PreconditionError("need 0 < step0 <= max_dist and alpha_tol > 0")
        a = np.ascontiguousarray(a, dtype=float)
        b = np.ascontiguousarray(b, dtype=float)
        u = np.ascontiguousarray(u, dtype=float)
        bound = 2 * (int(math.log2(max_dist / step0)) + int(math.log2(max_dist / alpha_tol)) + 8)
        self._reserve(bound)
        w, bb, dims, removed = self._packed
        alpha_on, alpha_off, n, status = self._kern.walk_to_bend(
            w, bb, dims, removed, a, b, u, step0, max_dist, alpha_tol
        )
        self._charge(int(n))
        if status == 2:
            raise PreconditionError("walk bracket endpoints have equal labels")
        return float(alpha_on), float(alpha_off), int(status)

    # -- evaluation-mode escape hatch ---------------------------------------

    def whitebox_probe(self) -> MlpParams:
        """The hidden parameters, for verification code only."""
        if self._mode != "evaluation":
            raise WhiteboxAccessError("whitebox access requires an evaluation-mode session")
        return self._target
