"""Evaluation-mode helpers that read the true parameters.

None of this is available to attack code; it exists to tag collected spaces
with ground truth, to generate exact intersection spaces cheaply for module
experiments, and to score recovered models against their targets
(normalization + permutation matching, label agreement).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary import IntersectionSpace
from .linalg import nullspace
from .network import (
    MlpParams,
    forward,
    forward_batch,
    hard_label,
    local_affine,
    normalize_rows,
    pre_activations,
)


def boundary_distances(params: MlpParams, x) -> list[np.ndarray]:
    """Per hidden neuron, distance from x to its activation boundary
    (|pre-activation| / gradient norm, within x's linear region)."""
    x = np.asarray(x, dtype=float)
    out = []
    for ell in range(1, params.n_layers):
        pre = pre_activations(params, x)[ell - 1]
        G = local_affine(params, x, ell).F
        gn = np.linalg.norm(G, axis=1)
        gn[gn == 0] = np.inf
        out.append(np.abs(pre) / gn)
    return out


def nearest_boundary_neuron(params: MlpParams, x) -> tuple[int, int, float]:
    """(layer, neuron, distance) of the closest activation boundary to x."""
    best = (0, 0, np.inf)
    for ell, dist in enumerate(boundary_distances(params, x), start=1):
        k = int(np.argmin(dist))
        if dist[k] < best[2]:
            best = (ell, k, float(dist[k]))
    return best


def ground_truth_tagger(params: MlpParams, max_dist: float = 1e-5):
    """Callable mapping an intersection point to its (layer, neuron) tag."""

    def tag(s):
        ell, k, dist = nearest_boundary_neuron(params, s)
        return (ell, k) if dist <= max_dist else None

    return tag


def single_boundary_margin(params: MlpParams, x, layer: int, neuron: int) -> float:
    """Distance to the nearest *other* activation boundary."""
    best = np.inf
    for ell, dist in enumerate(boundary_distances(params, x), start=1):
        d = dist.copy()
        if ell == layer:
            d[neuron] = np.inf
        best = min(best, float(np.min(d)))
    return best


def top_pair(logits: np.ndarray) -> tuple[int, int]:
    order = np.argsort(logits)[::-1]
    return int(order[0]), int(order[1])


def decision_normal(params: MlpParams, x, pair: tuple[int, int]) -> np.ndarray:
    """Input-space normal of the decision boundary between classes `pair`,
    using x's activation pattern; unit length, unoriented."""
    F = local_affine(params, x, params.n_layers).F
    v = F[pair[0]] - F[pair[1]]
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("degenerate decision normal")
    return v / n


def sample_intersection_space(
    params: MlpParams,
    layer: int,
    neuron: int,
    rng: np.random.Generator,
    input_scale: float = 1.0,
    max_tries: int = 60,
    newton_steps: int = 80,
    margin: float = 1e-7,
    side_eps: float = 1e-6,
):
    """Newton-solve for a point on both the (layer, neuron) activation
    boundary and the decision boundary; build the exact intersection space.

    Returns None when no clean intersection is found (e.g. the neuron never
    switches in the sampled region). Exact whitebox analog of the boundary
    module's collected spaces, used by analysis and crosslayer experiments.
    """
    d0 = params.dims[0]
    for _ in range(max_tries):
        x = input_scale * rng.standard_normal(d0)
        ok = True
        for _ in range(newton_steps):
            logits, _ = forward(params, x)
            a, b = top_pair(logits)
            gap = logits[a] - logits[b]
            pre = pre_activations(params, x)[layer - 1][neuron]
            scale = 1.0 + float(np.max(np.abs(logits)))
            if abs(gap) <= 1e-13 * scale and abs(pre) <= 1e-13 * scale:
                break
            g_pre = local_affine(params, x, layer).F[neuron]
            Ffull = local_affine(params, x, params.n_layers).F
            J = np.vstack([g_pre, Ffull[a] - Ffull[b]])
            r = np.array([pre, gap])
            delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
            step = float(np.linalg.norm(delta))
            if not np.isfinite(step) or step > 1e3:
                ok = False
                break
            x = x + delta
        else:
            ok = False
        if not ok or not np.isfinite(x).all():
            continue
        logits, _ = forward(params, x)
        a, b = top_pair(logits)
        third = np.partition(logits, -3)[-3] if logits.size > 2 else -np.inf
        if logits[a] - third < 1e-6:
            continue  # decision pair ambiguous at s
        if single_boundary_margin(params, x, layer, neuron) < margin:
            continue  # another activation boundary too close
        u = local_affine(params, x, layer).F[neuron]
        un = np.linalg.norm(u)
        if un == 0:
            continue
        u = u / un
        try:
            v_inact = decision_normal(params, x - side_eps * u, (a, b))
            v_act = decision_normal(params, x + side_eps * u, (a, b))
        except ValueError:
            continue
        bend = float(np.arccos(min(abs(float(v_inact @ v_act)), 1.0)))
        if bend < 1e-9:
            continue  # the neuron does not bend this decision boundary
        pre_lo = pre_activations(params, x - side_eps * u)[layer - 1][neuron]
        pre_hi = pre_activations(params, x + side_eps * u)[layer - 1][neuron]
        if not (pre_lo < 0 < pre_hi):
            continue  # sides did not separate cleanly
        N = nullspace(np.vstack([v_inact, v_act]))
        if N.shape[1] != d0 - 2:
            continue
        return IntersectionSpace(
            s=x, N=N, v_left=v_inact, v_right=v_act,
            x_left=x - side_eps * u, x_right=x + side_eps * u,
            ground_truth=(layer, neuron),
        )
    return None


def agreement_rate(pa: MlpParams, pb: MlpParams, n: int, seed: int) -> float:
    """Fraction of n Gaussian inputs on which hard labels agree."""
    if pa.dims[0] != pb.dims[0] or pa.dims[-1] != pb.dims[-1]:
        raise ValueError("models have incompatible input/output widths")
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((n, pa.dims[0]))
    la = np.argmax(forward_batch(pa, xs)[0], axis=1)
    lb = np.argmax(forward_batch(pb, xs)[0], axis=1)
    return float(np.mean(la == lb))


@dataclass
class LayerMatch:
    permutation: np.ndarray      # recovered row i corresponds to target row permutation[i]
    angles: np.ndarray           # signed angle per recovered row (rad)
    bias_errors: np.ndarray
    excluded: np.ndarray         # rows not matched (relu_removed / dead)


@dataclass
class MatchReport:
    layers: list[LayerMatch]
    final_angle: float
    final_bias_error: float

    @property
    def max_angle(self) -> float:
        vals = [float(np.max(m.angles[~m.excluded])) for m in self.layers
                if (~m.excluded).any()]
        vals.append(self.final_angle)
        return max(vals)

    @property
    def max_bias_error(self) -> float:
        vals = [float(np.max(m.bias_errors[~m.excluded])) for m in self.layers
                if (~m.excluded).any()]
        vals.append(self.final_bias_error)
        return max(vals)


def _greedy_match(R: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Permutation matching rows of R to rows of T by descending |cos|."""
    n = R.shape[0]
    rn = np.linalg.norm(R, axis=1)
    tn = np.linalg.norm(T, axis=1)
    rn[rn == 0] = 1.0
    tn[tn == 0] = 1.0
    cos = (R / rn[:, None]) @ (T / tn[:, None]).T
    perm = -np.ones(n, dtype=int)
    used_r, used_t = set(), set()
    order = np.dstack(np.unravel_index(np.argsort(-np.abs(cos), axis=None), cos.shape))[0]
    for i, j in order:
        if i in used_r or j in used_t:
            continue
        perm[i] = j
        used_r.add(int(i))
        used_t.add(int(j))
        if len(used_r) == n:
            break
    return perm


def match_to_target(recovered: MlpParams, target: MlpParams) -> MatchReport:
    """Score a recovered model against normalize_rows(target).

    Hidden rows are permutation-matched layer by layer (the column order of
    each layer follows the previous layer's match); angles are signed, so a
    wrong sign shows up as an angle near pi. relu_removed rows and all-zero
    (dead) rows are excluded from the per-row stats. The final layer is
    compared through its class-difference row, the hard-label-visible part.
    """
    if recovered.dims != target.dims:
        raise ValueError(f"dims mismatch {recovered.dims} vs {target.dims}")
    tgt = normalize_rows(target)
    L = target.n_layers
    col_perm = np.arange(target.dims[0])
    matches: list[LayerMatch] = []
    for ell in range(1, L):
        R = recovered.weights[ell - 1]
        T = tgt.weights[ell - 1][:, col_perm]
        excluded = recovered.removed_mask(ell) | (np.linalg.norm(R, axis=1) == 0)
        perm = _greedy_match(R, T)
        cosines = np.array([
            float(R[i] @ T[perm[i]]) /
            max(np.linalg.norm(R[i]) * np.linalg.norm(T[perm[i]]), 1e-300)
            for i in range(R.shape[0])
        ])
        angles = np.arccos(np.clip(cosines, -1.0, 1.0))
        bias_err = np.array([
            abs(float(recovered.biases[ell - 1][i] - tgt.biases[ell - 1][perm[i]]))
            for i in range(R.shape[0])
        ])
        matches.append(LayerMatch(perm, angles, bias_err, excluded))
        col_perm = perm.copy()  # next layer's target columns follow this match
    # final layer: compare the pairwise difference map for 2-class targets
    Rw = recovered.weights[L - 1]
    Tw = tgt.weights[L - 1][:, col_perm]
    Rb, Tb = recovered.biases[L - 1], tgt.biases[L - 1]
    if target.dims[-1] == 2:
        rv = np.append(Rw[0] - Rw[1], Rb[0] - Rb[1])
        tv = np.append(Tw[0] - Tw[1], Tb[0] - Tb[1])
        rn, tn = np.linalg.norm(rv), np.linalg.norm(tv)
        if rn == 0 or tn == 0:
            final_angle, final_bias = np.pi, np.inf
        else:
            cosv = float(rv @ tv) / (rn * tn)
            final_angle = float(np.arccos(np.clip(cosv, -1.0, 1.0)))
            final_bias = abs(rv[-1] / rn - tv[-1] / tn)
    else:
        diffs_r = np.linalg.norm(Rw, axis=1)
        final_angle = 0.0 if np.allclose(Rw, Tw) and np.allclose(Rb, Tb) else np.pi
        final_bias = float(np.max(np.abs(Rb - Tb))) if diffs_r.size else 0.0
    return MatchReport(matches, final_angle, final_bias)


def empirical_epsilon(
    params: MlpParams,
    assumed_persistent: list[tuple[int, int]],
    assumed_dead: list[tuple[int, int]],
    n: int,
    seed: int,
) -> tuple[float, np.ndarray]:
    """Worst violation probability of the persistence/death assumptions and
    the per-sample mask of the assumptions all holding."""
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((n, params.dims[0]))
    _, pres = forward_batch(params, xs)
    holds = np.ones(n, dtype=bool)
    eps = 0.0
    for layer, k in assumed_persistent:
        active = pres[layer - 1][:, k] > 0
        eps = max(eps, float(np.mean(~active)))
        holds &= active
    for layer, k in assumed_dead:
        inactive = pres[layer - 1][:, k] <= 0
        eps = max(eps, float(np.mean(~inactive)))
        holds &= inactive
    return eps, holds
