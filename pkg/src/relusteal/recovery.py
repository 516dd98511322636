"""Layer-by-layer parameter recovery from intersection spaces.

Consistency checking decides whether spaces share one activation boundary by
rank-deficiency of their mapped tangent images; signature recovery extracts
the one missing direction as the smallest eigenvector of the accumulated
Gram matrix; sign recovery probes which side of the boundary changes deeper
behavior; bias recovery reads the pre-activation zero at intersection
points. All forward evaluation here goes through the *recovered* layers, so
the attack remains hard-label end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boundary import IntersectionSpace
from .linalg import MEASURED_RTOL, RANK_RTOL, numerical_rank, smallest_eigvec
from .oracle import OracleSession


class StateError(RuntimeError):
    """Recovered layers required for this operation are missing."""


class AmbiguousSignError(RuntimeError):
    """Sign probes could not separate the two sides."""


@dataclass
class RecoveredLayer:
    """One recovered hidden layer; rows are unit-norm unless relu_removed,
    dead rows are exactly zero."""

    W_hat: np.ndarray
    b_hat: np.ndarray
    relu_removed: np.ndarray
    provenance: list[str]

    @classmethod
    def empty(cls, width: int, fan_in: int) -> "RecoveredLayer":
        return cls(
            W_hat=np.zeros((width, fan_in)),
            b_hat=np.zeros(width),
            relu_removed=np.zeros(width, dtype=bool),
            provenance=["unrecovered"] * width,
        )

    @property
    def width(self) -> int:
        return self.W_hat.shape[0]

    def unrecovered_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.provenance) if p == "unrecovered"]


@dataclass
class Signature:
    """Scale-free weight direction of one neuron (unit norm on its support)."""

    layer: int
    vector: np.ndarray
    estimated_mask: np.ndarray
    lambda_min: float
    n_spaces: int
    neuron: int | None = None


@dataclass
class SignatureResult:
    status: str  # 'ok' | 'insufficient' | 'inconsistent'
    signature: Signature | None = None


def recovered_state(recovered: list[RecoveredLayer], x):
    """Hidden outputs and effective on-states of x through recovered layers.

    Returns (z, act_list, eff_list): act marks pre-activation > 0 (used for
    active-neuron counts), eff additionally forces relu_removed rows on.
    """
    z = np.asarray(x, dtype=float)
    acts, effs = [], []
    for layer in recovered:
        pre = layer.W_hat @ z + layer.b_hat
        act = pre > 0
        eff = act | layer.relu_removed
        z = np.where(eff, pre, 0.0)
        acts.append(act)
        effs.append(eff)
    return z, acts, effs


def recovered_jacobian(recovered: list[RecoveredLayer], x) -> np.ndarray:
    """Jacobian of the recovered hidden output at x (identity for no layers)."""
    x = np.asarray(x, dtype=float)
    J = np.eye(x.shape[0])
    z = x
    for layer in recovered:
        pre = layer.W_hat @ z + layer.b_hat
        eff = (pre > 0) | layer.relu_removed
        J = eff[:, None] * (layer.W_hat @ J)
        z = np.where(eff, pre, 0.0)
    return J


def mapped_image(recovered: list[RecoveredLayer], space: IntersectionSpace) -> np.ndarray:
    """The space's tangent basis pushed through the recovered layers."""
    return recovered_jacobian(recovered, space.s) @ space.N


def is_consistent(
    s1: IntersectionSpace,
    s2: IntersectionSpace,
    recovered: list[RecoveredLayer],
    rtol: float = MEASURED_RTOL,
) -> bool:
    """True iff the two spaces can lie on one activation boundary of layer
    len(recovered)+1: their mapped tangent images together miss at least one
    direction of the active subspace."""
    img1 = mapped_image(recovered, s1)
    img2 = mapped_image(recovered, s2)
    if recovered:
        _, _, eff1 = recovered_state(recovered, s1.s)
        _, _, eff2 = recovered_state(recovered, s2.s)
        nu = int(np.sum(eff1[-1] | eff2[-1]))
    else:
        nu = s1.s.shape[0]
    if nu == 0:
        return False
    return numerical_rank(np.hstack([img1, img2]), rtol) < nu


def is_consistent_multi(
    spaces: list[IntersectionSpace],
    recovered: list[RecoveredLayer],
    rtol: float = MEASURED_RTOL,
    images: list[np.ndarray] | None = None,
) -> bool:
    """Group form of the consistency check: the stacked mapped images of all
    spaces together must miss at least one active direction."""
    if images is None:
        images = [mapped_image(recovered, sp) for sp in spaces]
    if recovered:
        union = np.zeros(recovered[-1].width, dtype=bool)
        for sp in spaces:
            _, _, eff = recovered_state(recovered, sp.s)
            union |= eff[-1]
        nu = int(union.sum())
    else:
        nu = spaces[0].s.shape[0]
    if nu == 0:
        return False
    return numerical_rank(np.hstack(images), rtol) < nu


def cluster_spaces(
    spaces: list[IntersectionSpace],
    recovered: list[RecoveredLayer],
    rtol: float = MEASURED_RTOL,
    max_tested_members: int = 20,
) -> list[list[IntersectionSpace]]:
    """Greedy partition: a space joins the first cluster it is consistent
    with *as a group* (pairwise checks alone cannot separate bends that
    border a shared flat decision piece from bends of one neuron, so each
    join is validated against the accumulated members)."""
    clusters: list[list[IntersectionSpace]] = []
    cluster_imgs: list[list[np.ndarray]] = []
    for sp in spaces:
        img = mapped_image(recovered, sp)
        for cluster, imgs in zip(clusters, cluster_imgs):
            head = min(len(cluster), max_tested_members)
            if is_consistent_multi(cluster[:head] + [sp], recovered, rtol,
                                   images=imgs[:head] + [img]):
                cluster.append(sp)
                imgs.append(img)
                break
        else:
            clusters.append([sp])
            cluster_imgs.append([img])
    return clusters


def _solve_missing_direction(images: list[np.ndarray], d_prev: int, rtol: float):
    """Support-restricted rank analysis and least-eigenvector extraction."""
    stacked = np.hstack(images)
    row_norms = np.linalg.norm(stacked, axis=1)
    scale = row_norms.max() if row_norms.size else 0.0
    if scale == 0.0:
        return "insufficient", None, None, 0.0
    support = row_norms > rtol * scale
    B = stacked[support]
    n_sup = int(support.sum())
    rank = numerical_rank(B, rtol)
    if rank >= n_sup:
        return "inconsistent", None, support, 0.0
    if rank < n_sup - 1:
        return "insufficient", None, support, 0.0
    Q = B @ B.T
    lam, w_sup = smallest_eigvec(Q)
    w = np.zeros(d_prev)
    w[support] = w_sup
    return "ok", w, support, lam


def recover_signature(
    cluster: list[IntersectionSpace],
    recovered: list[RecoveredLayer],
    rtol: float = MEASURED_RTOL,
    trim: bool = True,
) -> SignatureResult:
    """The cluster's common orthogonal direction: unit w with w ⟂ every
    mapped tangent image (Gram least-eigenvector), restricted to the
    coordinates that were active in at least one cluster point.

    'insufficient' when the images span too little (need more spaces),
    'inconsistent' when they span everything (the cluster mixes neurons).
    With trim=True, spaces whose images violate the consensus direction by
    orders of magnitude are dropped once and the solve repeats: single
    contaminated spaces otherwise dominate the smallest eigenpair.
    """
    if not cluster:
        return SignatureResult("insufficient")
    layer = len(recovered) + 1
    d_prev = recovered[-1].width if recovered else cluster[0].s.shape[0]
    images = [mapped_image(recovered, sp) for sp in cluster]
    status, w, support, lam = _solve_missing_direction(images, d_prev, rtol)
    used = list(range(len(cluster)))
    if status == "ok" and trim and len(cluster) >= 4:
        resid = np.array([
            np.linalg.norm(img.T @ w) / max(np.linalg.norm(img), 1e-300) for img in images
        ])
        floor = max(np.median(resid), 1e-14)
        keep = resid <= 30.0 * floor
        if keep.sum() >= max(3, int(0.5 * len(cluster))) and not keep.all():
            kept_imgs = [img for img, k in zip(images, keep) if k]
            status2, w2, support2, lam2 = _solve_missing_direction(kept_imgs, d_prev, rtol)
            if status2 == "ok":
                status, w, support, lam = status2, w2, support2, lam2
                used = [i for i, k in enumerate(keep) if k]
    if status != "ok":
        return SignatureResult(status)
    return SignatureResult(
        "ok",
        Signature(
            layer=layer,
            vector=w,
            estimated_mask=support,
            lambda_min=float(lam),
            n_spaces=len(used),
        ),
    )


@dataclass(frozen=True)
class SignProbeConfig:
    n_probe_pairs: int = 64       # max paired displacement probes
    tau: float = 1e-4             # feature-space displacement size
    decision_ratio: float = 4.0   # |shift| ratio declaring one side inert
    scan_mult: float = 256.0      # boundary re-search range, times tau


def _boundary_shift(session, p, v, tau, cfg) -> float | None:
    """|offset| of the decision boundary from p along +-v, or None."""
    ref = session.query(p)
    reach = cfg.scan_mult * tau
    for sgn in (1.0, -1.0):
        t_lo, t_hi, found = session.first_flip(p, sgn * v, ref, 1e-7 * tau, reach)
        if found:
            lo, hi = session.bisect(p + sgn * t_lo * v, p + sgn * t_hi * v, 0.0, max_iter=60)
            return float(np.linalg.norm(0.5 * (lo + hi) - p))
    return None


def recover_sign(
    sig: Signature,
    cluster: list[IntersectionSpace],
    recovered: list[RecoveredLayer],
    session: OracleSession,
    config: SignProbeConfig = SignProbeConfig(),
) -> int:
    """Orient the signature: displace inputs so only this neuron's
    pre-activation moves by +-tau; the decision boundary shifts on the
    neuron's active side and stays put on the clamped side.

    Majority vote over cluster points; AmbiguousSignError when no point
    separates the sides by the configured ratio.
    """
    votes = 0
    tried = 0
    for sp in cluster:
        if tried >= config.n_probe_pairs:
            break
        s = sp.s
        J = recovered_jacobian(recovered, s)
        delta, *_ = np.linalg.lstsq(J, config.tau * sig.vector, rcond=None)
        leak = np.linalg.norm(J @ delta - config.tau * sig.vector)
        if leak > 0.01 * config.tau:
            continue  # signature direction not reachable from this anchor
        v = sp.v_left if np.linalg.norm(sp.v_left) > 0 else sp.v_right
        if np.linalg.norm(v) == 0:
            continue
        tried += 1
        shift_plus = _boundary_shift(session, s + delta, v, config.tau, config)
        shift_minus = _boundary_shift(session, s - delta, v, config.tau, config)
        if shift_plus is None or shift_minus is None:
            continue
        lo, hi = sorted((shift_plus, shift_minus))
        if hi < config.decision_ratio * max(lo, 1e-15):
            continue  # sides indistinguishable here
        votes += 1 if shift_plus > shift_minus else -1
    if votes == 0:
        raise AmbiguousSignError(
            f"sign undecided after {tried} probe points (layer {sig.layer})"
        )
    return 1 if votes > 0 else -1


def recover_bias(
    sig_signed: Signature,
    cluster: list[IntersectionSpace],
    recovered: list[RecoveredLayer],
) -> tuple[float, float]:
    """Bias from the pre-activation zero at intersection points.

    Returns (bias, spread); spread is the max deviation across cluster
    points and flags inconsistent clusters when large.
    """
    if not cluster:
        raise StateError("bias recovery needs at least one intersection point")
    vals = []
    for sp in cluster:
        z, _, _ = recovered_state(recovered, sp.s)
        vals.append(-float(sig_signed.vector @ z))
    vals = np.asarray(vals)
    b = float(np.mean(vals))
    spread = float(np.max(np.abs(vals - b))) if vals.size > 1 else 0.0
    return b, spread


@dataclass
class NeuronRecovery:
    row: np.ndarray
    bias: float
    spread: float
    n_spaces: int
    cluster: list[IntersectionSpace] = field(repr=False, default_factory=list)


def extract_layer_from_clusters(
    session: OracleSession,
    clusters: list[list[IntersectionSpace]],
    recovered: list[RecoveredLayer],
    width: int,
    min_spaces: int,
    sign_config: SignProbeConfig = SignProbeConfig(),
    rtol: float = MEASURED_RTOL,
) -> tuple[RecoveredLayer, list[NeuronRecovery], list[list[IntersectionSpace]]]:
    """Recover as many neurons of the next layer as the clusters support.

    Returns the layer (unrecovered slots zeroed and flagged), per-neuron
    diagnostics, and the clusters that produced signatures (index-aligned
    with the recovered rows).
    """
    d_prev = recovered[-1].width if recovered else session.input_dim
    layer = RecoveredLayer.empty(width, d_prev)
    recov: list[NeuronRecovery] = []
    used_clusters: list[list[IntersectionSpace]] = []
    row = 0
    for cluster in sorted(clusters, key=len, reverse=True):
        if row >= width or len(cluster) < min_spaces:
            continue
        res = recover_signature(cluster, recovered, rtol)
        if res.status != "ok":
            continue
        sig = res.signature
        try:
            sign = recover_sign(sig, cluster, recovered, session, sign_config)
        except AmbiguousSignError:
            continue
        sig.vector = sign * sig.vector
        bias, spread = recover_bias(sig, cluster, recovered)
        layer.W_hat[row] = sig.vector
        layer.b_hat[row] = bias
        layer.provenance[row] = "normal"
        recov.append(NeuronRecovery(sig.vector, bias, spread, sig.n_spaces, cluster))
        used_clusters.append(cluster)
        row += 1
    return layer, recov, used_clusters
