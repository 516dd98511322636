"""Exact ReLU MLP engine.

Forward evaluation, hard labeling, activation patterns, local affine maps,
equivalence transforms (row normalization, neuron permutation), seeded
initialization, planted always-on/always-off neurons, and JSON round-trip.

Conventions fixed here and relied on everywhere else:
  * argmax ties break to the lowest index;
  * a pre-activation of exactly 0 counts as inactive;
  * the last layer is affine (no ReLU).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed or fails shape validation."""


class ZeroRowError(ValueError):
    """Raised when row normalization meets an all-zero hidden weight row."""


@dataclass(frozen=True)
class MlpParams:
    """Full parameter set of an L-layer ReLU network.

    weights[l] has shape (dims[l+1], dims[l]); biases[l] has length dims[l+1].
    Hidden layers are 1..L-1; layer L is affine. Arrays are frozen after
    construction, so instances are safe to share across threads.
    """

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    relu_removed: tuple[np.ndarray, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ModelFormatError(f"invalid layer widths {dims}")
        L = len(dims) - 1
        if len(self.weights) != L or len(self.biases) != L:
            raise ModelFormatError(
                f"expected {L} weight/bias pairs, got {len(self.weights)}/{len(self.biases)}"
            )
        ws, bs = [], []
        for ell, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            w = np.ascontiguousarray(np.asarray(w, dtype=float))
            b = np.ascontiguousarray(np.asarray(b, dtype=float)).reshape(-1)
            if w.shape != (dims[ell], dims[ell - 1]):
                raise ModelFormatError(
                    f"layer {ell}: weight shape {w.shape} != {(dims[ell], dims[ell - 1])}"
                )
            if b.shape != (dims[ell],):
                raise ModelFormatError(f"layer {ell}: bias length {b.shape[0]} != {dims[ell]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ModelFormatError(f"layer {ell}: non-finite entries")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        if self.relu_removed is not None:
            rr = []
            for ell in range(1, L):
                m = np.ascontiguousarray(np.asarray(self.relu_removed[ell - 1], dtype=bool))
                if m.shape != (dims[ell],):
                    raise ModelFormatError(f"layer {ell}: relu_removed length mismatch")
                m.setflags(write=False)
                rr.append(m)
            if len(self.relu_removed) != L - 1:
                raise ModelFormatError("relu_removed must cover exactly the hidden layers")
            object.__setattr__(self, "relu_removed", tuple(rr))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def removed_mask(self, ell: int) -> np.ndarray:
        """Pass-through (ReLU skipped) mask for hidden layer `ell`."""
        if self.relu_removed is None:
            return np.zeros(self.dims[ell], dtype=bool)
        return self.relu_removed[ell - 1]


@dataclass(frozen=True)
class ActivationPattern:
    """0/1 on-state of every hidden neuron, one vector per hidden layer."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for v in self.layers:
            v = np.asarray(v, dtype=np.int8)
            if not np.isin(v, (0, 1)).all():
                raise ValueError("activation pattern entries must be 0 or 1")
            v.setflags(write=False)
            frozen.append(v)
        object.__setattr__(self, "layers", tuple(frozen))

    def __eq__(self, other) -> bool:
        return isinstance(other, ActivationPattern) and len(self.layers) == len(
            other.layers
        ) and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))


@dataclass(frozen=True)
class LocalAffine:
    """Affine map F x + beta equal to f^(depth) on the linear region of its anchor."""

    F: np.ndarray
    beta: np.ndarray
    depth: int


@dataclass(frozen=True)
class LabeledOutput:
    logits: np.ndarray
    label: int


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate the network, returning (logits, post-ReLU hidden outputs).

    Hidden rows flagged relu_removed pass through without clamping.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != params.dims[0]:
        raise ModelFormatError(f"input length {x.shape[0]} != d0 {params.dims[0]}")
    z = x
    hidden: list[np.ndarray] = []
    L = params.n_layers
    for ell in range(1, L):
        pre = params.weights[ell - 1] @ z + params.biases[ell - 1]
        z = np.where(pre > 0, pre, 0.0)
        removed = params.removed_mask(ell)
        if removed.any():
            z = np.where(removed, pre, z)
        hidden.append(z)
    logits = params.weights[L - 1] @ z + params.biases[L - 1]
    return logits, hidden


def forward_batch(params: MlpParams, xs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Vectorized forward over rows of `xs`; returns (logits, per-layer pre-activations)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != params.dims[0]:
        raise ModelFormatError(f"batch shape {xs.shape} incompatible with d0={params.dims[0]}")
    z = xs
    pres: list[np.ndarray] = []
    L = params.n_layers
    for ell in range(1, L):
        pre = z @ params.weights[ell - 1].T + params.biases[ell - 1]
        pres.append(pre)
        z = np.maximum(pre, 0.0)
        removed = params.removed_mask(ell)
        if removed.any():
            z = np.where(removed, pre, z)
    logits = z @ params.weights[L - 1].T + params.biases[L - 1]
    return logits, pres


def hard_label(logits: np.ndarray) -> int:
    """Argmax label with ties broken to the lowest index."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    if logits.size == 0:
        raise ValueError("empty logit vector")
    return int(np.argmax(logits))


def label_point(params: MlpParams, x: np.ndarray) -> int:
    return hard_label(forward(params, x)[0])


def pre_activations(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Hidden-layer pre-activation vectors at x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    z = x
    pres = []
    for ell in range(1, params.n_layers):
        pre = params.weights[ell - 1] @ z + params.biases[ell - 1]
        pres.append(pre)
        z = np.where(pre > 0, pre, 0.0)
        removed = params.removed_mask(ell)
        if removed.any():
            z = np.where(removed, pre, z)
    return pres


def activation_pattern(params: MlpParams, x: np.ndarray) -> ActivationPattern:
    """On/off state of each hidden neuron at x (pre-activation 0 counts as off)."""
    return ActivationPattern(tuple((pre > 0).astype(np.int8) for pre in pre_activations(params, x)))


def _diag_vectors(params: MlpParams, pattern: ActivationPattern) -> list[np.ndarray]:
    """Effective diagonal of each hidden layer: pattern, with removed rows forced on."""
    diags = []
    for ell, v in enumerate(pattern.layers, start=1):
        d = v.astype(float)
        removed = params.removed_mask(ell)
        if removed.any():
            d = np.where(removed, 1.0, d)
        diags.append(d)
    return diags


def local_affine(params: MlpParams, x: np.ndarray, depth: int) -> LocalAffine:
    """Pre-activation affine map at layer `depth` on x's linear region.

    F = W^(depth) D^(depth-1) W^(depth-1) ... D^(1) W^(1) and beta is the
    matching alternating sum of biases; at depth == L this is the network's
    full local map.
    """
    L = params.n_layers
    if not 1 <= depth <= L:
        raise ValueError(f"depth must be in [1, {L}], got {depth}")
    diags = _diag_vectors(params, activation_pattern(params, x))
    F = params.weights[0].copy()
    beta = params.biases[0].copy()
    for ell in range(2, depth + 1):
        d = diags[ell - 2]
        F = params.weights[ell - 1] @ (d[:, None] * F)
        beta = params.weights[ell - 1] @ (d * beta) + params.biases[ell - 1]
    return LocalAffine(F=F, beta=beta, depth=depth)


def hidden_jacobian(params: MlpParams, x: np.ndarray, depth: int) -> np.ndarray:
    """Jacobian of the post-ReLU hidden output z^(depth) at x.

    Equals D^(depth) W^(depth) ... D^(1) W^(1); depth 0 gives the identity.
    """
    if depth == 0:
        return np.eye(params.dims[0])
    if not 1 <= depth <= params.n_layers - 1:
        raise ValueError(f"depth must be in [0, {params.n_layers - 1}], got {depth}")
    diags = _diag_vectors(params, activation_pattern(params, x))
    J = diags[0][:, None] * params.weights[0]
    for ell in range(2, depth + 1):
        J = diags[ell - 1][:, None] * (params.weights[ell - 1] @ J)
    return J


def normalize_rows(params: MlpParams) -> MlpParams:
    """Rescale every hidden row to unit norm, preserving the hard-label map.

    The positive scale of each row is pushed into the next layer's columns;
    rows flagged relu_removed are left untouched (their scale is not
    observable separately from the next layer).
    """
    ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    for ell in range(1, params.n_layers):
        removed = params.removed_mask(ell)
        norms = np.linalg.norm(ws[ell - 1], axis=1)
        for k, nk in enumerate(norms):
            if removed[k]:
                continue
            if nk == 0.0:
                raise ZeroRowError(f"zero weight row at layer {ell}, neuron {k}")
            ws[ell - 1][k] /= nk
            bs[ell - 1][k] /= nk
            ws[ell][:, k] *= nk
    return MlpParams(params.dims, tuple(ws), tuple(bs), relu_removed=params.relu_removed)


def permute_layer(params: MlpParams, ell: int, permutation: Sequence[int]) -> MlpParams:
    """Reorder the neurons of hidden layer `ell`; the label map is unchanged."""
    if not 1 <= ell <= params.n_layers - 1:
        raise ValueError(f"layer index {ell} is not a hidden layer")
    perm = np.asarray(permutation, dtype=int)
    d = params.dims[ell]
    if perm.shape != (d,) or not np.array_equal(np.sort(perm), np.arange(d)):
        raise ValueError(f"permutation is not a bijection on [{d}]")
    ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    ws[ell - 1] = ws[ell - 1][perm]
    bs[ell - 1] = bs[ell - 1][perm]
    ws[ell] = ws[ell][:, perm]
    rr = params.relu_removed
    if rr is not None:
        rr = list(rr)
        rr[ell - 1] = rr[ell - 1][perm]
        rr = tuple(rr)
    return MlpParams(params.dims, tuple(ws), tuple(bs), relu_removed=rr)


def kaiming_init(dims: Sequence[int], seed: int) -> MlpParams:
    """Kaiming-normal weights (N(0, 2/fan_in) entries), zero biases, seeded."""
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for ell in range(1, len(dims)):
        fan_in = dims[ell - 1]
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[ell], fan_in)))
        bs.append(np.zeros(dims[ell]))
    return MlpParams(dims, tuple(ws), tuple(bs))


def plant_special_neurons(
    params: MlpParams, spec: Sequence[tuple[int, int, str, float]]
) -> MlpParams:
    """Force listed hidden neurons (layer, index, kind, magnitude) always on/off.

    kind 'persistent' sets the bias to +magnitude, 'dead' to -magnitude;
    magnitude should dominate the typical pre-activation scale.
    """
    if not spec:
        return params
    bs = [b.copy() for b in params.biases]
    for layer, index, kind, magnitude in spec:
        if not 1 <= layer <= params.n_layers - 1:
            raise ValueError(f"layer {layer} is not a hidden layer")
        if not 0 <= index < params.dims[layer]:
            raise ValueError(f"neuron index {index} out of range for layer {layer}")
        if kind == "persistent":
            bs[layer - 1][index] = abs(magnitude)
        elif kind == "dead":
            bs[layer - 1][index] = -abs(magnitude)
        else:
            raise ValueError(f"unknown planted kind {kind!r}")
    return MlpParams(params.dims, params.weights, tuple(bs), relu_removed=params.relu_removed)


def save_model(params: MlpParams, path) -> None:
    """Write the JSON interchange format (round-trip exact floats)."""
    doc = {
        "dims": list(params.dims),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    if params.relu_removed is not None:
        doc["relu_removed"] = [m.astype(bool).tolist() for m in params.relu_removed]
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> MlpParams:
    """Read the JSON interchange format written by save_model."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(
                f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}"
            ) from exc
    for key in ("dims", "weights", "biases"):
        if key not in doc:
            raise ModelFormatError(f"{path}: missing key {key!r}")
    rr = None
    if doc.get("relu_removed") is not None:
        rr = tuple(np.asarray(m, dtype=bool) for m in doc["relu_removed"])
    try:
        return MlpParams(
            tuple(doc["dims"]),
            tuple(np.asarray(w, dtype=float) for w in doc["weights"]),
            tuple(np.asarray(b, dtype=float) for b in doc["biases"]),
            relu_removed=rr,
        )
    except (ModelFormatError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def pack(params: MlpParams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten parameters for the compiled kernels.

    Returns (w_flat, b_flat, dims, removed_flat); removed_flat marks hidden
    rows whose ReLU is skipped, aligned with b_flat's hidden segment layout.
    """
    w_flat = np.concatenate([w.ravel() for w in params.weights])
    b_flat = np.concatenate(list(params.biases))
    dims = np.asarray(params.dims, dtype=np.int64)
    removed = np.zeros(int(sum(params.dims[1:])), dtype=np.uint8)
    off = 0
    for ell in range(1, params.n_layers):
        d = params.dims[ell]
        removed[off : off + d] = params.removed_mask(ell).astype(np.uint8)
        off += d
    return w_flat, b_flat, dims, removed
