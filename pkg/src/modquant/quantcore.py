"""Group-wise quantization: round-to-nearest baseline and the
Hessian-weighted sequential quantizer with error compensation.

Weight matrices are I x O (input rows by output columns). Scales and zero
points form a G x O grid, one pair per (row group, output column); row i
belongs to group floor(i / groupsize). The Hessian-weighted quantizer
snaps input rows to the group grid one at a time and folds each row's
quantization residual into the rows not yet processed via the
inverse-Hessian update, minimizing the proxy loss trace(D^T H D) / O.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, NumericError
from .tensorio import check_matrix

SCALE_FLOOR = 1e-8
SUPPORTED_BITS = (2, 4, 8)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    groupsize: int = -1
    symmetric: bool = False
    damp_ratio: float = 0.01

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS or 32 % self.bits != 0:
            raise InvariantError(
                f"bits must be one of {SUPPORTED_BITS}, got {self.bits}"
            )
        if self.groupsize != -1 and self.groupsize < 1:
            raise InvariantError(f"groupsize must be positive or -1, got {self.groupsize}")
        if self.damp_ratio <= 0:
            raise InvariantError("damp_ratio must be > 0")

    @property
    def maxq(self) -> int:
        return (1 << self.bits) - 1

    def rows_per_group(self, n_rows: int) -> int:
        return n_rows if self.groupsize == -1 else self.groupsize


@dataclass
class GroupQuantParams:
    scales: np.ndarray  # (G, O) f32, strictly positive
    zeros: np.ndarray   # (G, O) int32 in [0, 2^N - 1]
    g_idx: np.ndarray   # (I,) int32, nondecreasing

    @property
    def num_groups(self) -> int:
        return self.scales.shape[0]


@dataclass
class QuantizedMatrix:
    qint: np.ndarray  # (I, O) int32 in [0, 2^N - 1]
    params: GroupQuantParams
    bits: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.qint.shape


def group_index(n_rows: int, groupsize: int) -> np.ndarray:
    """g_idx[i] = floor(i / groupsize); groupsize -1 means one group."""
    if groupsize == -1:
        groupsize = n_rows
    return (np.arange(n_rows, dtype=np.int32) // groupsize).astype(np.int32)


def compute_group_params(W: np.ndarray, cfg: QuantConfig) -> GroupQuantParams:
    """Fit per-(group, column) scales and integer zero points.

    Asymmetric: scale = (max - min) / maxq floored at SCALE_FLOOR,
    zero = clamp(round(-min / scale), 0, maxq), with the range widened
    to include 0 so a constant column lands exactly on a grid point.
    Symmetric: scale = max|w| / (2^(N-1) - 1), zero = 2^(N-1).
    """
    W = check_matrix(W)
    n_rows, n_cols = W.shape
    gs = cfg.rows_per_group(n_rows)
    g_idx = group_index(n_rows, cfg.groupsize)
    n_groups = int(g_idx[-1]) + 1

    scales = np.empty((n_groups, n_cols), dtype=np.float32)
    zeros = np.empty((n_groups, n_cols), dtype=np.int32)
    for g in range(n_groups):
        block = W[g * gs : min((g + 1) * gs, n_rows)]
        if cfg.symmetric:
            amax = np.abs(block).max(axis=0)
            s = amax / float((1 << (cfg.bits - 1)) - 1)
            z = np.full(n_cols, 1 << (cfg.bits - 1), dtype=np.int32)
        else:
            lo = np.minimum(block.min(axis=0), 0.0)
            hi = np.maximum(block.max(axis=0), 0.0)
            s = (hi - lo) / float(cfg.maxq)
            s = np.maximum(s, SCALE_FLOOR)
            z = np.clip(np.round(-lo / s), 0, cfg.maxq).astype(np.int32)
        scales[g] = np.maximum(s, SCALE_FLOOR).astype(np.float32)
        zeros[g] = z
    return GroupQuantParams(scales, zeros, g_idx)


def _snap(W, scales_rows, zeros_rows, maxq):
    q = np.round(W / scales_rows) + zeros_rows
    return np.clip(q, 0, maxq).astype(np.int32)


def rtn_quantize(
    W: np.ndarray, cfg: QuantConfig, params: GroupQuantParams | None = None
) -> QuantizedMatrix:
    """Round each weight independently to the nearest grid point."""
    W = check_matrix(W)
    if params is None:
        params = compute_group_params(W, cfg)
    s = params.scales[params.g_idx]
    z = params.zeros[params.g_idx]
    return QuantizedMatrix(_snap(W, s, z, cfg.maxq), params, cfg.bits)


def dequantize_matrix(q: QuantizedMatrix) -> np.ndarray:
    """out[i][o] = (qint[i][o] - zeros[g][o]) * scales[g][o], g = g_idx[i]."""
    s = q.params.scales[q.params.g_idx]
    z = q.params.zeros[q.params.g_idx]
    return ((q.qint - z) * s).astype(np.float32)


def gptq_quantize(W: np.ndarray, H: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """Sequential Hessian-weighted quantization with error compensation.

    Input rows are processed in natural order against group parameters
    fitted on the original weights; after snapping row i, the residual is
    propagated into rows > i through the upper Cholesky factor of H^-1,
    the step that lets later rows absorb earlier rounding error.
    """
    W = check_matrix(W)
    H = np.asarray(H, dtype=np.float64)
    n_rows, n_cols = W.shape
    if H.shape != (n_rows, n_rows):
        raise InvariantError(
            f"Hessian shape {H.shape} does not match weight rows {n_rows}"
        )
    params = compute_group_params(W, cfg)

    # Upper Cholesky factor U with H^-1 = U^T U; linear algebra runs in
    # f64 so the row feedback stays accurate for ill-conditioned H.
    try:
        c = np.linalg.cholesky(H)
        h_inv = np.linalg.inv(c.T) @ np.linalg.inv(c)
        u = np.linalg.cholesky(h_inv).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Cholesky failed; increase damping: {exc}"
        ) from exc

    work = W.astype(np.float64)
    qint = np.empty((n_rows, n_cols), dtype=np.int32)
    scales = params.scales.astype(np.float64)
    zeros = params.zeros.astype(np.float64)
    g_idx = params.g_idx
    maxq = cfg.maxq
    for i in range(n_rows):
        g = g_idx[i]
        s, z = scales[g], zeros[g]
        q = np.clip(np.round(work[i] / s) + z, 0, maxq)
        qint[i] = q.astype(np.int32)
        dq = (q - z) * s
        err = (work[i] - dq) / u[i, i]
        if i + 1 < n_rows:
            work[i + 1 :] -= np.outer(u[i, i + 1 :], err)
    return QuantizedMatrix(qint, params, cfg.bits)


def proxy_loss(W: np.ndarray, q: QuantizedMatrix, H: np.ndarray) -> float:
    """Hessian-weighted reconstruction error trace(D^T H D) / O."""
    d = (check_matrix(W) - dequantize_matrix(q)).astype(np.float64)
    h = np.asarray(H, dtype=np.float64)
    return float(np.einsum("io,ij,jo->", d, h, d) / d.shape[1])
