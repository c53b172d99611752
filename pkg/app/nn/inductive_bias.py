"""Hard-coded inductive biases: convolution written as sparse attention.

A k_h×k_w zero-padded, same-size convolution over an H_f×W_f map equals
Y = Σᵢ Φᵢ X Wᵢ on the flattened token sequence X, where each Φᵢ is a constant
0/1 matrix selecting, for every output token, the input token at one kernel
offset. MHSA has the same form with dense, input-dependent matrices Ψ_h.
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.autodiff import ops
from app.autodiff.tensor import Tensor
from app.errors import ConfigurationError, ShapeError
import logging

logger = logging.getLogger(__name__)

Offset = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    """Sparse n×n binary matrix for one kernel offset, stored as (row, col) pairs."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    offset: Offset

    def __post_init__(self):
        if len(self.rows) != len(self.cols):
            raise ConfigurationError("selection matrix rows/cols length mismatch")
        if len(np.unique(self.rows)) != len(self.rows):
            raise ConfigurationError(f"offset {self.offset}: a row holds more than one entry")
        if len(self.cols) and (self.cols.min() < 0 or self.cols.max() >= self.n):
            raise ConfigurationError(f"offset {self.offset}: column index out of range for n={self.n}")

    @property
    def entries(self) -> List[Tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def row_sums(self) -> np.ndarray:
        sums = np.zeros(self.n, dtype=np.int64)
        sums[self.rows] = 1
        return sums

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=dtype)
        dense[self.rows, self.cols] = 1.0
        return dense

    def apply(self, x: Tensor) -> Tensor:
        """Φ·X over the token axis (second to last) as a row gather."""
        if x.shape[-2] != self.n:
            raise ShapeError(f"selection matrix for n={self.n} applied to input of shape {x.shape}")
        return ops.gather_rows(x, self.rows, self.cols, self.n)


@dataclass(frozen=True, eq=False)
class BiasSet:
    """Ordered selection matrices {Φ_1, …, Φ_N} sharing one feature map."""

    matrices: Tuple[SelectionMatrix, ...]
    kernel: Tuple[int, int]
    feature_shape: Tuple[int, int]

    def __post_init__(self):
        n = self.feature_shape[0] * self.feature_shape[1]
        if any(m.n != n for m in self.matrices):
            raise ConfigurationError("all selection matrices of a bias set must share n = H_f·W_f")

    def __len__(self) -> int:
        return len(self.matrices)

    def __iter__(self):
        return iter(self.matrices)

    def __getitem__(self, i: int) -> SelectionMatrix:
        return self.matrices[i]

    @property
    def n(self) -> int:
        return self.feature_shape[0] * self.feature_shape[1]

    @property
    def offsets(self) -> List[Offset]:
        return [m.offset for m in self.matrices]

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        return np.stack([m.to_dense(dtype) for m in self.matrices])


def build_selection_matrices(feature_shape: Tuple[int, int], kernel: Tuple[int, int]) -> BiasSet:
    """Selection matrices of a zero-padded, same-size k_h×k_w convolution.

    Matrices follow kernel raster order, so matrix i pairs with kernel tap
    (i // k_w, i % k_w) and the offset (i // k_w − k_h//2, i % k_w − k_w//2).
    """
    kh, kw = kernel
    hf, wf = feature_shape
    if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel {kh}x{kw}: both dimensions must be odd for same-size output")
    if hf < 1 or wf < 1:
        raise ConfigurationError(f"feature shape {feature_shape} must be positive")

    n = hf * wf
    hh, ww = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    hh, ww = hh.reshape(-1), ww.reshape(-1)
    matrices = []
    for i in range(kh):
        for j in range(kw):
            di, dj = i - kh // 2, j - kw // 2
            src_h, src_w = hh + di, ww + dj
            inside = (src_h >= 0) & (src_h < hf) & (src_w >= 0) & (src_w < wf)
            rows = np.flatnonzero(inside)
            cols = src_h[inside] * wf + src_w[inside]
            matrices.append(SelectionMatrix(n, rows, cols, (di, dj)))
    return BiasSet(tuple(matrices), (kh, kw), (hf, wf))


def generalized_kernel_size(heads: int) -> int:
    """Kernel side for an H-head generalized convolution: ⌈√H⌉, raised to the next odd number."""
    if heads < 1:
        raise ConfigurationError(f"head count must be positive, got {heads}")
    k = math.ceil(math.sqrt(heads))
    return k if k % 2 == 1 else k + 1


def center_first_key(offset: Offset) -> Tuple[int, int, int, int, int]:
    di, dj = offset
    return max(abs(di), abs(dj)), abs(di) + abs(dj), abs(di), di, dj


def select_generalized_biases(heads: int, full: BiasSet) -> BiasSet:
    """Pick ``heads`` matrices from ``full`` in center-first order.

    Order: L∞ distance from the center, then L1 distance, then |row offset|,
    row offset and column offset.
    """
    if heads < 1:
        raise ConfigurationError(f"head count must be positive, got {heads}")
    if heads > len(full):
        raise ConfigurationError(f"{heads} heads exceed the {len(full)} offsets of a "
                                 f"{full.kernel[0]}x{full.kernel[1]} kernel")
    ordered = sorted(full.matrices, key=lambda m: center_first_key(m.offset))
    return BiasSet(tuple(ordered[:heads]), full.kernel, full.feature_shape)


def generalized_biases(heads: int, feature_shape: Tuple[int, int]) -> BiasSet:
    k = generalized_kernel_size(heads)
    return select_generalized_biases(heads, build_selection_matrices(feature_shape, (k, k)))


def conv_matrix_form(x: Tensor, biases: BiasSet, weights: Sequence[Tensor]) -> Tensor:
    """Y = Σᵢ Φᵢ X Wᵢ with one d_in×d_out projection per selection matrix."""
    if len(weights) != len(biases):
        raise ConfigurationError(f"{len(weights)} projections given for {len(biases)} selection matrices")
    out = None
    for phi, w in zip(biases, weights):
        term = ops.matmul(phi.apply(x), w)
        out = term if out is None else out + term
    return out


def conv_generalized(x: Tensor, biases: BiasSet, w_vo: Sequence[Tensor],
                     head_bias: Optional[Sequence[Tensor]] = None, bias: Optional[Tensor] = None) -> Tensor:
    """Y = Σ_h Φ̃_h (X W_h + 1c_h) + b.

    ``w_vo`` holds one d×d projection per head. With weight sharing these are
    the products W_h^V W_h^O of a ViT block and ``head_bias`` carries
    b_h^V W_h^O; unshared agents pass private projections and no head bias.
    """
    if len(w_vo) != len(biases):
        raise ConfigurationError(f"{len(w_vo)} head projections given for {len(biases)} heads")
    if head_bias is not None and len(head_bias) != len(biases):
        raise ConfigurationError(f"{len(head_bias)} head biases given for {len(biases)} heads")
    out = None
    for h, (phi, w) in enumerate(zip(biases, w_vo)):
        projected = ops.matmul(x, w)
        if head_bias is not None:
            projected = projected + head_bias[h]
        term = phi.apply(projected)
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


@dataclass
class MHSAParams:
    """Projections of one attention layer; head h owns columns/rows h·d_k:(h+1)·d_k."""

    heads: int
    w_q: Optional[Tensor]
    w_k: Optional[Tensor]
    w_v: Tensor
    w_o: Tensor
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_o: Optional[Tensor] = None

    @property
    def dim(self) -> int:
        return self.w_v.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_v.shape[1] // self.heads

    def head_slice(self, h: int) -> slice:
        return slice(h * self.head_dim, (h + 1) * self.head_dim)

    def value_output(self, h: int) -> Tensor:
        """W_h^{VO} = W_h^V W_h^O (d×d)."""
        s = self.head_slice(h)
        return ops.matmul(self.w_v[:, s], self.w_o[s, :])

    def value_output_bias(self, h: int) -> Optional[Tensor]:
        if self.b_v is None:
            return None
        s = self.head_slice(h)
        return ops.matmul(ops.reshape(self.b_v[s], (1, -1)), self.w_o[s, :])


def _split_heads(t: Tensor, heads: int) -> Tensor:
    lead = t.shape[:-2]
    n, d = t.shape[-2:]
    t = ops.reshape(t, lead + (n, heads, d // heads))
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ops.transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    t = ops.transpose(t, axes)
    return ops.reshape(t, t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def _affine(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    y = ops.matmul(x, w)
    return y if b is None else y + b


def mhsa_forward(x: Tensor, params: MHSAParams) -> Tuple[Tensor, Tensor]:
    """Y = Σ_h Ψ_h (X W_h^V + b_h^V) W_h^O + b^O with Ψ_h = softmax(Q_h K_hᵀ/√d_k).

    Returns Y (…×n×d) and the attention matrices stacked on a head axis
    (…×H×n×n).
    """
    d = x.shape[-1]
    if d % params.heads:
        raise ConfigurationError(f"hidden size {d} is not divisible by {params.heads} heads")
    if params.dim != d:
        raise ShapeError(f"attention weights expect d={params.dim}, input has shape {x.shape}")
    if params.w_q is None or params.w_k is None:
        raise ConfigurationError("attention needs query and key projections")
    dk = d // params.heads
    q = _split_heads(_affine(x, params.w_q, params.b_q), params.heads)
    k = _split_heads(_affine(x, params.w_k, params.b_k), params.heads)
    v = _split_heads(_affine(x, params.w_v, params.b_v), params.heads)
    logits = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    attn = ops.softmax(logits, axis=-1)
    y = _affine(_merge_heads(ops.matmul(attn, v)), params.w_o, params.b_o)
    return y, attn


def per_head(attn: Tensor) -> List[np.ndarray]:
    """Split a stacked (H×n×n) attention tensor into per-head arrays."""
    return [attn.data[..., h, :, :] for h in range(attn.shape[-3])]


def attention_discrepancy(x: Tensor, attn: Union[Tensor, Sequence[Tensor]], biases: BiasSet,
                          w_vo: Sequence[Tensor], token_index: int) -> Tensor:
    """y_err = Σ_h (φ̃_h − ψ_h) X W_h^{VO} for token ``token_index``.

    ``x`` is n×d; ``attn`` is an H×n×n tensor or a list of H n×n tensors.
    """
    n = x.shape[-2]
    heads = attn.shape[0] if isinstance(attn, Tensor) else len(attn)
    if heads != len(biases) or len(w_vo) != len(biases):
        raise ConfigurationError(f"{heads} attention maps, {len(biases)} selection matrices and "
                                 f"{len(w_vo)} projections must agree")
    if not 0 <= token_index < n:
        raise ShapeError(f"token index {token_index} out of range for {n} tokens")
    out = None
    for h, (phi, w) in enumerate(zip(biases, w_vo)):
        phi_row = np.zeros((1, n), dtype=x.dtype)
        hit = np.flatnonzero(phi.rows == token_index)
        if hit.size:
            phi_row[0, phi.cols[hit[0]]] = 1.0
        psi = attn[h]
        psi_row = ops.reshape(psi[token_index], (1, n))
        diff = ops.sub(Tensor(phi_row), psi_row)
        term = ops.matmul(ops.matmul(diff, x), w)
        out = term if out is None else out + term
    return ops.reshape(out, (x.shape[-1],))


def _triplet_lines(matrix: np.ndarray) -> Iterable[str]:
    rows, cols = np.nonzero(matrix)
    for r, c in zip(rows.tolist(), cols.tolist()):
        yield f"{r} {c} {float(matrix[r, c])!r}"


def export_triplets(obj: Union[SelectionMatrix, BiasSet, np.ndarray, Tensor], path: Union[str, Path],
                    header: Optional[str] = None) -> Path:
    """Write ``row col value`` lines; bias sets get one ``# offset`` block per matrix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: List[str] = []
    if header:
        lines.append(f"# {header}")
    if isinstance(obj, BiasSet):
        lines.append(f"# kernel {obj.kernel[0]}x{obj.kernel[1]} feature {obj.feature_shape[0]}x{obj.feature_shape[1]}")
        for m in obj:
            lines.append(f"# offset {m.offset[0]} {m.offset[1]}")
            lines.extend(f"{r} {c} 1" for r, c in m.entries)
    elif isinstance(obj, SelectionMatrix):
        lines.append(f"# offset {obj.offset[0]} {obj.offset[1]}")
        lines.extend(f"{r} {c} 1" for r, c in obj.entries)
    else:
        dense = obj.data if isinstance(obj, Tensor) else np.asarray(obj)
        if dense.ndim != 2:
            raise ShapeError(f"triplet export needs a 2-d matrix, got shape {dense.shape}")
        lines.extend(_triplet_lines(dense))
    path.write_text("\n".join(lines) + "\n")
    logger.debug(f"Wrote {len(lines)} triplet lines to {path}")
    return path


def read_triplets(path: Union[str, Path], n: int) -> np.ndarray:
    """Dense n×n matrix from a single-matrix triplet file."""
    dense = np.zeros((n, n))
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        r, c, v = line.split()
        dense[int(r), int(c)] = float(v)
    return dense
