"""Cost volumes, elliptical feature matching, and flow metrics.

A cost volume stacks, for every pixel of a reference feature map, the
channel inner products against a window of displaced candidates in a
second map.  ``vanilla_cost_volume`` uses the plain inner product;
``learnable_cost_volume`` replaces it with the elliptical product
``f1^T W f2`` for an SPD kernel ``W``.  Window cells that fall outside the
second map contribute zero, matching zero padding.

Conventions, fixed once here and relied on everywhere else:

* window index ``k`` is the row (vertical) displacement, ``l`` the column
  (horizontal) displacement, each centred so cell ``((u-1)/2, (v-1)/2)``
  is zero displacement;
* a flow field stores plane 0 = horizontal and plane 1 = vertical
  displacement, in pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernel import SPDKernel

_TENSOR_MAGIC = b"LCVT"
_TENSOR_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature tensor of shape ``(channels, height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 3:
            raise ValueError(f"FeatureMap: expected 3-D data, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("FeatureMap: values must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CostVolume:
    """Matching costs of shape ``(u, v, height, width)`` with odd ``u, v``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 4:
            raise ValueError(f"CostVolume: expected 4-D data, got shape {d.shape}")
        u, v = d.shape[:2]
        if u % 2 == 0 or v % 2 == 0:
            raise ValueError(f"CostVolume: window extents must be odd, got {(u, v)}")
        if not np.all(np.isfinite(d)):
            raise ValueError("CostVolume: values must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def window(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Displacement field of shape ``(2, height, width)``: (horizontal, vertical)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 3 or d.shape[0] != 2:
            raise ValueError(f"FlowField: expected shape (2, h, w), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("FlowField: values must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)


def _check_pair(f1: FeatureMap, f2: FeatureMap, u: int, v: int) -> None:
    if f1.data.shape != f2.data.shape:
        raise ValueError(
            f"cost volume: feature shapes disagree, {f1.data.shape} vs {f2.data.shape}"
        )
    if u < 1 or v < 1 or u % 2 == 0 or v % 2 == 0:
        raise ValueError(f"cost volume: window extents must be odd and positive, got {(u, v)}")


def _padded(f2: np.ndarray, u: int, v: int) -> np.ndarray:
    c, h, w = f2.shape
    ru, rv = (u - 1) // 2, (v - 1) // 2
    out = np.zeros((c, h + u - 1, w + v - 1))
    out[:, ru : ru + h, rv : rv + w] = f2
    return out


def _correlate(f1: np.ndarray, f2: np.ndarray, u: int, v: int) -> np.ndarray:
    """Window correlation; channel reduction order is fixed, so repeated
    runs are bitwise identical."""
    h, w = f1.shape[1:]
    f2p = _padded(f2, u, v)
    out = np.empty((u, v, h, w))
    for k in range(u):
        for l in range(v):
            out[k, l] = np.einsum("chw,chw->hw", f1, f2p[:, k : k + h, l : l + w])
    return out


def cost_volume_bilinear(f1: FeatureMap, f2: FeatureMap, W: np.ndarray, u: int, v: int) -> CostVolume:
    """Cost volume under an arbitrary channel bilinear form ``f1^T W f2``.

    This is the generic workhorse: it is linear in ``W``, and both the
    vanilla and the SPD-kernel volumes are special cases.
    """
    _check_pair(f1, f2, u, v)
    W = np.asarray(W, dtype=float)
    c = f1.channels
    if W.shape != (c, c):
        raise ValueError(f"cost_volume_bilinear: W shape {W.shape}, expected {(c, c)}")
    g2 = (W @ f2.data.reshape(c, -1)).reshape(f2.data.shape)
    return CostVolume(_correlate(f1.data, g2, u, v))


def vanilla_cost_volume(f1: FeatureMap, f2: FeatureMap, u: int, v: int) -> CostVolume:
    """Plain inner-product cost volume over a ``u x v`` displacement window."""
    _check_pair(f1, f2, u, v)
    return CostVolume(_correlate(f1.data, f2.data, u, v))


def learnable_cost_volume(f1: FeatureMap, f2: FeatureMap, kernel: SPDKernel, u: int, v: int) -> CostVolume:
    """Cost volume under the elliptical product defined by an SPD kernel."""
    if f1.channels != kernel.dim:
        raise ValueError(
            f"learnable_cost_volume: {f1.channels} channels vs kernel dim {kernel.dim}"
        )
    return cost_volume_bilinear(f1, f2, kernel.W, u, v)


def wssd(f1: np.ndarray, f2: np.ndarray, kernel: SPDKernel) -> float:
    """Kernel-weighted sum of squared differences ``(f2 - f1)^T W (f2 - f1)``.

    Expands as ``f2^T W f2 + f1^T W f1 - 2 f1^T W f2``, so cost volumes
    built from the cross term carry the same information up to per-frame
    energies.  Nonnegative for every SPD ``W``.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != (kernel.dim,) or f2.shape != (kernel.dim,):
        raise ValueError(
            f"wssd: expected vectors of length {kernel.dim}, got {f1.shape} and {f2.shape}"
        )
    d = f2 - f1
    return float(d @ kernel.W @ d)


def decode_flow_argmax(cv: CostVolume) -> FlowField:
    """Winner-take-all flow: per pixel, the displacement of the largest cost.

    Exact ties are broken toward the smallest displacement magnitude and
    then by row-major window order, so decoding is deterministic.
    """
    u, v, h, w = cv.data.shape
    ru, rv = (u - 1) // 2, (v - 1) // 2
    flat = cv.data.reshape(u * v, h, w)
    dk = np.arange(u) - ru
    dl = np.arange(v) - rv
    mag2 = (dk[:, None] ** 2 + dl[None, :] ** 2).reshape(-1).astype(float)
    best = flat.max(axis=0)
    # argmin scans in row-major cell order, which supplies the final tie-break.
    ranked = np.where(flat == best, mag2[:, None, None], np.inf)
    idx = ranked.argmin(axis=0)
    flow_v = idx // v - ru
    flow_h = idx % v - rv
    return FlowField(np.stack([flow_h.astype(float), flow_v.astype(float)]))


def epe(pred: FlowField, gt: FlowField) -> float:
    """Average endpoint error: mean Euclidean distance between flows."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(
            f"epe: flow shapes disagree, {pred.data.shape} vs {gt.data.shape}"
        )
    diff = pred.data - gt.data
    return float(np.mean(np.sqrt(diff[0] ** 2 + diff[1] ** 2)))


def fl_all(pred: FlowField, gt: FlowField) -> float:
    """Percentage of outlier pixels: error > 3 px and > 5% of the true magnitude."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(
            f"fl_all: flow shapes disagree, {pred.data.shape} vs {gt.data.shape}"
        )
    diff = pred.data - gt.data
    err = np.sqrt(diff[0] ** 2 + diff[1] ** 2)
    mag = np.sqrt(gt.data[0] ** 2 + gt.data[1] ** 2)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(100.0 * np.mean(outlier))


def write_tensor(path, array: np.ndarray) -> None:
    """Serialize a dense array to the LCVT tensor format.

    Layout: magic ``LCVT``, version byte, rank byte, each dimension as
    uint32 little endian, then the payload as float64 little endian in
    row-major order.
    """
    arr = np.ascontiguousarray(np.asarray(array, dtype=float))
    if arr.ndim > 255:
        raise ValueError("write_tensor: rank exceeds the format's single byte")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sBB", _TENSOR_MAGIC, _TENSOR_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an LCVT tensor back into a float64 array."""
    with open(path, "rb") as fh:
        header = fh.read(6)
        if len(header) != 6:
            raise ValueError(f"read_tensor: truncated header in {path!r}")
        magic, version, rank = struct.unpack("<4sBB", header)
        if magic != _TENSOR_MAGIC:
            raise ValueError(f"read_tensor: bad magic {magic!r} in {path!r}")
        if version != _TENSOR_VERSION:
            raise ValueError(f"read_tensor: unsupported version {version}")
        dim_bytes = fh.read(4 * rank)
        if len(dim_bytes) != 4 * rank:
            raise ValueError(f"read_tensor: truncated dimensions in {path!r}")
        shape = struct.unpack(f"<{rank}I", dim_bytes)
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"read_tensor: truncated payload in {path!r}")
        if fh.read(1):
            raise ValueError(f"read_tensor: trailing bytes in {path!r}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
