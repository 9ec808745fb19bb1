"""Binary containers for models ("MFA1") and kernel stacks ("KRN1").

Both formats are little-endian: a 4-byte magic, u32 header fields, then f64
payload.  Loaders validate the magic, the exact payload length, and (for
models) that the mixture weights sum to 1 within 1e-9.
"""

from __future__ import annotations

import numpy as np

from .layer import KernelStack
from .mfa import FactorAnalyzer, MFAModel

MFA_MAGIC = b"MFA1"
KRN_MAGIC = b"KRN1"

_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def save_model(model: MFAModel, path) -> None:
    """Write magic, u32 (n, l, k), then per component: weight, mu, A column-major, d."""
    n, l, k = model.dim, model.rank, model.k
    parts = [MFA_MAGIC, np.array([n, l, k], dtype=_U32).tobytes()]
    for w, comp in zip(model.weights, model.components):
        rec = np.concatenate(
            [[w], comp.mean, comp.factors.ravel(order="F"), comp.noise]
        )
        parts.append(rec.astype(_F64).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> MFAModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MFA_MAGIC:
        raise ValueError(f"bad model magic {blob[:4]!r}")
    if len(blob) < 16:
        raise ValueError("truncated model file")
    n, l, k = (int(v) for v in np.frombuffer(blob, dtype=_U32, count=3, offset=4))
    if n < 1 or k < 1:
        raise ValueError(f"invalid dimensions n={n}, l={l}, k={k}")
    rec_len = 1 + n + n * l + n
    expect = 16 + 8 * k * rec_len
    if len(blob) != expect:
        raise ValueError(f"model file is {len(blob)} bytes, expected {expect}")
    payload = np.frombuffer(blob, dtype=_F64, offset=16)
    weights, comps = [], []
    for i in range(k):
        rec = payload[i * rec_len:(i + 1) * rec_len]
        weights.append(rec[0])
        mu = rec[1:1 + n]
        A = rec[1 + n:1 + n + n * l].reshape(n, l, order="F")
        d = rec[1 + n + n * l:]
        comps.append(FactorAnalyzer(mu, A, d))
    weights = np.asarray(weights)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
    if abs(weights.sum() - 1.0) > 1e-12:  # renormalize only when needed,
        weights = weights / weights.sum()  # keeping round-trips bitwise
    return MFAModel(tuple(comps), weights)


def save_kernels(kernels: KernelStack, path) -> None:
    """Write magic, u32 (F, C, kh, kw, stride_h, stride_w, pad_h, pad_w), weights, biases."""
    f, c, kh, kw = kernels.weights.shape
    header = np.array(
        [f, c, kh, kw, *kernels.stride, *kernels.padding], dtype=_U32
    )
    with open(path, "wb") as fh:
        fh.write(KRN_MAGIC)
        fh.write(header.tobytes())
        fh.write(kernels.weights.astype(_F64).tobytes())  # row-major
        fh.write(kernels.bias.astype(_F64).tobytes())


def load_kernels(path) -> KernelStack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != KRN_MAGIC:
        raise ValueError(f"bad kernel magic {blob[:4]!r}")
    if len(blob) < 36:
        raise ValueError("truncated kernel file")
    f, c, kh, kw, sh, sw, ph, pw = (
        int(v) for v in np.frombuffer(blob, dtype=_U32, count=8, offset=4)
    )
    n_w = f * c * kh * kw
    expect = 36 + 8 * (n_w + f)
    if len(blob) != expect:
        raise ValueError(f"kernel file is {len(blob)} bytes, expected {expect}")
    payload = np.frombuffer(blob, dtype=_F64, offset=36)
    weights = payload[:n_w].reshape(f, c, kh, kw)
    bias = payload[n_w:]
    return KernelStack(weights, bias, (sh, sw), (ph, pw))
