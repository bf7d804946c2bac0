"""Matrix-multiplication backends: exact arithmetic and the optical emulator.

The optical path encodes a weight matrix in transmittance levels of the
reconfigurable array and a vector in ideal (continuous) modulator
transmittances, sums intensities onto photodetectors, adds shot noise and
decodes the photocurrent digitally. Signed operands are split into
non-negative halves and recombined from four passes.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DegenerateDeviceError, DomainError
from .rng import stream

ELECTRON_CHARGE_C = 1.602176634e-19


@dataclass(frozen=True)
class EmulatorConfig:
    array_rows: int = 4
    array_cols: int = 4
    p_total_w: float = 0.1
    bandwidth_hz: float = 1e9
    responsivity_a_per_w: float = 1.0
    electron_charge_c: float = ELECTRON_CHARGE_C
    noise_enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.array_rows < 1 or self.array_cols < 1:
            raise DomainError("array dimensions must be >= 1")
        for name in ("p_total_w", "bandwidth_hz", "responsivity_a_per_w", "electron_charge_c"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    @property
    def channel_power_w(self) -> float:
        return self.p_total_w / self.array_cols

    def replace(self, **kw) -> EmulatorConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EncodedMVM:
    v_plus: np.ndarray
    v_minus: np.ndarray
    w_plus: np.ndarray
    w_minus: np.ndarray
    scale_v: float
    scale_w: float


def exact_gemm(A, B) -> np.ndarray:
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DomainError(f"cannot multiply shapes {A.shape} and {B.shape}")
    return A @ B


def operand_scale(x: np.ndarray, mode: str = "unit") -> np.ndarray:
    """Scale that maps ``x`` into [-1, 1], taken over the last two axes.

    ``unit``: max(1, max|x|), so operands already inside [-1, 1] are left alone.
    ``max``: max|x| (1 for an all-zero operand), i.e. full-range normalisation.
    """
    x = np.asarray(x, dtype=float)
    m = np.max(np.abs(x), axis=(-2, -1), keepdims=True) if x.ndim >= 2 else np.max(np.abs(x), keepdims=True)
    if mode == "unit":
        return np.maximum(m, 1.0)
    if mode == "max":
        return np.where(m > 0, m, 1.0)
    raise DomainError(f"unknown scale mode {mode!r}")


def split_signed(x, scale) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float) / scale
    return np.maximum(x, 0.0), np.maximum(-x, 0.0)


def decompose(v, W) -> EncodedMVM:
    """Split a vector and matrix into scaled non-negative halves."""
    v, W = np.asarray(v, dtype=float), np.asarray(W, dtype=float)
    sv = float(max(1.0, np.max(np.abs(v), initial=0.0)))
    sw = float(max(1.0, np.max(np.abs(W), initial=0.0)))
    vp, vm = split_signed(v, sv)
    wp, wm = split_signed(W, sw)
    return EncodedMVM(vp, vm, wp, wm, sv, sw)


def _check_device(tt) -> None:
    if not tt.t_diff > 0:
        raise DegenerateDeviceError("device has t_diff == 0; the photocurrent cannot be decoded")


def realized_transmittance(w01, tt) -> np.ndarray:
    """Transmittance actually programmed for normalised weights in [0, 1]."""
    return tt.realize(tt.t_min + np.asarray(w01, dtype=float) * tt.t_diff)


def mvm_optical(v01, W01, tt, cfg: EmulatorConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """One pass of the array: ``W01 @ v01`` for non-negative operands.

    ``v01`` has shape (..., cols) and ``W01`` (..., rows, cols); leading axes
    broadcast so a batch of passes runs at once.
    """
    _check_device(tt)
    v = np.asarray(v01, dtype=float)
    W = np.asarray(W01, dtype=float)
    if W.ndim < 2 or W.shape[-1] != v.shape[-1]:
        raise DomainError(f"vector length {v.shape[-1]} does not match weight shape {W.shape}")
    if W.shape[-2:] != (cfg.array_rows, cfg.array_cols):
        raise DomainError(f"weight block {W.shape[-2:]} does not match the "
                          f"{cfg.array_rows}x{cfg.array_cols} array")
    if np.any((v < 0) | (v > 1)) or np.any((W < 0) | (W > 1)):
        raise DomainError("optical operands must lie in [0, 1]")
    T = realized_transmittance(W, tt)
    p_ch = cfg.channel_power_w
    gain = cfg.responsivity_a_per_w * p_ch
    current = gain * np.einsum("...ij,...j->...i", T, v)
    if cfg.noise_enabled:
        if rng is None:
            rng = stream(cfg.rng_seed)
        sigma = np.sqrt(2.0 * cfg.electron_charge_c * current * cfg.bandwidth_hz)
        current = current + sigma * rng.standard_normal(current.shape)
    return (current / gain - tt.t_min * np.sum(v, axis=-1)[..., None]) / tt.t_diff


def readout_sigma(tt, cfg: EmulatorConfig, current) -> np.ndarray:
    """Standard deviation of a decoded output given its mean photocurrent."""
    gain = cfg.responsivity_a_per_w * cfg.channel_power_w
    return np.sqrt(2.0 * cfg.electron_charge_c * np.asarray(current) * cfg.bandwidth_hz) / (gain * tt.t_diff)


def gemm_optical_tiled(A, B, tt, cfg: EmulatorConfig, rng: np.random.Generator | None = None,
                       scale_a: str = "unit", scale_b: str = "unit") -> np.ndarray:
    """Reference GEMM: explicit array-sized tiles, four signed passes per tile.

    ``A`` is the operand programmed into the array; the columns of ``B`` are
    the input vectors. Slow but literal; :func:`gemm_optical` is the
    production path and must agree with this one.
    """
    _check_device(tt)
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DomainError(f"cannot multiply shapes {A.shape} and {B.shape}")
    if rng is None:
        rng = stream(cfg.rng_seed)
    m, k = A.shape
    n = B.shape[1]
    rows, cols = cfg.array_rows, cfg.array_cols
    sa, sb = operand_scale(A, scale_a).item(), operand_scale(B, scale_b).item()
    ap, am = split_signed(A, sa)
    bp, bm = split_signed(B, sb)
    mp, kp = -(-m // rows) * rows, -(-k // cols) * cols

    def pad(x, r, c):
        out = np.zeros((r, c))
        out[:x.shape[0], :x.shape[1]] = x
        return out

    ap, am = pad(ap, mp, kp), pad(am, mp, kp)
    bp, bm = pad(bp, kp, n), pad(bm, kp, n)
    out = np.zeros((mp, n))
    for i0, j0 in itertools.product(range(0, mp, rows), range(0, kp, cols)):
        wp, wm = ap[i0:i0 + rows, j0:j0 + cols], am[i0:i0 + rows, j0:j0 + cols]
        for col in range(n):
            vp, vm = bp[j0:j0 + cols, col], bm[j0:j0 + cols, col]
            o_pos = mvm_optical(vp, wp, tt, cfg, rng) + mvm_optical(vm, wm, tt, cfg, rng)
            o_neg = mvm_optical(vp, wm, tt, cfg, rng) + mvm_optical(vm, wp, tt, cfg, rng)
            out[i0:i0 + rows, col] += o_pos - o_neg
    return sa * sb * out[:m]


@dataclass(frozen=True)
class EncodedOperand:
    """An operand programmed into the array: decoded weights and pass loads."""

    w_hat: np.ndarray    # (T+ - T-) / t_diff, what the readout decodes to
    t_sum: np.ndarray    # T+ + T-, the transmittance every input sees over the passes
    scale: np.ndarray

    def transposed(self) -> EncodedOperand:
        return EncodedOperand(np.swapaxes(self.w_hat, -1, -2), np.swapaxes(self.t_sum, -1, -2),
                              np.swapaxes(self.scale, -1, -2))


def encode_operand(A, tt, scale_a: str = "unit") -> EncodedOperand:
    _check_device(tt)
    A = np.asarray(A, dtype=float)
    sa = operand_scale(A, scale_a)
    ap, am = split_signed(A, sa)
    tp, tm = realized_transmittance(ap, tt), realized_transmittance(am, tt)
    return EncodedOperand((tp - tm) / tt.t_diff, tp + tm, sa)


def apply_encoded(enc: EncodedOperand, B, tt, cfg: EmulatorConfig,
                  rng: np.random.Generator | None = None, scale_b: str = "unit") -> np.ndarray:
    B = np.asarray(B, dtype=float)
    if B.ndim < 2 or enc.w_hat.shape[-1] != B.shape[-2]:
        raise DomainError(f"cannot multiply shapes {enc.w_hat.shape} and {B.shape}")
    sb = operand_scale(B, scale_b)
    b = B / sb
    out = enc.w_hat @ b
    if cfg.noise_enabled:
        if rng is None:
            rng = stream(cfg.rng_seed)
        # both halves of b see both halves of A: sum over passes of T @ v.
        load = enc.t_sum @ np.abs(b)
        gain = cfg.responsivity_a_per_w * cfg.channel_power_w
        var = 2.0 * cfg.electron_charge_c * cfg.bandwidth_hz * load / (gain * tt.t_diff ** 2)
        out = out + np.sqrt(var) * rng.standard_normal(out.shape)
    return enc.scale * sb * out


def gemm_optical(A, B, tt, cfg: EmulatorConfig, rng: np.random.Generator | None = None,
                 scale_a: str = "unit", scale_b: str = "unit") -> np.ndarray:
    """Emulated GEMM ``A @ B``; leading batch axes broadcast.

    Decoding is linear in the photocurrent, so summing decoded tiles equals
    decoding the summed current, and independent Gaussian shot-noise terms
    whose variances are linear in the mean current add to one Gaussian whose
    variance follows the total current. The four signed passes and all tiles
    therefore collapse to two matrix products, with results distributed
    exactly as in :func:`gemm_optical_tiled`.
    """
    _check_device(tt)
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DomainError(f"cannot multiply shapes {A.shape} and {B.shape}")
    return apply_encoded(encode_operand(A, tt, scale_a), B, tt, cfg, rng, scale_b)


class ExactBackend:
    """Plain floating-point products (the "GPU" role)."""

    name = "exact"

    def matmul(self, A, B, scale_a: str = "unit", scale_b: str = "max", a_key=None,
               a_transposed: bool = False) -> np.ndarray:
        return exact_gemm(A, B)


class OpticalBackend:
    """Emulated products on a given device, with a fresh noise stream per call."""

    name = "optical"

    def __init__(self, tt, cfg: EmulatorConfig, stream_key: int = 0):
        _check_device(tt)
        self.tt = tt
        self.cfg = cfg
        self.stream_key = stream_key
        self.calls = 0
        self._encoded: dict = {}

    def matmul(self, A, B, scale_a: str = "unit", scale_b: str = "max", a_key=None,
               a_transposed: bool = False) -> np.ndarray:
        """``a_key = (owner, slot, version)`` marks a stored operand so it is
        programmed once per version and reused; with ``a_transposed`` the
        operand passed is the transpose of the one stored under that key."""
        rng = stream(self.cfg.rng_seed, self.stream_key, self.calls) if self.cfg.noise_enabled else None
        self.calls += 1
        if a_key is None:
            enc = encode_operand(A, self.tt, scale_a)
        else:
            owner, slot, version = a_key
            hit = self._encoded.get((owner, slot))
            if hit is None or hit[:2] != (version, scale_a):
                base = np.swapaxes(A, -1, -2) if a_transposed else A
                hit = (version, scale_a, encode_operand(base, self.tt, scale_a))
                self._encoded[(owner, slot)] = hit
            enc = hit[2].transposed() if a_transposed else hit[2]
        return apply_encoded(enc, B, self.tt, self.cfg, rng, scale_b)
