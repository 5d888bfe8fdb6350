"""Monocular-guided ConvGRU refinement of pairwise pointmaps.

Per view, a condition feature is encoded once from the aligned monocular
pointmap, the monocular and pairwise features, the confidence and the image.
A ConvGRU hidden state initialised from the monocular features is then
updated N times; after every update a small decoder emits a residual offset
that is added to the current pointmap.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .pointmap import ConfidenceMap, ImageGrid, Pointmap, norm_factor
from .tensor import Tensor

__all__ = [
    "RefineConfig",
    "EncoderWeights",
    "GruWeights",
    "DecoderWeights",
    "RefineWeights",
    "PARAM_GROUPS",
    "param_group",
    "init_weights",
    "encode_condition",
    "condition_input",
    "initial_state",
    "gru_step",
    "decode_offset",
    "feedback_channels",
    "feedback_reference",
    "refine_tensors",
    "refine",
]


FEEDBACK_CHANNELS = 3


@dataclass(frozen=True)
class RefineConfig:
    iters: int = 2
    hidden: int = 32
    cond: int = 32
    kernel: int = 3
    mono_channels: int = 64
    pair_channels: int = 128
    feedback: bool = True

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"RefineConfig: iters must be >= 1, got {self.iters}")
        if self.kernel % 2 == 0:
            raise ValueError(f"RefineConfig: kernel size must be odd, got {self.kernel}")
        if self.hidden < 2 or self.cond < 1:
            raise ValueError("RefineConfig: hidden must be >= 2 and cond >= 1")

    @property
    def input_channels(self) -> int:
        # pointmap + mono features + pair features + confidence + image
        return 3 + self.mono_channels + self.pair_channels + 1 + 3

    @property
    def gru_input_channels(self) -> int:
        # condition feature, plus the current estimate's offset from the prior
        return self.cond + (FEEDBACK_CHANNELS if self.feedback else 0)


class _Params:
    """Mixin: iterate dataclass fields as (name, Tensor) pairs."""

    def named(self, prefix: str = ""):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, _Params):
                yield from v.named(f"{prefix}{f.name}.")
            else:
                yield f"{prefix}{f.name}", v


@dataclass(frozen=True)
class EncoderWeights(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(frozen=True)
class GruWeights(_Params):
    """Gate kernels over ``[h, x]`` and per-channel context biases."""

    wz: Tensor
    wr: Tensor
    wh: Tensor
    cz: Tensor
    cr: Tensor
    ch: Tensor

    @property
    def hidden(self) -> int:
        return self.wz.shape[0]


@dataclass(frozen=True)
class DecoderWeights(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


PARAM_GROUPS = ("enc", "proj", "gru", "dec")


def param_group(name: str) -> str:
    """Group of a dotted parameter name: condition encoder, state projection, GRU or decoder."""
    return name.split(".")[0].split("_")[0]


@dataclass(frozen=True)
class RefineWeights(_Params):
    enc: EncoderWeights
    proj_w: Tensor
    proj_b: Tensor
    gru: GruWeights
    dec: DecoderWeights

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named()}

    @classmethod
    def from_dict(cls, arrays: dict, requires_grad=False) -> "RefineWeights":
        """Build weights from named arrays.

        ``requires_grad`` is a bool for every tensor, or a predicate on the
        record name.
        """
        wants = requires_grad if callable(requires_grad) else (lambda _name: bool(requires_grad))

        def get(name):
            try:
                return Tensor(arrays[name], requires_grad=wants(name))
            except KeyError:
                raise KeyError(f"weights: missing record {name!r}") from None

        return cls(
            enc=EncoderWeights(*(get(f"enc.{k}") for k in ("w1", "b1", "w2", "b2"))),
            proj_w=get("proj_w"),
            proj_b=get("proj_b"),
            gru=GruWeights(*(get(f"gru.{k}") for k in ("wz", "wr", "wh", "cz", "cr", "ch"))),
            dec=DecoderWeights(*(get(f"dec.{k}") for k in ("w1", "b1", "w2", "b2"))),
        )

    def trainable(self, groups=PARAM_GROUPS) -> "RefineWeights":
        """Copy whose tensors are fresh leaves; those in ``groups`` require gradients."""
        groups = tuple(groups)
        unknown = set(groups) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"weights: unknown parameter groups {sorted(unknown)}; expected a subset of {PARAM_GROUPS}")
        return RefineWeights.from_dict(self.as_dict(), requires_grad=lambda name: param_group(name) in groups)

    def frozen(self) -> "RefineWeights":
        return RefineWeights.from_dict(self.as_dict(), requires_grad=False)

    @property
    def feedback(self) -> bool:
        extra = self.gru.wz.shape[1] - self.gru.hidden - self.enc.w2.shape[0]
        if extra not in (0, FEEDBACK_CHANNELS):
            raise T.ShapeError(f"weights: GRU kernels take {extra} unexpected input channels")
        return extra == FEEDBACK_CHANNELS

    def infer_config(self, iters: int = 2) -> RefineConfig:
        c_h, _, k, _ = self.gru.wz.shape
        return RefineConfig(
            iters=iters,
            hidden=c_h,
            cond=self.enc.w2.shape[0],
            kernel=k,
            mono_channels=self.proj_w.shape[1],
            pair_channels=self.enc.w1.shape[1] - 7 - self.proj_w.shape[1],
            feedback=self.feedback,
        )


def init_weights(cfg: RefineConfig, seed: int = 0) -> RefineWeights:
    """Fan-in scaled normal initialisation; the last decoder layer starts at zero."""
    rng = np.random.default_rng(seed)
    k = cfg.kernel

    def conv(cout, cin, ksize):
        return rng.normal(0.0, 1.0 / np.sqrt(cin * ksize * ksize), size=(cout, cin, ksize, ksize))

    c_h, c_c = cfg.hidden, cfg.cond
    arrays = {
        "enc.w1": conv(c_c, cfg.input_channels, k),
        "enc.b1": np.zeros(c_c),
        "enc.w2": conv(c_c, c_c, k),
        "enc.b2": np.zeros(c_c),
        "proj_w": conv(c_h, cfg.mono_channels, 1),
        "proj_b": np.zeros(c_h),
        "gru.wz": conv(c_h, c_h + cfg.gru_input_channels, k),
        "gru.wr": conv(c_h, c_h + cfg.gru_input_channels, k),
        "gru.wh": conv(c_h, c_h + cfg.gru_input_channels, k),
        "gru.cz": np.zeros(c_h),
        "gru.cr": np.zeros(c_h),
        "gru.ch": np.zeros(c_h),
        "dec.w1": conv(c_h // 2, c_h, k),
        "dec.b1": np.zeros(c_h // 2),
        "dec.w2": np.zeros((3, c_h // 2, k, k)),
        "dec.b2": np.zeros(3),
    }
    return RefineWeights.from_dict(arrays)


def _grid_tensor(x, what: str) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    if t.data.ndim != 4:
        raise T.ShapeError(f"{what}: expected a 1×C×H×W grid, got shape {t.shape}")
    return t


def condition_input(M: Pointmap, F_mono, F_pair, w: ConfidenceMap, I: ImageGrid) -> Tensor:
    """Channel stack [M / z(M), F_mono, F_pair, w, I] fed to the condition encoder."""
    f_mono = _grid_tensor(F_mono, "condition_input: F_mono")
    f_pair = _grid_tensor(F_pair, "condition_input: F_pair")
    m = Tensor(M.points.transpose(2, 0, 1)[None] / norm_factor(M))
    parts = [m, f_mono, f_pair, w.to_tensor(), I.to_tensor()]
    h, wd = M.shape
    for name, p in zip(("F_mono", "F_pair", "w", "I"), parts[1:]):
        if p.shape[2:] != (h, wd):
            raise T.ShapeError(f"condition_input: {name} is {p.shape[2]}×{p.shape[3]}, pointmap is {h}×{wd}")
    return T.concat_channels(parts)


def encode_condition(M, F_mono, F_pair, w, I, enc: EncoderWeights) -> Tensor:
    """Two 'same' convolutions with a tanh between them.

    Either pass the pieces (``M`` a Pointmap) or a pre-built stacked input as
    ``M`` with the remaining arguments set to None.
    """
    x = M if isinstance(M, Tensor) and F_mono is None else condition_input(M, F_mono, F_pair, w, I)
    pad1 = enc.w1.shape[2] // 2
    pad2 = enc.w2.shape[2] // 2
    y = T.tanh(T.conv2d(x, enc.w1, enc.b1, pad=pad1))
    return T.conv2d(y, enc.w2, enc.b2, pad=pad2)


def initial_state(F_mono, proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """h0 = tanh(1×1 projection of the monocular features)."""
    return T.tanh(T.conv2d(_grid_tensor(F_mono, "initial_state"), proj_w, proj_b))


def _context(c: Tensor) -> Tensor:
    return T.reshape(c, (1, c.shape[0], 1, 1))


def gru_step(h: Tensor, x: Tensor, wts: GruWeights, return_gates: bool = False):
    """One ConvGRU update; returns the new state (and ``(z, r, h_tilde)`` on request)."""
    if h.data.ndim != 4 or x.data.ndim != 4:
        raise T.ShapeError("gru_step: state and input must be 1×C×H×W")
    if h.shape[2:] != x.shape[2:]:
        raise T.ShapeError(f"gru_step: state is {h.shape[2:]} but input is {x.shape[2:]} spatially")
    if h.shape[1] != wts.hidden:
        raise T.ShapeError(f"gru_step: state has C={h.shape[1]}, weights expect C_h={wts.hidden}")
    pad = wts.wz.shape[2] // 2
    hx = T.concat_channels([h, x])
    z = T.sigmoid(T.add(T.conv2d(hx, wts.wz, pad=pad), _context(wts.cz)))
    r = T.sigmoid(T.add(T.conv2d(hx, wts.wr, pad=pad), _context(wts.cr)))
    rhx = T.concat_channels([T.mul(r, h), x])
    h_tilde = T.tanh(T.add(T.conv2d(rhx, wts.wh, pad=pad), _context(wts.ch)))
    h_new = T.add(T.mul(T.sub(1.0, z), h), T.mul(z, h_tilde))
    if return_gates:
        return h_new, (z, r, h_tilde)
    return h_new


def decode_offset(h: Tensor, dec: DecoderWeights) -> Tensor:
    """Residual offset (1×3×H×W, scene units) from the hidden state."""
    y = T.tanh(T.conv2d(h, dec.w1, dec.b1, pad=dec.w1.shape[2] // 2))
    return T.conv2d(y, dec.w2, dec.b2, pad=dec.w2.shape[2] // 2)


def feedback_reference(P0: Tensor, prior: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    """Normalizer z0 of the initial estimate and the RMS of its offset from the prior.

    Both stay on the tape so gradients with respect to P0 are exact.
    """
    count = max(float(mask.data.sum()), 1.0)
    z0 = T.add(T.div(T.tsum(T.mul(T.channel_norm(P0), mask)), count), 1e-12)
    r0 = T.mul(T.sub(T.div(P0, z0), prior), mask)
    s0 = T.sqrt(T.add(T.div(T.tsum(T.mul(r0, r0)), 3.0 * count), 1e-12))
    return z0, s0


def feedback_channels(P: Tensor, prior: Tensor, mask: Tensor, ref: tuple[Tensor, Tensor]) -> Tensor:
    """Offset of the current estimate from the aligned prior, in units of the step-0 RMS.

    The raw offset is around 1e-2 against O(1) condition features; the scaling
    lets the GRU see how far each step has moved.
    """
    z0, s0 = ref
    return T.div(T.mul(T.sub(T.div(P, z0), prior), mask), s0)


def refine_tensors(P0, valid, cond_input: Tensor, F_mono, weights: RefineWeights, iters: int) -> list[Tensor]:
    """Differentiable refinement loop; returns [P^1, ..., P^N] as 1×3×H×W tensors.

    Offsets at invalid pixels are masked so invalid points stay zero.
    """
    P = P0 if isinstance(P0, Tensor) else Tensor(np.asarray(P0, dtype=np.float64))
    mask = Tensor(np.asarray(valid, dtype=np.float64)[None, None])
    x = encode_condition(cond_input, None, None, None, None, weights.enc)
    h = initial_state(F_mono, weights.proj_w, weights.proj_b)
    feedback = weights.feedback
    if feedback:
        prior = T.slice_channels(cond_input, 0, 3)
        ref = feedback_reference(P, prior, mask)
    out = []
    for _ in range(iters):
        xs = x
        if feedback:
            xs = T.concat_channels([x, feedback_channels(P, prior, mask, ref)])
        h = gru_step(h, xs, weights.gru)
        P = T.add(P, T.mul(decode_offset(h, weights.dec), mask))
        out.append(P)
    return out


def refine(
    P0: Pointmap,
    w0: ConfidenceMap,
    M: Pointmap,
    F_mono,
    F_pair,
    I: ImageGrid,
    weights: RefineWeights,
    cfg: RefineConfig | None = None,
) -> list[Pointmap]:
    """Run N refinement steps on one view and return every intermediate pointmap."""
    cfg = cfg or RefineConfig()
    if P0.shape != M.shape:
        raise T.ShapeError(f"refine: P0 is {P0.shape} but M is {M.shape}")
    weights = weights.frozen()
    x_in = condition_input(M, F_mono, F_pair, w0, I)
    outs = refine_tensors(P0.to_tensor(), P0.valid, x_in, F_mono, weights, cfg.iters)
    return [Pointmap.from_tensor(p, P0.valid) for p in outs]


def with_param(weights: RefineWeights, name: str, value: Tensor) -> RefineWeights:
    """Copy of ``weights`` with the dotted parameter ``name`` replaced."""
    head, _, rest = name.partition(".")
    if rest:
        return replace(weights, **{head: replace(getattr(weights, head), **{rest: value})})
    return replace(weights, **{head: value})
