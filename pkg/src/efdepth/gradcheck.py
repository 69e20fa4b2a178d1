"""Central finite-difference verification of every trainable stage.

Each registered check builds a small double-precision instance of a layer or
module on randomized weights and inputs, reduces its outputs to a scalar via
a fixed random projection, and compares autograd gradients against central
differences at a deterministic subsample of coordinates.

Per-coordinate pass rule: |analytic - numeric| <= 1e-7 + 1e-4 * max(|a|, |n|).
The suite also verifies the affinity-normalization bound (per-pixel absolute
weight sum never exceeds the confidence, which never exceeds 1) on random
draws plus the saturation limit.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from .encoders import PyramidEncoder
from .fusion import AttentionFuse, ConsensusFusion
from .layers import ChannelAttention
from .masks import EventMaskHead, FrameMaskHead, MaskDownsampler
from .objectives import total_loss
from .refine import (
    AffinityHead,
    CoarseDepthHead,
    ConfidenceHead,
    ConvGRU,
    RecurrentRefiner,
    normalize_affinity,
    propagate,
)

ATOL = 1e-7
RTOL = 1e-4
STEP = 1e-6
MAX_COORDS = 4


class CheckResult(NamedTuple):
    name: str
    passed: bool
    worst: float  # worst |a-n| / tolerance ratio; <= 1 passes
    coords: int
    detail: str = ""


def _tensor(rng: np.random.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.normal(0.0, scale, size=shape)).double()


def _projector(rng: np.random.Generator, shape) -> torch.Tensor:
    v = torch.from_numpy(rng.normal(size=tuple(shape))).double()
    return v / math.sqrt(v.numel())


def _randomize(module: nn.Module, rng: np.random.Generator) -> None:
    """Move weights off their (sometimes degenerate) init points."""
    for p in module.parameters():
        if p.ndim >= 2:
            std = 0.5 / math.sqrt(p[0].numel())
        else:
            std = 0.1
        with torch.no_grad():
            p.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(p.shape))))


def _named_params(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(name, p) for name, p in module.named_parameters()]


def _fd_compare(loss_fn, wrt, rng: np.random.Generator) -> tuple[bool, float, int, str]:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [t for _, t in wrt], allow_unused=True)
    worst = 0.0
    count = 0
    passed = True
    worst_label = ""
    for (label, tensor), grad in zip(wrt, grads):
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        idxs = rng.choice(n, size=min(MAX_COORDS, n), replace=False)
        for i in idxs:
            i = int(i)
            orig = float(flat[i])
            h = STEP * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = 0.0 if grad is None else float(grad.reshape(-1)[i])
            err = abs(analytic - numeric)
            tol = ATOL + RTOL * max(abs(analytic), abs(numeric))
            ratio = err / tol
            if ratio > worst:
                worst = ratio
                worst_label = label
            count += 1
            if err > tol:
                passed = False
    detail = "" if passed else f"worst at {worst_label}"
    return passed, worst, count, detail


# ---------------------------------------------------------------------------
# check builders: each returns (loss_fn, wrt)


def _check_conv3x3(rng):
    conv = nn.Conv2d(3, 5, 3, padding=1).double()
    _randomize(conv, rng)
    x = _tensor(rng, 2, 3, 7, 7).requires_grad_(True)
    proj = _projector(rng, (2, 5, 7, 7))
    return lambda: (conv(x) * proj).sum(), _named_params(conv) + [("input", x)]


def _check_channel_attention(rng):
    att = ChannelAttention(8).double()
    _randomize(att, rng)
    x = _tensor(rng, 2, 8, 6, 6).requires_grad_(True)
    proj = _projector(rng, (2, 8, 6, 6))
    return lambda: (att(x) * proj).sum(), _named_params(att) + [("input", x)]


def _check_event_mask_head(rng):
    head = EventMaskHead(patches=(2, 4)).double()
    _randomize(head, rng)
    voxel = _tensor(rng, 2, 3, 8, 8)
    voxel = voxel * (torch.from_numpy(rng.random((2, 3, 8, 8))) < 0.5)  # sparse deposits
    proj = _projector(rng, (2, 1, 8, 8))
    # densities are counts of populated cells — piecewise constant in the
    # deposits — so only the head parameters carry gradients
    return lambda: (head(voxel) * proj).sum(), _named_params(head)


def _check_frame_mask_head(rng):
    head = FrameMaskHead().double()
    _randomize(head, rng)
    frame = _tensor(rng, 2, 1, 8, 8).requires_grad_(True)
    proj = _projector(rng, (2, 1, 8, 8))
    return lambda: (head(frame) * proj).sum(), _named_params(head) + [("frame", frame)]


def _check_mask_downsampler(rng):
    down = MaskDownsampler(levels=2).double()
    _randomize(down, rng)
    mask = _tensor(rng, 2, 1, 8, 8).requires_grad_(True)
    proj = _projector(rng, (2, 1, 2, 2))
    return lambda: (down(mask) * proj).sum(), _named_params(down) + [("mask", mask)]


def _check_pyramid_encoder(rng):
    enc = PyramidEncoder(4, channels=(4, 6, 8)).double()
    _randomize(enc, rng)
    x = _tensor(rng, 1, 4, 16, 16).requires_grad_(True)
    projs = [
        _projector(rng, (1, 4, 8, 8)),
        _projector(rng, (1, 6, 4, 4)),
        _projector(rng, (1, 8, 2, 2)),
    ]

    def loss_fn():
        return sum((f * p).sum() for f, p in zip(enc(x), projs))

    return loss_fn, _named_params(enc) + [("input", x)]


def _check_attention_fuse(rng):
    fuse = AttentionFuse(8, 6).double()
    _randomize(fuse, rng)
    x = _tensor(rng, 2, 8, 5, 5).requires_grad_(True)
    proj = _projector(rng, (2, 6, 5, 5))
    return lambda: (fuse(x) * proj).sum(), _named_params(fuse) + [("input", x)]


def _check_fusion_chain(rng):
    fusion = ConsensusFusion(4, n_blocks=3).double()
    _randomize(fusion, rng)
    f_e = _tensor(rng, 2, 4, 8, 8).requires_grad_(True)
    f_i = _tensor(rng, 2, 4, 8, 8).requires_grad_(True)
    m_e = _tensor(rng, 2, 1, 8, 8, scale=0.5).requires_grad_(True)
    m_i = _tensor(rng, 2, 1, 8, 8, scale=0.5).requires_grad_(True)
    proj_f = _projector(rng, (2, 8, 8, 8))
    proj_m = _projector(rng, (2, 3, 8, 8))

    def loss_fn():
        fused, m_stack = fusion(f_e, f_i, m_e, m_i)
        return (fused * proj_f).sum() + (m_stack * proj_m).sum()

    wrt = _named_params(fusion) + [
        ("f_e", f_e),
        ("f_i", f_i),
        ("m_e", m_e),
        ("m_i", m_i),
    ]
    return loss_fn, wrt


def _check_conv_gru(rng):
    gru = ConvGRU(5, 4).double()
    _randomize(gru, rng)
    x = _tensor(rng, 2, 5, 6, 6).requires_grad_(True)
    state = _tensor(rng, 2, 4, 6, 6, scale=0.5).requires_grad_(True)
    proj = _projector(rng, (2, 4, 6, 6))
    return (
        lambda: (gru(x, state) * proj).sum(),
        _named_params(gru) + [("x", x), ("state", state)],
    )


def _check_coarse_head(rng):
    head = CoarseDepthHead(5).double()
    _randomize(head, rng)
    feats = _tensor(rng, 1, 5, 4, 4).requires_grad_(True)
    proj = _projector(rng, (1, 1, 8, 8))
    return (
        lambda: (head(feats, (8, 8)) * proj).sum(),
        _named_params(head) + [("features", feats)],
    )


def _check_affinity_head(rng):
    head = AffinityHead(5, neighbors=3, radius=2.0).double()
    _randomize(head, rng)  # lifts the zero init so gradients are nontrivial
    feats = _tensor(rng, 1, 5, 4, 4).requires_grad_(True)
    proj_a = _projector(rng, (1, 3, 8, 8))
    proj_o = _projector(rng, (1, 3, 2, 8, 8))

    def loss_fn():
        affinity, offsets = head(feats, (8, 8))
        return (affinity * proj_a).sum() + (offsets * proj_o).sum()

    return loss_fn, _named_params(head) + [("features", feats)]


def _check_confidence_head(rng):
    head = ConfidenceHead(5, 3).double()
    _randomize(head, rng)
    feats = _tensor(rng, 1, 5, 4, 4).requires_grad_(True)
    m_stack = _tensor(rng, 1, 3, 2, 2).requires_grad_(True)
    proj = _projector(rng, (1, 1, 8, 8))
    return (
        lambda: (head(feats, m_stack, (8, 8)) * proj).sum(),
        _named_params(head) + [("features", feats), ("m_stack", m_stack)],
    )


def _check_propagation(rng):
    k = 4
    depth = _tensor(rng, 1, 1, 10, 10).requires_grad_(True)
    raw_aff = _tensor(rng, 1, k, 10, 10).requires_grad_(True)
    conf_pre = _tensor(rng, 1, 1, 10, 10).requires_grad_(True)
    off_pre = _tensor(rng, 1, k, 2, 10, 10).requires_grad_(True)
    rho = torch.tensor(math.log(float(k)), dtype=torch.float64, requires_grad=True)
    proj = _projector(rng, (1, 1, 10, 10))

    def loss_fn():
        weights = normalize_affinity(raw_aff, torch.sigmoid(conf_pre), rho.exp())
        offsets = 2.0 * torch.tanh(off_pre)
        return (propagate(depth, weights, offsets, iterations=3) * proj).sum()

    wrt = [
        ("depth", depth),
        ("raw_affinity", raw_aff),
        ("confidence_pre", conf_pre),
        ("offsets_pre", off_pre),
        ("rho", rho),
    ]
    return loss_fn, wrt


def _check_full_refiner(rng):
    refiner = RecurrentRefiner(
        fused_channels=12,
        skip_channels=(6, 4),
        decoder_channels=(8, 6, 5),
        state_channels=4,
        mask_channels=3,
        neighbors=4,
        offset_radius=2.0,
        iterations=3,
    ).double()
    _randomize(refiner, rng)
    f_fused = _tensor(rng, 1, 12, 2, 2).requires_grad_(True)
    m_stack = _tensor(rng, 1, 3, 2, 2).requires_grad_(True)
    state = _tensor(rng, 1, 4, 8, 8, scale=0.5).requires_grad_(True)
    skip0 = _tensor(rng, 1, 6, 4, 4).requires_grad_(True)
    skip1 = _tensor(rng, 1, 4, 8, 8).requires_grad_(True)
    proj_r = _projector(rng, (1, 1, 16, 16))
    proj_c = _projector(rng, (1, 1, 16, 16))
    proj_s = _projector(rng, (1, 4, 8, 8))

    def loss_fn():
        res = refiner(f_fused, m_stack, state, (skip0, skip1), out_size=(16, 16))
        return (res.refined * proj_r).sum() + (res.coarse * proj_c).sum() + (
            res.state * proj_s
        ).sum()

    wrt = _named_params(refiner) + [
        ("f_fused", f_fused),
        ("m_stack", m_stack),
        ("state", state),
        ("skip0", skip0),
        ("skip1", skip1),
    ]
    return loss_fn, wrt


def _check_total_loss(rng):
    preds = [_tensor(rng, 1, 1, 12, 12).requires_grad_(True) for _ in range(2)]
    gts = [torch.from_numpy(rng.uniform(0, 1, (1, 1, 12, 12))).double() for _ in range(2)]
    valid = torch.ones(1, 1, 12, 12, dtype=torch.bool)
    valid[..., :2, :2] = False  # a hole, so masking participates
    valids = [valid, valid.clone()]

    def loss_fn():
        return total_loss(preds, gts, valids, lam=0.25, num_scales=3)

    return loss_fn, [("pred0", preds[0]), ("pred1", preds[1])]


class _ScaledGrad(torch.autograd.Function):
    """Test fixture: forward is the identity, backward is deliberately wrong."""

    @staticmethod
    def forward(ctx, x):
        return x * 1.0

    @staticmethod
    def backward(ctx, g):
        return g * 1.05


def _check_corrupted_fixture(rng):
    x = _tensor(rng, 3, 3).requires_grad_(True)
    proj = _projector(rng, (3, 3))
    return lambda: (_ScaledGrad.apply(x) * proj).sum(), [("input", x)]


FD_CHECKS: list[tuple[str, Callable]] = [
    ("conv3x3", _check_conv3x3),
    ("channel_attention", _check_channel_attention),
    ("event_mask_head", _check_event_mask_head),
    ("frame_mask_head", _check_frame_mask_head),
    ("mask_downsampler", _check_mask_downsampler),
    ("pyramid_encoder", _check_pyramid_encoder),
    ("attention_fuse", _check_attention_fuse),
    ("fusion_chain", _check_fusion_chain),
    ("conv_gru", _check_conv_gru),
    ("coarse_head", _check_coarse_head),
    ("affinity_head", _check_affinity_head),
    ("confidence_head", _check_confidence_head),
    ("propagation", _check_propagation),
    ("full_refiner", _check_full_refiner),
    ("total_loss", _check_total_loss),
]


def run_fd_check(name: str, builder: Callable, seed_index: int) -> CheckResult:
    rng = np.random.default_rng([0xFD, seed_index])
    try:
        loss_fn, wrt = builder(rng)
        passed, worst, count, detail = _fd_compare(loss_fn, wrt, rng)
        return CheckResult(name, passed, worst, count, detail)
    except Exception as exc:  # a crash is a failure, not an abort
        return CheckResult(name, False, float("inf"), 0, f"{type(exc).__name__}: {exc}")


def affinity_bound_checks() -> list[CheckResult]:
    rng = np.random.default_rng([0xFD, 999])
    k = 8
    gamma = float(k)
    worst = 0.0
    ok = True
    for _ in range(100):
        raw = _tensor(rng, 2, k, 6, 6, scale=3.0)
        conf = torch.from_numpy(rng.uniform(0.0, 1.0, (2, 1, 6, 6))).double()
        w = normalize_affinity(raw, conf, gamma)
        margin = float((w.abs().sum(dim=1, keepdim=True) - conf).max())
        worst = max(worst, margin)
        if margin > 1e-12 or float(conf.max()) > 1.0:
            ok = False
    bound = CheckResult(
        "affinity_weight_bound", ok, worst, 100, "max(sum|w| - confidence) over draws"
    )
    raw = torch.full((1, k, 4, 4), 1e6, dtype=torch.float64)
    conf = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    s = normalize_affinity(raw, conf, gamma).sum(dim=1)
    sat_err = float((s - 1.0).abs().max())
    saturation = CheckResult(
        "affinity_weight_saturation", sat_err <= 1e-6, sat_err, 16, "|sum w - 1| at saturation"
    )
    return [bound, saturation]


def run_all(include_corrupt_fixture: bool = False) -> list[CheckResult]:
    checks = list(FD_CHECKS)
    if include_corrupt_fixture:
        checks.append(("corrupted_fixture", _check_corrupted_fixture))
    results = [run_fd_check(name, builder, i) for i, (name, builder) in enumerate(checks)]
    results.extend(affinity_bound_checks())
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.detail}" if r.detail else ""
        lines.append(f"{status}  {r.name:<26} worst={r.worst:.3e}  coords={r.coords}{extra}")
    return "\n".join(lines)
