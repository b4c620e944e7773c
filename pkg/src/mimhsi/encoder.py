"""Bidirectional tokenizing encoder over one scan type.

Pipeline per encoder: layer norm -> twin linear projections (s, z) -> split s
into the two center-terminated half-sequences -> per branch a stack of
(causal depthwise conv -> SiLU -> selective scan) units -> Gaussian decay
mask -> cross-scan merge back to full length -> token learner (downsample
p*p -> (p-2)*(p-2)) -> token fuser against pooled z -> output and residual
projections. The caller applies Tanh.

All sequence tensors are batched [B, L, C].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scan import ScanMap, SplitMaps, gather_by_map, scan_map, scatter_by_map, split_center
from .ssm import SsmParams, init_ssm_params, selective_scan_sequential

ATTN_WIDTH = 7  # sequence-attention conv width, symmetric zero padding
TOKEN_INIT_STD = 0.02


@dataclass(frozen=True)
class ScanContext:
    """Scan geometry one encoder works in: the full map at size p, the same
    design/type at the reduced size p-2, and the center split."""

    scan: ScanMap
    scan_small: ScanMap
    splits: SplitMaps

    @property
    def p(self):
        return self.scan.p

    @property
    def p_small(self):
        return self.scan_small.p


def make_context(p, design, type_id):
    if p < 3:
        raise ValueError("encoder needs p >= 3 so the output keeps a center")
    full = scan_map(p, design, type_id)
    return ScanContext(scan=full, scan_small=scan_map(p - 2, design, type_id), splits=split_center(full))


@dataclass
class TMambaParams:
    norm_scale: Tensor   # [C2]
    norm_shift: Tensor   # [C2]
    w_s: Tensor          # [C2, C3]
    b_s: Tensor
    w_z: Tensor          # [C2, C3]
    b_z: Tensor
    fwd_stack: list      # [SsmParams] * depth
    bwd_stack: list
    token_attn: Tensor   # [C3, p2^2]  (maps features to token attention logits)
    token_value: Tensor  # [C3, C3]
    fuse_gate: Tensor    # [C3, p2^2]  (token influence scores from pooled z)
    attn_taps: Tensor    # [ATTN_WIDTH, 2] shared sequence-attention conv
    merge_w: Tensor      # [C3, C3]
    merge_b: Tensor
    out_w: Tensor        # [C3, C2]
    out_b: Tensor
    res_w: Tensor        # [C2, C2]
    res_b: Tensor

    def named(self, prefix):
        for field in ("norm_scale", "norm_shift", "w_s", "b_s", "w_z", "b_z"):
            yield f"{prefix}.{field}", getattr(self, field)
        for i, unit in enumerate(self.fwd_stack):
            yield from unit.named(f"{prefix}.fwd{i}")
        for i, unit in enumerate(self.bwd_stack):
            yield from unit.named(f"{prefix}.bwd{i}")
        for field in (
            "token_attn", "token_value", "fuse_gate", "attn_taps",
            "merge_w", "merge_b", "out_w", "out_b", "res_w", "res_b",
        ):
            yield f"{prefix}.{field}", getattr(self, field)


def init_tmamba_params(rng, p, c2, c3, depth=2, state_dim=16, conv_width=4):
    p2sq = (p - 2) * (p - 2)

    def linear(nin, nout):
        return Tensor(rng.normal(0.0, nin ** -0.5, size=(nin, nout)), requires_grad=True)

    def bias(nout):
        return Tensor(np.zeros(nout), requires_grad=True)

    return TMambaParams(
        norm_scale=Tensor(np.ones(c2), requires_grad=True),
        norm_shift=Tensor(np.zeros(c2), requires_grad=True),
        w_s=linear(c2, c3),
        b_s=bias(c3),
        w_z=linear(c2, c3),
        b_z=bias(c3),
        fwd_stack=[init_ssm_params(rng, c3, state_dim, conv_width) for _ in range(depth)],
        bwd_stack=[init_ssm_params(rng, c3, state_dim, conv_width) for _ in range(depth)],
        token_attn=Tensor(rng.normal(0.0, TOKEN_INIT_STD, size=(c3, p2sq)), requires_grad=True),
        token_value=Tensor(rng.normal(0.0, TOKEN_INIT_STD, size=(c3, c3)), requires_grad=True),
        fuse_gate=Tensor(rng.normal(0.0, TOKEN_INIT_STD, size=(c3, p2sq)), requires_grad=True),
        attn_taps=Tensor(rng.normal(0.0, (2 * ATTN_WIDTH) ** -0.5, size=(ATTN_WIDTH, 2)), requires_grad=True),
        merge_w=linear(c3, c3),
        merge_b=bias(c3),
        out_w=linear(c3, c2),
        out_b=bias(c2),
        res_w=linear(c2, c2),
        res_b=bias(c2),
    )


def layer_norm(x, scale, shift, eps=1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.power(ad.add(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(xc, inv), scale), shift)


# -- Gaussian decay mask -------------------------------------------------------


@dataclass
class GdmWeights:
    w_idx: Tensor    # [L], constant in the inputs
    w_fea: Tensor    # [B, L]
    combined: Tensor # [B, L], rescaled to mean one


def gdm(seq):
    """Soft step weights decaying with index and feature distance from the
    final (center) step; returns the weights and the masked sequence.

    Both index and feature masks are normalized to sum to one; their product
    is renormalized to mean one before multiplying the sequence. A constant
    sub-sequence (zero feature spread) falls back to a uniform feature mask.
    """
    length = seq.shape[-2]
    t_last = length - 1
    if t_last == 0:
        one = Tensor(np.ones((seq.shape[0], 1)))
        return GdmWeights(w_idx=Tensor(np.ones(1)), w_fea=one, combined=one), seq

    steps = np.arange(length, dtype=np.float64)
    sigma_idx = np.abs(steps - t_last).sum() / t_last
    w = np.exp(-0.5 * ((steps - t_last) / sigma_idx) ** 2)
    w_idx = Tensor(w / w.sum())  # [L]

    last = seq[:, t_last : t_last + 1, :]
    diff = ad.sub(seq, last)
    dist2 = ad.sum_(ad.mul(diff, diff), axis=-1)            # [B, L]
    sigma_fea = ad.div(ad.sum_(dist2, axis=-1, keepdims=True), float(t_last))
    degenerate = (sigma_fea.data == 0.0).astype(np.float64)  # structural constant
    if degenerate.any():
        # with the zero spread replaced by 1, dist2 == 0 rows come out uniform
        sigma_fea = ad.add(sigma_fea, Tensor(degenerate))
    ratio = ad.div(dist2, sigma_fea)
    v = ad.exp(ad.mul(ad.mul(ratio, ratio), -0.5))
    w_fea = ad.div(v, ad.sum_(v, axis=-1, keepdims=True))    # [B, L]

    combined = ad.mul(w_idx, w_fea)
    combined = ad.mul(ad.div(combined, ad.sum_(combined, axis=-1, keepdims=True)), float(length))
    masked = ad.mul(seq, ad.reshape(combined, combined.shape + (1,)))
    return GdmWeights(w_idx=w_idx, w_fea=w_fea, combined=combined), masked


# -- cross-scan merge ----------------------------------------------------------


def merge_cross(fwd, bwd, w, b):
    """Interleave the two masked half-sequences back into complete-scan order:
    forward body, averaged center, backward body read end-first."""
    if fwd.shape != bwd.shape:
        raise ValueError("half-sequences must have equal shape")
    t_last = fwd.shape[-2] - 1
    center = ad.mul(ad.add(fwd[:, t_last : t_last + 1, :], bwd[:, t_last : t_last + 1, :]), 0.5)
    if t_last == 0:
        merged = center
    else:
        q_f = fwd[:, :t_last, :]
        q_b = ad.reverse(bwd[:, :t_last, :], axis=-2)
        merged = ad.concatenate([q_f, center, q_b], axis=-2)
    return ad.add(ad.matmul(merged, w), b)


# -- sequence attention ----------------------------------------------------------


def seq_attn(seq, taps):
    """Per-step gate from channel max/mean pooled features: a width-7 conv
    over the two pooled tracks, squashed by a sigmoid, scales the sequence."""
    length = seq.shape[-2]
    smax = ad.max_(seq, axis=-1, keepdims=True)
    smean = ad.mean(seq, axis=-1, keepdims=True)
    feats = ad.concatenate([smax, smean], axis=-1)          # [B, L, 2]
    half = ATTN_WIDTH // 2
    zeros = Tensor(np.zeros(feats.shape[:-2] + (half, 2)))
    padded = ad.concatenate([zeros, feats, zeros], axis=-2)
    acc = None
    for k in range(ATTN_WIDTH):
        window = padded[:, k : k + length, :]
        term = ad.sum_(ad.mul(window, taps[k]), axis=-1, keepdims=True)
        acc = term if acc is None else ad.add(acc, term)
    gate = ad.sigmoid(acc)                                  # [B, L, 1]
    return ad.mul(gate, seq)


# -- token learner / fuser -------------------------------------------------------


def stl(seq, params):
    """Condense a length-L sequence into p2^2 tokens: attention rows over the
    sequence positions (softmax along L) mix value-projected features."""
    m_hat = seq_attn(seq, params.attn_taps)
    logits = ad.swapaxes(ad.matmul(m_hat, params.token_attn), -1, -2)  # [B, p2^2, L]
    attn = ad.softmax(logits, axis=-1)
    values = ad.matmul(m_hat, params.token_value)                      # [B, L, C3]
    return ad.matmul(attn, values)


def pool_seq_grid(seq, ctx: ScanContext):
    """Spatial average pooling of a scan-ordered sequence: place it on the
    p-by-p grid, pool to p-2, and read it back out in the same scan type."""
    grid = scatter_by_map(seq, ctx.scan)
    pooled = ad.adaptive_avg_pool2d(grid, ctx.p_small)
    return gather_by_map(pooled, ctx.scan_small)


def pool_seq_1d(seq, out_len):
    """Adaptive mean pooling along the step axis (post-merge branches only,
    where a half-sequence is not grid-shaped)."""
    length = seq.shape[-2]
    parts = []
    for i in range(out_len):
        lo = (i * length) // out_len
        hi = -((-(i + 1) * length) // out_len)
        parts.append(ad.mean(seq[:, lo:hi, :], axis=-2, keepdims=True))
    return parts[0] if out_len == 1 else ad.concatenate(parts, axis=-2)


def stf(tokens, z, ctx, params):
    """Blend learned tokens back against the gating path: influence scores
    from pooled SiLU(z) weight the tokens, plus an attention term on the pool."""
    z_bar = pool_seq_grid(ad.silu(z), ctx)                   # [B, p2^2, C3]
    gate = ad.sigmoid(ad.matmul(z_bar, params.fuse_gate))    # [B, p2^2, p2^2]
    mixed = ad.matmul(gate, tokens)
    attended = seq_attn(z_bar, params.attn_taps)
    return ad.add(mixed, attended)


# -- full encoder -----------------------------------------------------------------


def _branch(seq, stack):
    h = seq
    for unit in stack:
        h = ad.silu(ad.conv1d_depthwise_causal(h, unit.conv_taps))
        h = selective_scan_sequential(h, unit)
    return h


def tmamba_forward(seq, ctx, params, use_stl=True, use_gdm=True, use_stf=True, pre_merge=True):
    """Encode one scan-ordered patch sequence [B, p^2, C2] -> [B, (p-2)^2, C2].

    Component toggles follow the ablation grid: the token learner falls back
    to average pooling, the fuser to a plain sum with the pooled gate path,
    and the decay mask to identity. pre_merge=False runs the token stage per
    branch before merging (post-merge fusion).
    """
    p2sq = ctx.p_small * ctx.p_small
    x = layer_norm(seq, params.norm_scale, params.norm_shift)
    s = ad.add(ad.matmul(x, params.w_s), params.b_s)
    z = ad.add(ad.matmul(x, params.w_z), params.b_z)

    t_mid = (seq.shape[-2] - 1) // 2
    s_f = s[:, : t_mid + 1, :]
    s_b = ad.reverse(s[:, t_mid:, :], axis=-2)

    h_f = _branch(s_f, params.fwd_stack)
    h_b = _branch(s_b, params.bwd_stack)
    if use_gdm:
        _, h_f = gdm(h_f)
        _, h_b = gdm(h_b)

    if pre_merge:
        merged = merge_cross(h_f, h_b, params.merge_w, params.merge_b)
        tokens = stl(merged, params) if use_stl else pool_seq_grid(merged, ctx)
        fused = stf(tokens, z, ctx, params) if use_stf else ad.add(tokens, pool_seq_grid(ad.silu(z), ctx))
    else:
        halves = []
        for h in (h_f, h_b):
            tok = stl(h, params) if use_stl else pool_seq_1d(h, p2sq)
            halves.append(stf(tok, z, ctx, params) if use_stf else ad.add(tok, pool_seq_grid(ad.silu(z), ctx)))
        mean_tokens = ad.mul(ad.add(halves[0], halves[1]), 0.5)
        fused = ad.add(ad.matmul(mean_tokens, params.merge_w), params.merge_b)

    out = ad.add(ad.matmul(fused, params.out_w), params.out_b)
    residual = ad.add(ad.matmul(pool_seq_grid(seq, ctx), params.res_w), params.res_b)
    return ad.add(out, residual)
