"""Three-phase staged EEG encoder.

The encoder maps a batch of multichannel EEG trials (B, C, T) to four
embeddings:

  * ``e1``       low-level visual embedding (B, d_low), phase 1
  * ``e_coarse`` label-level semantic embedding (B, d_sem), phase 2
  * ``e_fine``   image-level semantic embedding (B, d_sem), phase 2
  * ``e_eeg``    fused embedding (B, d_sem), phase 3

Phase 1 reweights the visual channels with a learned temporal weight vector,
encodes them with residual channel-graph and temporal-graph attention, and
flattens into ``e1``. Phase 2 expands the channel space with latent channels
generated by a per-timestep linear projection of the visual channels, encodes
the joint representation the same way, and feeds a coarse head (latent slice,
temporally reweighted) and a fine head (full joint slice). Phase 3 maps
``[e1 | e_fine]`` through one affine layer and adds ``e_coarse``.

The model also owns the trainable image-feature projectors and the learnable
logit scales of the contrastive objective, so that ``named_parameters()``
covers the entire trainable surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import FULL_VARIANT, LOGIT_SCALE_INIT, ModelConfig, VariantSpec
from .errors import ConfigurationError, NumericError, ShapeError


def require_finite(tag: str, x: torch.Tensor) -> None:
    """Raise NumericError naming the first offending index if x has NaN/inf."""
    finite = torch.isfinite(x)
    if bool(finite.all()):
        return
    idx = (~finite).nonzero()[0].tolist()
    raise NumericError(f"non-finite value in {tag} at index {tuple(idx)}")


def init_affine(layer: nn.Linear, generator: torch.Generator) -> None:
    """Uniform fan-in initialization for weight and bias."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


class TemporalWeighter(nn.Module):
    """Learnable weight vector over the T time steps.

    Two affine maps (T -> hidden -> T) are evaluated on a fixed all-ones probe,
    so the output depends only on the parameters; softmax makes it a strictly
    positive probability vector of shape (1, T).
    """

    def __init__(self, n_timesteps: int, hidden: int):
        super().__init__()
        self.n_timesteps = n_timesteps
        self.fc1 = nn.Linear(n_timesteps, hidden)
        self.fc2 = nn.Linear(hidden, n_timesteps)

    def forward(self) -> torch.Tensor:
        probe = torch.ones(1, self.n_timesteps, dtype=self.fc1.weight.dtype,
                           device=self.fc1.weight.device)
        z = self.fc2(F.relu(self.fc1(probe)))
        return torch.softmax(z, dim=-1)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_affine(self.fc1, generator)
        init_affine(self.fc2, generator)


class GraphAttention(nn.Module):
    """Single-head additive graph attention over a fully connected directed
    graph without self-loops, computed densely.

    Node features x: (B, N, F) with F == dim. For target node i the
    neighborhood is every j != i; coefficients are the softmax of
    leaky_relu(a_dst . Wh_i + a_src . Wh_j) over that neighborhood, and the
    output is sum_j alpha_ij Wh_j + bias.
    """

    NEGATIVE_SLOPE = 0.2

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.empty(dim, dim))
        self.att_src = nn.Parameter(torch.empty(dim))
        self.att_dst = nn.Parameter(torch.empty(dim))
        self.bias = nn.Parameter(torch.empty(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"graph attention expects (B, N, {self.dim}), got {tuple(x.shape)}")
        n = x.shape[1]
        if n < 2:
            raise ShapeError("graph attention needs at least 2 nodes (self-loops are excluded)")
        h = x @ self.weight.T                                   # (B, N, F)
        s_src = h @ self.att_src                                # (B, N)
        s_dst = h @ self.att_dst
        scores = s_dst.unsqueeze(2) + s_src.unsqueeze(1)        # (B, target, source)
        scores = F.leaky_relu(scores, self.NEGATIVE_SLOPE)
        diag = torch.eye(n, dtype=torch.bool, device=x.device)
        scores = scores.masked_fill(diag, float("-inf"))
        alpha = torch.softmax(scores, dim=2)
        return alpha @ h + self.bias

    def attention_coefficients(self, x: torch.Tensor) -> torch.Tensor:
        """Expose the (B, N, N) attention matrix (diagonal is zero)."""
        h = x @ self.weight.T
        scores = (h @ self.att_dst).unsqueeze(2) + (h @ self.att_src).unsqueeze(1)
        scores = F.leaky_relu(scores, self.NEGATIVE_SLOPE)
        diag = torch.eye(x.shape[1], dtype=torch.bool, device=x.device)
        return torch.softmax(scores.masked_fill(diag, float("-inf")), dim=2)

    def reset_parameters(self, generator: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.dim)
        with torch.no_grad():
            for p in (self.weight, self.att_src, self.att_dst, self.bias):
                p.uniform_(-bound, bound, generator=generator)


class RstGatBlock(nn.Module):
    """Residual spatiotemporal graph attention over one (B, C, T) tensor.

    The channel view treats channels as nodes with their T-step time courses
    as features; the temporal view treats time steps as nodes with C-vectors
    as features. Residual updates keep the block an identity map when all
    attention parameters are zero. ``attended`` optionally supplies a
    temporally reweighted copy of the input that feeds the first attention
    view while the residual path carries the raw input.
    """

    def __init__(self, n_channels: int, n_timesteps: int, order: str = "channel_first"):
        super().__init__()
        self.n_channels = n_channels
        self.n_timesteps = n_timesteps
        self.order = order
        self.channel_gat = GraphAttention(n_timesteps)
        self.temporal_gat = GraphAttention(n_channels)

    def _temporal(self, x: torch.Tensor) -> torch.Tensor:
        return self.temporal_gat(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor, attended: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.n_channels or x.shape[2] != self.n_timesteps:
            raise ShapeError(
                f"expected (B, {self.n_channels}, {self.n_timesteps}), got {tuple(x.shape)}")
        require_finite("rst_gat input", x)
        y = x if attended is None else attended
        if self.order == "channel_first":
            u = x + self.channel_gat(y)
            return u + self._temporal(u)
        if self.order == "temporal_first":
            u = x + self._temporal(y)
            return u + self.channel_gat(u)
        # parallel_sum
        return x + self.channel_gat(y) + self._temporal(y)


class LatentChannelProjection(nn.Module):
    """Generate latent semantic channels from the observed visual channels.

    One affine map across the channel axis, applied identically at every time
    step: out[:, :, t] = x[:, :, t] @ W.T + b.
    """

    def __init__(self, n_visual: int, n_latent: int):
        super().__init__()
        self.proj = nn.Linear(n_visual, n_latent)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.proj.in_features:
            raise ShapeError(f"expected (B, {self.proj.in_features}, T), got {tuple(x.shape)}")
        return self.proj(x.transpose(1, 2)).transpose(1, 2)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_affine(self.proj, generator)


class FlattenHead(nn.Module):
    """Channel-major flatten -> affine -> GELU (exact) -> layer norm."""

    def __init__(self, in_features: int, out_features: int, eps: float):
        super().__init__()
        self.fc = nn.Linear(in_features, out_features)
        self.norm = nn.LayerNorm(out_features, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.fc(x.reshape(x.shape[0], -1))
        return self.norm(F.gelu(z))

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_affine(self.fc, generator)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.fill_(0.0)


class CoarseHead(nn.Module):
    """Affine over the weighted-flattened latent slice plus a residual
    refinement branch (GELU -> affine -> dropout), then layer norm.

    Dropout uses inverted scaling and only fires in train mode; eval mode is
    deterministic.
    """

    def __init__(self, in_features: int, out_features: int, dropout: float, eps: float):
        super().__init__()
        self.fc_in = nn.Linear(in_features, out_features)
        self.fc_res = nn.Linear(out_features, out_features)
        self.dropout_p = dropout
        self.norm = nn.LayerNorm(out_features, eps=eps)

    def forward(self, v: torch.Tensor, mode: str,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        h = self.fc_in(v)
        r = self.fc_res(F.gelu(h))
        if mode == "train" and self.dropout_p > 0.0:
            keep = 1.0 - self.dropout_p
            u = torch.rand(r.shape, dtype=r.dtype, device=r.device, generator=generator)
            r = r * (u < keep).to(r.dtype) / keep
        return self.norm(h + r)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_affine(self.fc_in, generator)
        init_affine(self.fc_res, generator)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.fill_(0.0)


class ImageProjector(nn.Module):
    """Two affine maps with a rectifier between; trained jointly with the
    encoder while the backbone features themselves stay frozen."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_affine(self.fc1, generator)
        init_affine(self.fc2, generator)


class LogitScale(nn.Module):
    """Learnable temperature of one alignment site: scale = softplus(rho)."""

    def __init__(self, init: float = LOGIT_SCALE_INIT):
        super().__init__()
        self.rho = nn.Parameter(torch.tensor(float(init)))
        self._init = float(init)

    def value(self) -> torch.Tensor:
        return F.softplus(self.rho)

    def reset_parameters(self, generator: torch.Generator) -> None:  # noqa: ARG002
        with torch.no_grad():
            self.rho.fill_(self._init)


@dataclass
class StageEmbeddings:
    """All embeddings of one forward pass; absent stages are None."""

    e1: torch.Tensor | None
    e_coarse: torch.Tensor | None
    e_fine: torch.Tensor | None
    e_eeg: torch.Tensor

    def by_stage(self, stage: str) -> torch.Tensor:
        table = {"I": self.e1, "II_coarse": self.e_coarse,
                 "II_fine": self.e_fine, "III": self.e_eeg}
        if stage not in table:
            raise ConfigurationError(f"unknown stage {stage!r}")
        emb = table[stage]
        if emb is None:
            raise ConfigurationError(f"stage {stage} is not produced by this variant")
        return emb


# Alignment sites of the contrastive objective, in logging order.
LOSS_SITES = ("low", "coarse", "fine", "fused")


class StagedEEGModel(nn.Module):
    """Full trainable system: staged encoder, image projectors, logit scales.

    Construction is structural: ablation variants build only the submodules
    they use, so the named-parameter set itself documents the variant.
    """

    def __init__(self, config: ModelConfig, variant: VariantSpec = FULL_VARIANT,
                 dtype: torch.dtype = torch.float32, init_seed: int = 0):
        super().__init__()
        self.config = config
        self.variant = variant
        c = config

        if variant.use_phase1:
            self.temporal_weight_1 = TemporalWeighter(c.n_timesteps, c.temporal_hidden)
            self.gat_1 = RstGatBlock(c.n_visual_channels, c.n_timesteps, c.gat_order)
            self.head_low = FlattenHead(c.n_visual_channels * c.n_timesteps, c.d_low,
                                        c.layer_norm_eps)
            self.proj_image_low = ImageProjector(c.d_low)

        if variant.use_phase2:
            n_joint = variant.joint_channels(c)
            if variant.latent_source == "generated":
                self.latent_proj = LatentChannelProjection(c.n_visual_channels,
                                                           c.n_latent_channels)
            self.temporal_weight_2 = TemporalWeighter(c.n_timesteps, c.temporal_hidden)
            self.gat_2 = RstGatBlock(n_joint, c.n_timesteps, c.gat_order)
            if variant.use_fine:
                self.head_fine = FlattenHead(n_joint * c.n_timesteps, c.d_sem, c.layer_norm_eps)
                self.proj_image_high = ImageProjector(c.d_sem)
            if variant.use_coarse:
                n_coarse = c.n_latent_channels if variant.latent_source != "none" \
                    else c.n_visual_channels
                self.head_coarse = CoarseHead(n_coarse * c.n_timesteps, c.d_sem,
                                              c.dropout_coarse, c.layer_norm_eps)

        fusion_in = 0
        if variant.use_phase1:
            fusion_in += c.d_low
        if variant.use_phase2 and variant.use_fine:
            fusion_in += c.d_sem
        if fusion_in == 0:
            # coarse-only phase 2: fuse from the coarse embedding
            fusion_in = c.d_sem
        self.fusion = nn.Linear(fusion_in, c.d_sem)

        shared = LogitScale() if c.share_logit_scale else None
        scales = {}
        for site in self.active_sites():
            scales[site] = shared if shared is not None else LogitScale()
        self.logit_scales = nn.ModuleDict(scales)

        self.to(dtype)
        self.reset_parameters(init_seed)

    # -- structure ---------------------------------------------------------

    def active_sites(self) -> tuple[str, ...]:
        v = self.variant
        sites = []
        if v.use_phase1:
            sites.append("low")
        if v.use_phase2 and v.use_coarse:
            sites.append("coarse")
        if v.use_phase2 and v.use_fine:
            sites.append("fine")
        sites.append("fused")
        return tuple(sites)

    @property
    def dtype(self) -> torch.dtype:
        return self.fusion.weight.dtype

    def parameter_paths(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.named_parameters())

    def parameters_by_path(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def reset_parameters(self, seed: int) -> None:
        """Deterministic re-initialization of every parameter from one seed."""
        g = torch.Generator()
        g.manual_seed(int(seed))
        for module in self.modules():
            if module is self:
                continue
            if module.__class__.__module__ == __name__ and hasattr(module, "reset_parameters"):
                module.reset_parameters(g)
        init_affine(self.fusion, g)

    # -- elementary maps ----------------------------------------------------

    def _weight_vector(self, weighter: TemporalWeighter) -> torch.Tensor:
        w = weighter()
        if self.config.temporal_weight_scale == "T":
            w = w * self.config.n_timesteps
        return w

    def _check_input(self, x: torch.Tensor, n_channels: int, tag: str) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1] != n_channels or x.shape[2] != self.config.n_timesteps:
            raise ShapeError(f"{tag}: expected (B, {n_channels}, {self.config.n_timesteps}), "
                             f"got {tuple(x.shape)}")
        require_finite(tag, x)
        return x

    def encode_phase1(self, e_v: torch.Tensor) -> torch.Tensor:
        """Visual channels -> low-level embedding (B, d_low)."""
        e_v = self._check_input(e_v, self.config.n_visual_channels, "phase1 input")
        w = self._weight_vector(self.temporal_weight_1)
        enc = self.gat_1(e_v, attended=e_v * w + e_v)
        return self.head_low(enc)

    def generate_latent_channels(self, e_v: torch.Tensor) -> torch.Tensor:
        return self.latent_proj(torch.as_tensor(e_v, dtype=self.dtype))

    def encode_phase2(self, e_v: torch.Tensor, e_extra: torch.Tensor | None = None):
        """Joint channel encoding.

        Returns (encoded, visual_slice, latent_slice); concatenating the two
        slices along the channel axis reproduces ``encoded`` exactly.
        """
        c = self.config
        v = self.variant
        e_v = self._check_input(e_v, c.n_visual_channels, "phase2 visual input")
        if v.latent_source == "generated":
            e_l = self.latent_proj(e_v)
            joint = torch.cat([e_v, e_l], dim=1)
        elif v.latent_source == "real":
            if e_extra is None:
                raise ShapeError("this variant consumes recorded extra channels; none given")
            e_extra = self._check_input(e_extra, c.n_latent_channels, "phase2 extra channels")
            joint = torch.cat([e_v, e_extra], dim=1)
        else:
            joint = e_v
        w = self._weight_vector(self.temporal_weight_2)
        enc = self.gat_2(joint, attended=joint * w + joint)
        n_v = c.n_visual_channels
        return enc, enc[:, :n_v], enc[:, n_v:]

    def coarse_embed(self, enc_latent: torch.Tensor, mode: str,
                     generator: torch.Generator | None = None) -> torch.Tensor:
        """Temporally reweighted latent slice -> coarse embedding (B, d_sem)."""
        w = self._weight_vector(self.temporal_weight_2)
        weighted = enc_latent * w
        return self.head_coarse(weighted.reshape(weighted.shape[0], -1), mode, generator)

    def fine_embed(self, encoded_joint: torch.Tensor) -> torch.Tensor:
        return self.head_fine(encoded_joint)

    def fuse(self, e1: torch.Tensor | None, e_fine: torch.Tensor | None,
             e_coarse: torch.Tensor | None) -> torch.Tensor:
        parts = [p for p in (e1, e_fine) if p is not None]
        if not parts:
            parts = [e_coarse]
        fused = self.fusion(torch.cat(parts, dim=-1))
        if e_coarse is not None and (e1 is not None or e_fine is not None):
            fused = fused + e_coarse
        return fused

    def project_image_features(self, raw_low: torch.Tensor | None = None,
                               raw_high: torch.Tensor | None = None):
        """Apply the trainable projectors and L2-normalize the outputs."""
        out_low = out_high = None
        if raw_low is not None:
            z = self.proj_image_low(torch.as_tensor(raw_low, dtype=self.dtype))
            out_low = z / z.norm(dim=-1, keepdim=True)
        if raw_high is not None:
            z = self.proj_image_high(torch.as_tensor(raw_high, dtype=self.dtype))
            out_high = z / z.norm(dim=-1, keepdim=True)
        return out_low, out_high

    # -- full pass -----------------------------------------------------------

    def forward_all(self, e_v: torch.Tensor, e_extra: torch.Tensor | None = None,
                    mode: str = "eval",
                    generator: torch.Generator | None = None) -> StageEmbeddings:
        """One pass through every active stage.

        Eval mode is a pure function of (parameters, input); train mode draws
        dropout masks from ``generator`` (or torch's default RNG if None).
        """
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        v = self.variant
        e1 = e_coarse = e_fine = None
        if v.use_phase1:
            e1 = self.encode_phase1(e_v)
        if v.use_phase2:
            enc, enc_v, enc_l = self.encode_phase2(e_v, e_extra)
            if v.use_fine:
                e_fine = self.fine_embed(enc)
            if v.use_coarse:
                coarse_src = enc_l if v.latent_source != "none" else enc
                e_coarse = self.coarse_embed(coarse_src, mode, generator)
        e_eeg = self.fuse(e1, e_fine, e_coarse)
        return StageEmbeddings(e1=e1, e_coarse=e_coarse, e_fine=e_fine, e_eeg=e_eeg)

    forward = forward_all
