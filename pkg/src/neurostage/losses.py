"""Temperature-scaled symmetric contrastive objective and the staged total loss.

The similarity matrix is the cosine matrix of the L2-normalized rows scaled by
a learnable positive temperature softplus(rho). The contrastive loss is the
mean of the row-wise and column-wise softmax cross-entropies against the
diagonal, averaged over both directions. Softmax terms are computed through
logsumexp with per-row max subtraction, so the small hand-evaluated oracles in
the tests reproduce the same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import LossWeights
from .errors import NumericError, ProtocolError
from .model import LogitScale, StageEmbeddings


def _resolve_scale(scale) -> torch.Tensor:
    if isinstance(scale, LogitScale):
        return scale.value()
    return torch.as_tensor(scale)


def l2_normalize_rows(x: torch.Tensor, tag: str = "embedding") -> torch.Tensor:
    """Row-normalize, raising NumericError naming any zero-norm row."""
    norms = x.norm(dim=-1, keepdim=True)
    zero = (norms == 0).squeeze(-1)
    if bool(zero.any()):
        row = int(zero.nonzero()[0])
        raise NumericError(f"cannot normalize {tag}: row {row} has zero norm")
    return x / norms


def similarity_matrix(x: torch.Tensor, y: torch.Tensor, scale) -> torch.Tensor:
    """S[i, j] = softplus(rho) * cos(x_i, y_j), shape (B, B)."""
    if x.shape != y.shape or x.ndim != 2:
        raise ProtocolError(f"paired batches must share shape (B, d), got "
                            f"{tuple(x.shape)} vs {tuple(y.shape)}")
    xn = l2_normalize_rows(x, "X")
    yn = l2_normalize_rows(y, "Y")
    return _resolve_scale(scale) * (xn @ yn.T)


def clip_loss(x: torch.Tensor, y: torch.Tensor, scale) -> torch.Tensor:
    """Symmetric contrastive loss over a batch of paired embeddings.

    Row i of x and row i of y are positives; all cross pairs are negatives.
    """
    if x.shape[0] == 0:
        raise ValueError("contrastive loss undefined for an empty batch")
    s = similarity_matrix(x, y, scale)
    diag = s.diagonal()
    loss_xy = (torch.logsumexp(s, dim=1) - diag).mean()
    loss_yx = (torch.logsumexp(s, dim=0) - diag).mean()
    return 0.5 * (loss_xy + loss_yx)


@dataclass
class AlignmentTargets:
    """Per-batch target features, row-aligned with the EEG batch.

    ``v_low`` / ``v_fine`` are the projected image features (projection happens
    upstream through the model's trainable projectors); ``v_image`` and
    ``t_coarse`` come straight from the frozen feature bundle.
    """

    v_low: torch.Tensor | None = None
    t_coarse: torch.Tensor | None = None
    v_fine: torch.Tensor | None = None
    v_image: torch.Tensor | None = None


# site -> (stage attribute, target attribute)
_SITE_WIRING = {
    "low": ("e1", "v_low"),
    "coarse": ("e_coarse", "t_coarse"),
    "fine": ("e_fine", "v_fine"),
    "fused": ("e_eeg", "v_image"),
}


def total_loss(stages: StageEmbeddings, targets: AlignmentTargets,
               scales, weights: LossWeights):
    """Weighted staged objective.

    ``scales`` maps site name -> LogitScale (the model's ``logit_scales``).
    Returns (total, breakdown) where breakdown holds the raw, unweighted loss
    tensor per active site; sites absent from the variant do not appear and
    contribute exactly zero.
    """
    breakdown: dict[str, torch.Tensor] = {}
    for site, (stage_attr, target_attr) in _SITE_WIRING.items():
        emb = getattr(stages, stage_attr)
        if emb is None:
            continue
        target = getattr(targets, target_attr)
        if target is None:
            raise ProtocolError(f"missing target features for level {site!r}")
        if site not in scales:
            raise ProtocolError(f"no logit scale registered for site {site!r}")
        breakdown[site] = clip_loss(emb, target, scales[site])

    zero = stages.e_eeg.sum() * 0.0
    term_low = breakdown.get("low", zero)
    term_coarse = breakdown.get("coarse", zero)
    term_fine = breakdown.get("fine", zero)
    term_fused = breakdown.get("fused", zero)
    total = (weights.alpha1 * term_low
             + weights.alpha2 * (term_coarse + term_fine)
             + weights.alpha3 * term_fused)
    return total, breakdown


def recombine(breakdown: dict[str, float], weights: LossWeights) -> float:
    """Reference recombination of logged raw terms into the logged total."""
    return (weights.alpha1 * breakdown.get("low", 0.0)
            + weights.alpha2 * (breakdown.get("coarse", 0.0) + breakdown.get("fine", 0.0))
            + weights.alpha3 * breakdown.get("fused", 0.0))
