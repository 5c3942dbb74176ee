"""Loss terms for the alternating adversarial training.

Modality logits enter through an M x M x B table ``s`` with
``s[i, j, b]`` = i-th modality logit evaluated on row b of the modality-j
latent sub-batch; ``s[i, i]`` is the "real" score of modality i.  The
relativistic argument sums the real-vs-fake comparison over every ordered
pair (i, j != i), which keeps the objective non-degenerate for any number of
modalities and makes the generator argument the exact negation of the
discriminator argument row by row.

The clustering regularizer follows the divergence-based formulation: a
Gaussian kernel over the discriminator trunk output h, a Cauchy-Schwarz
quotient over class soft-assignment columns, the same quotient over
simplex-corner affinities, and the negative entropy of the mean assignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DegenerateKernelError, NumericalError, ShapeError

_QUOTIENT_EPS = 1e-12


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the squared error summed over features."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).sum(dim=-1).mean()


def kl_loss(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mean KL(N(mu, sigma^2) || N(0, 1)) over the batch, summed over dims."""
    if mu.shape != sigma.shape:
        raise ShapeError("mu and sigma must have matching shapes")
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    var = sigma**2
    return (0.5 * (mu**2 + var - 1 - torch.log(var)).sum(dim=-1)).mean()


def _check_table(table: torch.Tensor) -> None:
    if table.dim() != 3 or table.shape[0] != table.shape[1]:
        raise ShapeError(f"logit table must be (M, M, B), got {tuple(table.shape)}")
    if table.shape[0] < 2:
        raise ShapeError("logit table needs at least two modalities")


def disc_argument(table: torch.Tensor) -> torch.Tensor:
    """Per-row softplus argument of the discriminator's relativistic loss.

    -sum over ordered pairs (i, j != i) of (s[i,i] - s[i,j]).
    """
    _check_table(table)
    M = table.shape[0]
    total = torch.zeros(table.shape[2], dtype=table.dtype, device=table.device)
    for i in range(M):
        own = table[i, i]
        for j in range(M):
            if j != i:
                total = total + (own - table[i, j])
    return -total


def vae_argument(table: torch.Tensor) -> torch.Tensor:
    """Per-row softplus argument of the encoders' adversarial loss.

    -sum over ordered pairs (i, j != i) of (s[i,j] - s[i,i]).
    """
    _check_table(table)
    M = table.shape[0]
    total = torch.zeros(table.shape[2], dtype=table.dtype, device=table.device)
    for i in range(M):
        for j in range(M):
            if j != i:
                total = total + (table[i, j] - table[i, i])
    return -total


def relativistic_disc_loss(
    table: torch.Tensor,
    latents=None,
    gamma: float = 0.0,
    create_graph: bool = False,
):
    """Relativistic discriminator loss plus the zero-centered gradient penalty.

    ``latents`` is the list of per-modality latent batches the table was
    computed from; the penalty is (gamma/2) * sum_i mean_b of the squared
    norm of d s[i,i,b] / d z_i[b].  Returns ``(rel_d, grad_penalty)``.
    """
    _check_table(table)
    rel_d = F.softplus(disc_argument(table)).mean()
    if gamma == 0.0 or latents is None:
        if gamma != 0.0:
            raise ValueError("gamma > 0 requires the latent batches")
        return rel_d, torch.zeros((), dtype=table.dtype, device=table.device)
    M = table.shape[0]
    if len(latents) != M:
        raise ShapeError("one latent batch per modality is required")
    if len({z.shape[0] for z in latents}) != 1:
        raise ShapeError("latent sub-batches must have equal sizes")
    own_sum = sum(table[i, i].sum() for i in range(M))
    grads = torch.autograd.grad(own_sum, list(latents), create_graph=create_graph, retain_graph=True)
    penalty = sum(g.pow(2).sum(dim=-1).mean() for g in grads)
    return rel_d, (gamma / 2.0) * penalty


def relativistic_vae_loss(table: torch.Tensor) -> torch.Tensor:
    """Adversarial counterpart used when updating the encoders (no penalty)."""
    return F.softplus(vae_argument(table)).mean()


def class_loss(class_logits: torch.Tensor, labels: torch.Tensor, labeled_mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over labeled rows only; 0 when no row is labeled.

    ``labels`` are 0-based class indices, read only where ``labeled_mask``.
    """
    if class_logits.dim() != 2:
        raise ShapeError("class logits must be (n, K)")
    if labeled_mask.shape[0] != class_logits.shape[0]:
        raise ShapeError("mask length must match the batch")
    if not labeled_mask.any():
        return torch.zeros((), dtype=class_logits.dtype, device=class_logits.device)
    picked = labels[labeled_mask]
    if picked.min() < 0 or picked.max() >= class_logits.shape[1]:
        raise ValueError("label out of range")
    return F.cross_entropy(class_logits[labeled_mask], picked.long())


def pairwise_sq_dists(x: torch.Tensor) -> torch.Tensor:
    sq = (x**2).sum(dim=1, keepdim=True)
    d2 = sq - 2 * x @ x.T + sq.T
    return d2.clamp_min(0)


def median_bandwidth(h: torch.Tensor) -> float:
    """Median pairwise distance of h (detached); errors when degenerate."""
    n = h.shape[0]
    if n < 2:
        raise ShapeError("need at least two rows for a kernel bandwidth")
    d2 = pairwise_sq_dists(h.detach())
    iu = torch.triu_indices(n, n, offset=1)
    sigma = math.sqrt(float(d2[iu[0], iu[1]].median()))
    if sigma <= 0:
        raise DegenerateKernelError(
            "all pairwise distances are zero; the clustering kernel is undefined"
        )
    return sigma


def _cs_quotient_sum(cols: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """binom(K,2)^-1 sum over column pairs of the kernel Cauchy-Schwarz quotient.

    Quadratic-form products in the denominator are floored at 1e-24 so
    all-zero columns contribute 0 instead of 0/0.
    """
    K = cols.shape[1]
    quad = cols.T @ kernel @ cols
    diag = torch.diagonal(quad)
    denom = torch.sqrt(torch.clamp(diag[:, None] * diag[None, :], min=_QUOTIENT_EPS**2))
    quotients = quad / denom
    pairs = torch.triu(quotients, diagonal=1).sum()
    return pairs / math.comb(K, 2)


def clustering_loss(h: torch.Tensor, alpha: torch.Tensor, sigma_kernel="median"):
    """Divergence-based clustering terms over soft assignments.

    ``h`` is the discriminator trunk output and ``alpha`` the (n, K) class
    soft-assignment matrix (rows on the simplex).  The Gaussian kernel
    s_ij = exp(-||h_i - h_j||^2 / (2 sigma^2)) uses ``sigma_kernel`` or, for
    "median", the median pairwise distance of the batch (a constant for
    differentiation).  Returns ``(c1, c2, c3)``: the assignment-column
    separation quotient, the simplex-corner quotient, and the negative
    entropy of the mean assignment.
    """
    if h.dim() != 2 or alpha.dim() != 2:
        raise ShapeError("h and alpha must be 2-D")
    n, K = alpha.shape
    if h.shape[0] != n:
        raise ShapeError("h and alpha must have the same number of rows")
    if K < 2 or n < 2:
        raise ShapeError("need at least 2 classes and 2 samples")
    if (alpha < -1e-6).any() or (alpha.sum(dim=1) - 1).abs().max() > 1e-4:
        raise ValueError("alpha rows must lie on the simplex")
    sigma = median_bandwidth(h) if sigma_kernel == "median" else float(sigma_kernel)
    if sigma <= 0:
        raise DegenerateKernelError("kernel bandwidth must be positive")

    kernel = torch.exp(-pairwise_sq_dists(h) / (2 * sigma**2))
    c1 = _cs_quotient_sum(alpha, kernel)

    corners = torch.eye(K, dtype=alpha.dtype, device=alpha.device)
    corner_d2 = ((alpha[:, None, :] - corners[None, :, :]) ** 2).sum(dim=-1)
    c2 = _cs_quotient_sum(torch.exp(-corner_d2), kernel)

    mean_alpha = alpha.mean(dim=0)
    c3 = torch.where(
        mean_alpha > 0, mean_alpha * torch.log(mean_alpha.clamp_min(1e-300)), mean_alpha
    ).sum()
    return c1, c2, c3


def total_disc_loss(rel_d, grad_penalty, class_ce, c1, c2, c3):
    """Discriminator objective: relativistic + penalty + class CE + clustering."""
    parts = [rel_d, grad_penalty, class_ce, c1, c2, c3]
    _check_finite(parts)
    return rel_d + grad_penalty + class_ce + (c1 + c2 + c3)


def total_vae_loss(recon, kl, rel_vae, class_ce, c1, c2, c3, beta):
    """VAE objective: sum_m (recon_m + beta * kl_m) + adversarial + class + clustering."""
    parts = [*recon, *kl, rel_vae, class_ce, c1, c2, c3]
    _check_finite(parts)
    vae_terms = sum(r + beta * k for r, k in zip(recon, kl, strict=True))
    return vae_terms + rel_vae + class_ce + (c1 + c2 + c3)


def _as_float(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _check_finite(parts):
    for part in parts:
        value = _as_float(part)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss part: {value}")


@dataclass
class LossReport:
    """Every named loss term of one optimization step, plus the totals."""

    recon: tuple[float, ...]
    kl: tuple[float, ...]
    rel_d: float
    rel_vae: float
    grad_penalty: float
    class_ce: float
    c1: float
    c2: float
    c3: float
    total_d: float
    total_vae: float
    beta: float
    gamma: float
    sigma_kernel: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_parts(cls, recon, kl, rel_d, rel_vae, grad_penalty, class_ce,
                   c1, c2, c3, beta, gamma, sigma_kernel, **meta) -> "LossReport":
        recon = tuple(_as_float(r) for r in recon)
        kl = tuple(_as_float(k) for k in kl)
        vals = dict(
            rel_d=_as_float(rel_d), rel_vae=_as_float(rel_vae),
            grad_penalty=_as_float(grad_penalty), class_ce=_as_float(class_ce),
            c1=_as_float(c1), c2=_as_float(c2), c3=_as_float(c3),
        )
        total_d = vals["rel_d"] + vals["grad_penalty"] + vals["class_ce"] + (
            vals["c1"] + vals["c2"] + vals["c3"]
        )
        total_vae = sum(r + beta * k for r, k in zip(recon, kl)) + vals["rel_vae"] + (
            vals["class_ce"] + vals["c1"] + vals["c2"] + vals["c3"]
        )
        return cls(recon=recon, kl=kl, total_d=total_d, total_vae=total_vae,
                   beta=float(beta), gamma=float(gamma), sigma_kernel=float(sigma_kernel),
                   meta=dict(meta), **vals)

    def check_totals(self, tol: float = 1e-9) -> None:
        lhs_d = self.rel_d + self.grad_penalty + self.class_ce + (self.c1 + self.c2 + self.c3)
        lhs_v = sum(r + self.beta * k for r, k in zip(self.recon, self.kl)) + self.rel_vae + (
            self.class_ce + self.c1 + self.c2 + self.c3
        )
        if abs(lhs_d - self.total_d) > tol or abs(lhs_v - self.total_vae) > tol:
            raise NumericalError("loss report totals do not match their parts")

    def to_dict(self) -> dict:
        out = {
            "recon": list(self.recon), "kl": list(self.kl),
            "rel_d": self.rel_d, "rel_vae": self.rel_vae,
            "grad_penalty": self.grad_penalty, "class_ce": self.class_ce,
            "c1": self.c1, "c2": self.c2, "c3": self.c3,
            "total_d": self.total_d, "total_vae": self.total_vae,
            "beta": self.beta, "gamma": self.gamma, "sigma_kernel": self.sigma_kernel,
        }
        out.update(self.meta)
        return out

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "LossReport":
        known = {
            "recon", "kl", "rel_d", "rel_vae", "grad_penalty", "class_ce",
            "c1", "c2", "c3", "total_d", "total_vae", "beta", "gamma", "sigma_kernel",
        }
        meta = {k: v for k, v in data.items() if k not in known}
        return cls(
            recon=tuple(data["recon"]), kl=tuple(data["kl"]), rel_d=data["rel_d"],
            rel_vae=data["rel_vae"], grad_penalty=data["grad_penalty"],
            class_ce=data["class_ce"], c1=data["c1"], c2=data["c2"], c3=data["c3"],
            total_d=data["total_d"], total_vae=data["total_vae"], beta=data["beta"],
            gamma=data["gamma"], sigma_kernel=data["sigma_kernel"], meta=meta,
        )
