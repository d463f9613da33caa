"""Semantic, domain and fused OOD scores.  Higher always means more ID.

Semantic scorers only ever see the first K logits; the domain score is the
background logit at index K; ``fuse`` combines the two with a temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import CapabilityError, ConfigError, FittingError, InputError

SCORER_KINDS = ("msp", "maxlogit", "odin", "energy", "vim")
SOFTMAX_BASED = ("msp", "odin")
LOGIT_BASED = ("maxlogit", "energy", "vim")


@dataclass
class ScorerSpec:
    kind: str = "energy"
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0014
    vim_dim: int = 16

    def validate(self):
        if self.kind not in SCORER_KINDS:
            raise ConfigError(f"unknown scorer {self.kind!r}; expected one of {SCORER_KINDS}")
        if self.odin_temperature <= 0:
            raise ConfigError("odin_temperature must be > 0")
        if self.odin_epsilon < 0:
            raise ConfigError("odin_epsilon must be >= 0")
        if self.vim_dim < 0:
            raise ConfigError("vim_dim must be >= 0")
        return self

    @property
    def value_type(self):
        return "softmax_based" if self.kind in SOFTMAX_BASED else "logit_based"


@dataclass
class FusionConfig:
    temperature: float = 2.5
    domain_floor: float = 1e-6

    def validate(self):
        if not self.temperature > 0:
            raise ConfigError("fusion temperature must be > 0")
        if not self.domain_floor > 0:
            raise ConfigError("domain_floor must be > 0")
        return self


def _logits(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InputError("logit vector must be non-empty")
    if not np.all(np.isfinite(x)):
        raise InputError("logits must be finite")
    return x


def semantic_logits(logits, num_classes):
    """First K entries of a (K+1)- or K-logit vector (or of each row)."""
    logits = np.asarray(logits)
    K = int(num_classes)
    if logits.shape[-1] not in (K, K + 1):
        raise InputError(f"expected {K} or {K + 1} logits, got {logits.shape[-1]}")
    return logits[..., :K]


def domain_score(logits, num_classes=None):
    """Background logit (the last entry)."""
    logits = np.asarray(logits)
    if num_classes is not None and logits.shape[-1] != int(num_classes) + 1:
        raise InputError(f"expected {int(num_classes) + 1} logits, got {logits.shape[-1]}")
    return logits[..., -1]


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def msp(logits):
    return _softmax(_logits(logits)).max(axis=-1)


def maxlogit(logits):
    return _logits(logits).max(axis=-1)


def energy(logits):
    """``log sum exp(logits)`` with max subtraction."""
    x = _logits(logits)
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


# --------------------------------------------------------------------------
# ODIN
# --------------------------------------------------------------------------

def _as_logit_fn(model, num_classes):
    if hasattr(model, "global_logits") and hasattr(model, "num_classes"):
        model.eval()
        K = model.num_classes if num_classes is None else num_classes
        return model.global_logits, K
    return model, num_classes


def odin_gradient(fn, x, temperature, num_classes=None):
    """Gradient w.r.t. ``x`` of ``log max softmax(fn(x)[:, :K] / temperature)``.

    Summed over the batch, which gives per-example gradients as long as
    ``fn`` treats examples independently.
    """
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = fn(x)
        if not (torch.is_tensor(out) and out.requires_grad):
            raise CapabilityError("the model does not provide gradients with respect to its input")
        out = out[:, :num_classes] if num_classes is not None else out
        logp = torch.log_softmax(out / temperature, dim=1)
        obj = logp.max(dim=1).values.sum()
        (grad,) = torch.autograd.grad(obj, x)
    return grad


def odin(model, images, spec: ScorerSpec, num_classes=None, batch_size=256):
    """ODIN score: temperature-scaled max softmax after input perturbation.

    The input moves by ``epsilon * sign(grad)`` in the direction that raises
    the temperature-scaled max softmax of the first K logits.  ``model`` is
    a DualHeadModel (global head) or any callable mapping a batch tensor to
    logits.
    """
    spec.validate()
    fn, K = _as_logit_fn(model, num_classes)
    tau, eps = spec.odin_temperature, spec.odin_epsilon
    x_all = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if hasattr(model, "check_input"):
        x_all = x_all.float()
        model.check_input(x_all)
    elif not x_all.is_floating_point():
        x_all = x_all.double()
    scores = []
    for i in range(0, len(x_all), batch_size):
        x = x_all[i:i + batch_size]
        if eps > 0:
            x = x + eps * torch.sign(odin_gradient(fn, x, tau, K))
        with torch.no_grad():
            out = fn(x)
        out = out[:, :K] if K is not None else out
        scores.append(msp(out.double().numpy() / tau))
    return np.concatenate(scores)


# --------------------------------------------------------------------------
# ViM
# --------------------------------------------------------------------------

@dataclass
class VimParams:
    offset: np.ndarray      # C
    residual_basis: np.ndarray  # C x (C - d), orthonormal columns
    alpha: float

    def residual_norm(self, features):
        z = np.asarray(features, dtype=np.float64) - self.offset
        return np.linalg.norm(z @ self.residual_basis, axis=-1)


def fit_vim(features, weight, bias, dim):
    """Fit the virtual-logit parameters on ID training features.

    ``weight`` (K x C) and ``bias`` (K) are the semantic rows of the linear
    classifier.  The offset is the point the classifier maps to zero logits,
    ``-pinv(W) b``; the principal subspace is spanned by the top ``dim``
    eigenvectors of the second-moment matrix of offset-centred features, and
    the residual is the norm of the remaining component.  ``alpha`` matches
    the mean residual to the mean max logit.
    """
    X = np.asarray(features, dtype=np.float64)
    W = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    N, C = X.shape
    d = int(dim)
    if not 0 <= d < C:
        raise FittingError(f"principal dimension must lie in [0, {C}), got {d}")
    offset = -np.linalg.pinv(W) @ b
    Z = X - offset
    rank = np.linalg.matrix_rank(Z)
    if d > rank:
        raise FittingError(f"principal dimension {d} exceeds the feature rank {rank}")
    eigvals, eigvecs = np.linalg.eigh(Z.T @ Z / N)
    order = np.argsort(eigvals)[::-1]
    basis = np.ascontiguousarray(eigvecs[:, order[d:]])
    residual = np.linalg.norm(Z @ basis, axis=1)
    scale = np.linalg.norm(Z, axis=1).mean()
    if residual.mean() <= 1e-9 * max(scale, 1e-300):
        raise FittingError("all training residuals vanish; alpha is undefined")
    max_logit = (X @ W.T + b).max(axis=1)
    alpha = float(max_logit.mean() / residual.mean())
    return VimParams(offset=offset, residual_basis=basis, alpha=alpha)


def vim_score(params: VimParams, features, logits):
    """``energy(logits) - alpha * residual_norm(features)``."""
    return energy(logits) - params.alpha * params.residual_norm(features)


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------

def fuse(s_h, s_d, value_type, cfg: FusionConfig | None = None):
    """Combine semantic and domain scores.

    softmax-based: ``S_h + log(max(S_d, floor)) / T``; logit-based:
    ``S_h + S_d / T``.
    """
    cfg = (cfg or FusionConfig()).validate()
    s_h = np.asarray(s_h, dtype=np.float64)
    s_d = np.asarray(s_d, dtype=np.float64)
    if value_type == "softmax_based":
        return s_h + np.log(np.maximum(s_d, cfg.domain_floor)) / cfg.temperature
    if value_type == "logit_based":
        return s_h + s_d / cfg.temperature
    raise InputError(f"unknown value_type {value_type!r}")


def clamp_count(s_d, value_type, cfg: FusionConfig | None = None):
    """How many domain scores the softmax-based fusion had to floor."""
    if value_type != "softmax_based":
        return 0
    cfg = cfg or FusionConfig()
    return int(np.sum(np.asarray(s_d) < cfg.domain_floor))


def semantic_scores(spec: ScorerSpec, logits, num_classes, features=None, vim=None,
                    model=None, images=None):
    """Dispatch one scorer over a batch; only the first K logits are used."""
    spec.validate()
    z = semantic_logits(logits, num_classes)
    if spec.kind == "msp":
        return msp(z)
    if spec.kind == "maxlogit":
        return maxlogit(z)
    if spec.kind == "energy":
        return energy(z)
    if spec.kind == "vim":
        if vim is None or features is None:
            raise InputError("vim scoring needs fitted parameters and features")
        return vim_score(vim, features, z)
    if spec.kind == "odin":
        if model is None or images is None:
            raise InputError("odin scoring needs the model and the input images")
        return odin(model, images, spec, num_classes=num_classes)
    raise ConfigError(f"unknown scorer {spec.kind!r}")
