"""Backbone, class-wise encoder and per-class classifier heads.

The backbone is an MLP that emits ``token_count`` tokens of width
``token_dim`` per sample, standing in for a convolutional feature map. The
class-wise encoder is one block of cross-attention: each class owns a
learned query that attends over the tokens, and a shared output projection
maps the attended value to a length-``embed_dim`` embedding. Class ``j``'s
head reads only class ``j``'s embedding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

MODEL_KINDS = ("cel", "baseline")

_ACTIVATIONS = {
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
}


class ZeroEmbeddingWarning(RuntimeWarning):
    pass


@dataclass
class ModelConfig:
    d: int
    q: int
    kind: str = "cel"
    hidden: tuple[int, ...] = (64,)
    token_count: int = 4
    token_dim: int = 32
    embed_dim: int = 16
    attn_dim: int = 32
    activation: str = "gelu"
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.token_count < 1 or self.token_dim < 1:
            raise ValueError("token_count and token_dim must be >= 1")
        if self.embed_dim < 1 or self.attn_dim < 1:
            raise ValueError("embed_dim and attn_dim must be >= 1")
        if self.q < 2:
            raise ValueError("need at least 2 classes")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = (config.d, *config.hidden)
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(fan_in, fan_out), _ACTIVATIONS[config.activation]()]
        layers.append(nn.Linear(widths[-1], config.token_count * config.token_dim))
        self.net = nn.Sequential(*layers)
        self.token_count = config.token_count
        self.token_dim = config.token_dim

    def forward(self, x):
        if not torch.isfinite(x).all():
            raise ValueError("backbone input contains non-finite values")
        return self.net(x).view(x.shape[0], self.token_count, self.token_dim)


class ClassWiseEncoder(nn.Module):
    """Cross-attention from ``q`` class queries onto the token set.

    ``E[j] = proj(norm(query_j + sum_n attn[j, n] * value(token_n)))``. The
    residual query term keeps class embeddings apart even when attention is
    flat.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(config.q, config.attn_dim))
        self.key = nn.Linear(config.token_dim, config.attn_dim)
        self.value = nn.Linear(config.token_dim, config.attn_dim)
        self.norm = nn.LayerNorm(config.attn_dim)
        self.proj = nn.Linear(config.attn_dim, config.embed_dim)
        self.scale = 1.0 / math.sqrt(config.attn_dim)

    def attention(self, tokens):
        keys = self.key(tokens)
        logits = torch.einsum("qa,bna->bqn", self.queries, keys) * self.scale
        return torch.softmax(logits, dim=-1)

    def forward(self, tokens):
        attn = self.attention(tokens)
        attended = torch.einsum("bqn,bna->bqa", attn, self.value(tokens))
        return self.proj(self.norm(attended + self.queries))


class ClassifierGroup(nn.Module):
    """One linear head per class; head ``j`` sees only embedding row ``j``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(config.q, config.embed_dim))
        self.bias = nn.Parameter(torch.zeros(config.q))

    def forward(self, E):
        return (E * self.weight).sum(dim=-1) + self.bias


class CELNet(nn.Module):
    """Backbone -> class-wise embeddings -> per-class heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.encoder = ClassWiseEncoder(config)
        self.heads = ClassifierGroup(config)
        init_parameters(self, seed)
        self.to(config.torch_dtype)

    def backbone_forward(self, x):
        return self.backbone(x)

    def classwise_encode(self, tokens):
        return self.encoder(tokens)

    def logits(self, E):
        return self.heads(E)

    def classify(self, E):
        return torch.softmax(self.heads(E), dim=-1)

    def forward(self, x):
        """Return ``(P, E)``: class probabilities and raw class-wise embeddings."""
        E = self.classwise_encode(self.backbone_forward(x))
        return self.classify(E), E


class BaselineNet(nn.Module):
    """Single pooled embedding followed by one linear layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.fc = nn.Linear(config.token_dim, config.q)
        init_parameters(self, seed)
        self.to(config.torch_dtype)

    def backbone_forward(self, x):
        return self.backbone(x)

    def forward(self, x):
        pooled = self.backbone_forward(x).mean(dim=1)
        return torch.softmax(self.fc(pooled), dim=-1), None


def build_model(config: ModelConfig, seed: int = 0) -> nn.Module:
    if config.kind == "baseline":
        return BaselineNet(config, seed)
    return CELNet(config, seed)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Symmetric uniform init scaled by fan-in for matrices, zeros for biases.

    Layer norms keep unit gain and zero shift.
    """
    gen = torch.Generator().manual_seed(int(seed))
    norm_gains = {id(m.weight) for m in module.modules() if isinstance(m, nn.LayerNorm) and m.weight is not None}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if id(p) in norm_gains:
                p.fill_(1.0)
                continue
            if p.dim() == 1:
                p.zero_()
                continue
            bound = 1.0 / math.sqrt(p.shape[1])
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2).sub_(1).mul_(bound))


def normalize_embeddings(E, eps: float = 1e-12):
    """Scale each embedding row to unit L2 norm; all-zero rows stay zero.

    Works on tensors of any leading shape, the last axis is the embedding.
    """
    norms = E.norm(dim=-1, keepdim=True)
    zero = norms <= eps
    if bool(zero.any()):
        warnings.warn(
            f"{int(zero.sum())} zero-norm embedding rows left at zero",
            ZeroEmbeddingWarning,
            stacklevel=2,
        )
    return E / torch.where(zero, torch.ones_like(norms), norms)


def gradient_manifest(model: nn.Module) -> dict[str, torch.Tensor]:
    """Map parameter names to their current gradients (``None`` entries dropped)."""
    return {name: p.grad for name, p in model.named_parameters() if p.grad is not None}
