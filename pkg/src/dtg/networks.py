"""The parameterizing networks: imputer, flow predictor with corrector, coupling weights, precision, and event-time head.

All networks act on batches: visit vectors have shape (B, N), context (B, C),
times (B,).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .diffcore import DEFAULT_DTYPE, norm

W_SCALE_TOTAL = "total"  # 1/sqrt(N*M)
W_SCALE_HIDDEN = "hidden"  # 1/sqrt(M)


@dataclass
class NetConfig:
    N: int
    M: int
    C: int
    imputer_embed_dim: int = 8
    flow_depth: int = 3
    corrector_layers: int = 1
    wnet_layers: int = 1
    pnet_layers: int = 1
    tte_residual_layers: int = 1
    tte_outcomes: tuple[str, ...] = ()
    w_scale: str = W_SCALE_TOTAL
    lambda_init: float = 0.1
    s_init: float = 1.0
    beta_init: float = 0.0

    def __post_init__(self):
        self.tte_outcomes = tuple(self.tte_outcomes)
        for name in ("N", "M", "imputer_embed_dim", "flow_depth", "corrector_layers", "wnet_layers", "pnet_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.C < 0 or self.tte_residual_layers < 0:
            raise ValueError("C and tte_residual_layers must be non-negative")
        if self.w_scale not in (W_SCALE_TOTAL, W_SCALE_HIDDEN):
            raise ValueError(f"w_scale must be {W_SCALE_TOTAL!r} or {W_SCALE_HIDDEN!r}")

    @property
    def D(self) -> int:
        return self.N + self.C

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tte_outcomes"] = list(self.tte_outcomes)
        return d


def _linear(n_in: int, n_out: int) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=DEFAULT_DTYPE)
    with torch.no_grad():
        layer.weight.normal_(0.0, 1.0 / math.sqrt(n_in))
        layer.bias.zero_()
    return layer


class NormLinear(nn.Module):
    """phi(Linear(Norm(x))) with phi either arcsinh or the identity."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity"):
        super().__init__()
        self.linear = _linear(n_in, n_out)
        self.activation = activation

    def forward(self, x):
        out = self.linear(norm(x))
        return torch.asinh(out) if self.activation == "arcsinh" else out


class AEImputer(nn.Module):
    """Two-layer encoder and decoder; fills only the unobserved slots."""

    def __init__(self, dim: int, embed_dim: int):
        super().__init__()
        self.encoder = nn.Sequential(NormLinear(dim, embed_dim, "arcsinh"), NormLinear(embed_dim, embed_dim, "arcsinh"))
        self.decoder = nn.Sequential(NormLinear(embed_dim, embed_dim, "arcsinh"), NormLinear(embed_dim, dim, "arcsinh"))

    def reconstruct(self, x, mask):
        return self.decoder(self.encoder(torch.where(mask, x, torch.zeros_like(x))))

    def forward(self, x, mask):
        # masked slots may hold NaN sentinels; zero-fill before anything touches them
        x = torch.where(mask, x, torch.zeros_like(x))
        return torch.where(mask, x, self.reconstruct(x, mask))


class FlowPredictor(nn.Module):
    """Stack of flow blocks z <- theta(z + t * Linear(Norm([z, c]))), theta(u) = s * arcsinh(u / s)."""

    def __init__(self, n: int, c: int, depth: int, s_init: float = 1.0):
        super().__init__()
        self.blocks = nn.ModuleList(_linear(n + c, n) for _ in range(depth))
        self.log_s = nn.Parameter(torch.full((n,), math.log(s_init), dtype=DEFAULT_DTYPE))

    @property
    def s(self):
        return torch.exp(self.log_s)

    def theta(self, u):
        s = self.s
        return s * torch.asinh(u / s)

    def forward(self, y0, c, t):
        t = t.reshape(-1, 1)
        z = y0
        for block in self.blocks:
            z = self.theta(z + t * block(norm(torch.cat([z, c], dim=-1))))
        return z


class TTEHead(nn.Module):
    """Location a(x) of the minimum-Gumbel law of log event time, plus its scale sigma."""

    def __init__(self, dim: int, residual_layers: int = 1):
        super().__init__()
        self.residual = nn.ModuleList(NormLinear(dim, dim, "arcsinh") for _ in range(residual_layers))
        self.out = NormLinear(dim, 1)
        self.log_sigma = nn.Parameter(torch.zeros((), dtype=DEFAULT_DTYPE))

    @property
    def sigma(self):
        return torch.exp(self.log_sigma)

    def forward(self, x):
        for block in self.residual:
            x = x + block(x)
        return self.out(x).squeeze(-1)


class NBMModel(nn.Module):
    """All learnable pieces of the conditional Neural Boltzmann Machine."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        n, m, c = config.N, config.M, config.C
        d = config.D
        self.imputer = AEImputer(d, config.imputer_embed_dim)
        self.flow = FlowPredictor(n, c, config.flow_depth, config.s_init)
        self.corrector = nn.ModuleList(_linear(n, n) for _ in range(config.corrector_layers))
        with torch.no_grad():
            for layer in self.corrector:
                layer.weight.copy_(torch.eye(n, dtype=DEFAULT_DTYPE))
        self.wnet = nn.ModuleList(
            [NormLinear(d, d) for _ in range(config.wnet_layers - 1)] + [NormLinear(d, n * m)]
        )
        self.pnet = nn.ModuleList(
            [NormLinear(d, d) for _ in range(config.pnet_layers - 1)] + [NormLinear(d, n)]
        )
        self.lambda_f = nn.Parameter(torch.full((n,), config.lambda_init, dtype=DEFAULT_DTYPE))
        self.lambda_w = nn.Parameter(torch.full((n,), config.lambda_init, dtype=DEFAULT_DTYPE))
        self.lambda_p = nn.Parameter(torch.full((n,), config.lambda_init, dtype=DEFAULT_DTYPE))
        self.beta = nn.Parameter(torch.full((n,), config.beta_init, dtype=DEFAULT_DTYPE))
        self.tte = nn.ModuleDict({name: TTEHead(d, config.tte_residual_layers) for name in config.tte_outcomes})

    # ----------------------------------------------------------------- inputs

    def impute(self, y, y_mask, c, c_mask):
        """Imputed (y, c) with no gradient path back into the imputer."""
        x = torch.cat([y, c], dim=-1)
        m = torch.cat([y_mask, c_mask], dim=-1)
        filled = self.imputer(x, m).detach()
        return filled[..., : self.config.N], filled[..., self.config.N :]

    # ----------------------------------------------------------------- mean

    def g(self, y0, c, t):
        return self.flow(y0, c, t)

    def mean_f(self, y0, c, y_cur, t_cur, t_fut):
        dt = (t_fut - t_cur).reshape(-1, 1)
        r = self.g(y0, c, t_cur) - y_cur
        for layer in self.corrector:
            r = layer(r)
        return self.g(y0, c, t_fut) + torch.exp(-self.lambda_f.abs() * dt) * r

    def mean_f_star(self, y0, c, t_cur, t_fut):
        return self.g(self.g(y0, c, t_cur), c, t_fut)

    # ----------------------------------------------------------------- couplings and precision

    def w(self, x):
        h = x
        for layer in self.wnet:
            h = layer(h)
        cfg = self.config
        scale = cfg.N * cfg.M if cfg.w_scale == W_SCALE_TOTAL else cfg.M
        return h.reshape(*h.shape[:-1], cfg.N, cfg.M) / math.sqrt(scale)

    def weights_W(self, x, t_cur, t_fut):
        dt = (t_fut - t_cur).reshape(-1, 1, 1)
        gate = torch.exp(-self.lambda_w.abs().unsqueeze(-1) * dt)
        return gate * self.w(x)

    def p(self, x):
        h = x
        for layer in self.pnet:
            h = layer(h)
        return h

    def precision_P(self, x, t_cur, t_fut):
        dt = (t_fut - t_cur).reshape(-1, 1)
        u = -torch.expm1(-self.lambda_p.abs() * dt)
        # log(1 + u e^p) written so that u = 0 gives exactly 0 and large p cannot overflow
        log_term = torch.where(
            u > 0,
            nn.functional.softplus(self.p(x) + torch.log(u.clamp_min(1e-300))),
            torch.zeros_like(u),
        )
        return torch.exp(self.beta - log_term)

    # ----------------------------------------------------------------- event head

    def tte_location(self, outcome: str, y0, c):
        return self.tte[outcome](torch.cat([y0, c], dim=-1))

    def tte_sigma(self, outcome: str):
        return self.tte[outcome].sigma

    def sample_log_tte(self, outcome: str, y0, c, uniforms):
        """log T = a(x) + sigma * eps, eps = log(-log U) a standard minimum-Gumbel draw."""
        eps = torch.log(-torch.log(uniforms))
        return self.tte_location(outcome, y0, c) + self.tte_sigma(outcome) * eps

    # ----------------------------------------------------------------- parameter groups

    GATE_NAMES = ("flow.log_s", "lambda_f", "lambda_w", "lambda_p", "beta")

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameters keyed by sub-network; gate and scale parameters are collected under 'gates'."""
        groups: dict[str, list] = {"imputer": [], "flow": [], "corrector": [], "wnet": [], "pnet": [], "tte": [], "gates": []}
        for name, p in self.named_parameters():
            if name in self.GATE_NAMES or name.endswith("log_sigma"):
                groups["gates"].append((name, p))
            else:
                groups[name.split(".")[0]].append((name, p))
        return groups
