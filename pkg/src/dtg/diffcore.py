"""Tensor primitives and gradient checking.

Reverse-mode differentiation is delegated to torch autograd; this module adds
the few primitives the networks need that torch does not ship in the exact
form required (affine-free LayerNorm, a stable log-cosh), typed errors, and a
central-difference gradient checker that is independent of autograd.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch

LAYERNORM_EPS = 1e-5
DEFAULT_DTYPE = torch.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class BackwardError(RuntimeError):
    """Backward requested on a value that was not produced by a recorded forward pass."""


def as_tensor(x, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def layernorm(x: torch.Tensor, eps: float = LAYERNORM_EPS) -> torch.Tensor:
    """LayerNorm over the last axis, without learnable scale or shift."""
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ShapeError(f"layernorm needs a non-empty last axis, got shape {tuple(x.shape)}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def norm(x: torch.Tensor) -> torch.Tensor:
    """LayerNorm rescaled by 1/sqrt(dim) so a following linear layer has controlled output variance."""
    return layernorm(x) / math.sqrt(x.shape[-1])


def arcsinh(x: torch.Tensor) -> torch.Tensor:
    return torch.asinh(x)


def logcosh(x: torch.Tensor) -> torch.Tensor:
    # |x| + log(1 + e^{-2|x|}) - log 2, finite for any |x|
    ax = x.abs()
    return ax + torch.log1p(torch.exp(-2.0 * ax)) - math.log(2.0)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x W^T + b with W of shape (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    return torch.nn.functional.linear(x, weight, bias)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def elementwise(op: str, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"{op}: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from exc
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce_sum(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


PRIMITIVES: dict[str, Callable[..., torch.Tensor]] = {
    "linear": linear,
    "layernorm": layernorm,
    "arcsinh": arcsinh,
    "tanh": torch.tanh,
    "logcosh": logcosh,
    "exp": torch.exp,
    "softplus": softplus,
    "mul": lambda a, b: elementwise("mul", a, b),
    "add": lambda a, b: elementwise("add", a, b),
    "matmul": matmul,
    "reduce_sum": reduce_sum,
}


def forward_primitive(kind: str, *inputs: torch.Tensor) -> torch.Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


def backward(output: torch.Tensor, output_grad: torch.Tensor | None = None) -> None:
    """Accumulate d(output)/d(param) into ``param.grad`` for every reachable parameter."""
    if not isinstance(output, torch.Tensor) or output.grad_fn is None:
        raise BackwardError("backward called on a tensor with no recorded forward graph")
    if output_grad is None:
        if output.numel() != 1:
            raise ShapeError("output_grad is required for non-scalar outputs")
        output_grad = torch.ones_like(output)
    if output_grad.shape != output.shape:
        raise ShapeError(f"output_grad {tuple(output_grad.shape)} does not match output {tuple(output.shape)}")
    output.backward(output_grad)


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / denom


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Worst relative error between autograd and central differences over every parameter element.

    ``fn`` must be deterministic and return a scalar. Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as the denominator so that
    gradients that are zero on both routes report zero error.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    if out.grad_fn is not None:
        out.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                numeric = torch.tensor((up - down) / (2.0 * step), dtype=g.dtype)
                err = _relative_error(gflat[i], numeric, floor).item()
                if not math.isfinite(err):
                    return math.inf
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def grad_check_inputs(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """grad_check for a function of a single input tensor rather than of registered parameters."""
    leaf = x.detach().clone().requires_grad_(True)
    return grad_check(lambda: fn(leaf), [leaf], step=step, floor=floor)


def named_params(module: torch.nn.Module, names: Sequence[str] | None = None) -> list[torch.Tensor]:
    params = dict(module.named_parameters())
    if names is None:
        return list(params.values())
    return [params[n] for n in names]
