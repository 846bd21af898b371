"""Parameters, module tree, and the layers shared by the backbones and fusion blocks."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


class Parameter:
    """A trainable array with a dotted path name and an optimizer group tag.

    ``group`` selects the learning rate (``"main"`` for fusion blocks and
    heads, ``"block"`` for backbone encoders/decoders).  Freezing clears
    ``requires_grad`` so the array drops out of both the graph and the
    optimizer.
    """

    def __init__(self, data, group: str = "main"):
        if group not in ("main", "block"):
            raise ValueError(f"unknown parameter group {group!r}")
        self.array = DiffArray(data, requires_grad=True)
        self.group = group
        self.name: str = ""

    @property
    def data(self) -> np.ndarray:
        return self.array.data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=self.array.data.dtype)
        if value.shape != self.array.data.shape:
            raise ValueError(
                f"parameter {self.name or '<unnamed>'}: shape {value.shape} != {self.array.data.shape}"
            )
        self.array.data = value

    @property
    def frozen(self) -> bool:
        return not self.array.requires_grad

    def freeze(self) -> None:
        self.array.requires_grad = False

    def unfreeze(self) -> None:
        self.array.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.array.shape}, group={self.group})"


class Module:
    """Base class whose parameter names follow the attribute tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        """Stamp dotted path names onto all parameters; names must be unique."""
        seen = {}
        for name, p in self.named_parameters(prefix):
            if name in seen and seen[name] is not p:
                raise ValueError(f"duplicate parameter name {name}")
            seen[name] = p
            p.name = name


class Linear(Module):
    """Affine map ``x @ w + b`` applied to the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 group: str = "main", bias: bool = True):
        self.w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)), group)
        self.b = Parameter(np.zeros(d_out), group) if bias else None

    def __call__(self, x) -> DiffArray:
        out = ad.matmul(x, self.w.array)
        if self.b is not None:
            out = ad.add(out, self.b.array)
        return out


def linear_forward(x, w, b=None) -> DiffArray:
    """Functional affine map; differentiable in all inputs."""
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


class LayerNorm(Module):
    def __init__(self, d: int, group: str = "main", eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d), group)
        self.beta = Parameter(np.zeros(d), group)
        self.eps = eps

    def __call__(self, x) -> DiffArray:
        return ad.layer_norm(x, self.gamma.array, self.beta.array, eps=self.eps)


class FeedForward(Module):
    """Two-layer gelu MLP, optionally with a different hidden width."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None,
                 d_out: int | None = None, group: str = "main"):
        hidden = hidden or 2 * d
        self.fc1 = Linear(d, hidden, rng, group)
        self.fc2 = Linear(hidden, d_out or d, rng, group)

    def __call__(self, x) -> DiffArray:
        return self.fc2(ad.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    Accepts ``(N, D)`` or batched ``(B, N, D)`` inputs; ``key_mask`` marks
    which key positions may be attended to (False keys get zero probability).
    Query and key/value inputs may have widths different from ``d_model``
    (used where positional offsets are concatenated onto features).
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 d_q_in: int | None = None, d_kv_in: int | None = None,
                 group: str = "main"):
        if d_model % num_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.wq = Linear(d_q_in or d_model, d_model, rng, group)
        self.wk = Linear(d_kv_in or d_model, d_model, rng, group)
        self.wv = Linear(d_kv_in or d_model, d_model, rng, group)
        self.wo = Linear(d_model, d_model, rng, group)

    def __call__(self, q, k, v, key_mask=None) -> DiffArray:
        squeeze = q.ndim == 2
        if squeeze:
            q = ad.reshape(q, (1,) + q.shape)
            k = ad.reshape(k, (1,) + k.shape)
            v = ad.reshape(v, (1,) + v.shape)
            if key_mask is not None:
                key_mask = np.asarray(key_mask).reshape(1, -1)
        b, nq = q.shape[0], q.shape[1]
        nk = k.shape[1]
        h, dh = self.num_heads, self.d_model // self.num_heads

        def split_heads(x, n):
            x = ad.reshape(x, (b, n, h, dh))
            return ad.transpose(x, (0, 2, 1, 3))

        qh = split_heads(self.wq(q), nq)
        kh = split_heads(self.wk(k), nk)
        vh = split_heads(self.wv(v), nk)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool).reshape(b, 1, 1, nk)
        probs = ad.softmax(scores, axis=-1, mask=mask)
        out = ad.matmul(probs, vh)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, nq, self.d_model))
        out = self.wo(out)
        return ad.reshape(out, (nq, self.d_model)) if squeeze else out


def mha_forward(q, k, v, heads: int, rng: np.random.Generator | None = None,
                attn: MultiHeadAttention | None = None, key_mask=None) -> DiffArray:
    """Functional attention entry point; builds a throwaway layer unless given one."""
    if attn is None:
        if rng is None:
            raise ValueError("mha_forward needs either a layer or an rng to build one")
        attn = MultiHeadAttention(q.shape[-1], heads, rng, d_kv_in=k.shape[-1])
    return attn(q, k, v, key_mask=key_mask)


def collect_parameters(modules: Sequence[Module]) -> list[Parameter]:
    out: list[Parameter] = []
    for m in modules:
        out.extend(m.parameters())
    return out
