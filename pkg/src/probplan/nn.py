"""Small deterministic differentiable core: layers, parameter store, Adam, gradient checks.

Reverse-mode accumulation is delegated to torch autograd; everything else
(layer math, initialization, optimizer, checkpoint layout) lives here so the
numerics are pinned and reproducible.
"""
from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

from .exceptions import FormatError, NonFiniteError, ShapeError

CKPT_MAGIC = b"VPC1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI7IQI")  # magic, version, d heads depth L T N ffn, step, records


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or (b is not None and b.shape != W.shape[1:]):
        raise ShapeError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(W.shape)}"
            + ("" if b is None else f" and bias {tuple(b.shape)}")
        )
    y = x @ W
    return y if b is None else y + b


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    # smooth activation keeps finite-difference checks free of kinks
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def mlp2(x: torch.Tensor, p: Mapping[str, torch.Tensor], prefix: str) -> torch.Tensor:
    """Two-layer perceptron ``W2 gelu(W1 x + b1) + b2``; ``b2`` is optional."""
    h = gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(h, p[f"{prefix}.w2"], p.get(f"{prefix}.b2"))


def multi_head_cross_attention(
    q: torch.Tensor,
    kv: torch.Tensor,
    p: Mapping[str, torch.Tensor],
    prefix: str,
    heads: int,
    kv_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention from query tokens to key/value tokens.

    ``q`` is ``(..., Nq, d)`` and ``kv`` is ``(..., M, d)``; ``kv_mask``
    (``(..., M)`` bool) marks valid keys. Heads are concatenated and passed
    through the output projection, so the result has the shape of ``q``.
    """
    d = q.shape[-1]
    if kv.shape[-1] != d:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key/value width {kv.shape[-1]}")
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    Q = linear(q, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    K = linear(kv, p[f"{prefix}.wk"])
    V = linear(kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    lead = q.shape[:-2]
    Q = Q.reshape(*lead, q.shape[-2], heads, dh).transpose(-3, -2)
    K = K.reshape(*kv.shape[:-2], kv.shape[-2], heads, dh).transpose(-3, -2)
    V = V.reshape(*kv.shape[:-2], kv.shape[-2], heads, dh).transpose(-3, -2)
    scores = Q @ K.transpose(-1, -2) / math.sqrt(dh)
    if kv_mask is not None:
        bias = torch.where(kv_mask, 0.0, -1e9).to(scores.dtype)
        scores = scores + bias[..., None, None, :]
    attn = softmax(scores, dim=-1)
    out = (attn @ V).transpose(-3, -2).reshape(*lead, q.shape[-2], d)
    return linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def decoder_layer(q, kv, p, prefix: str, heads: int, kv_mask=None) -> torch.Tensor:
    """Post-norm cross-attention block followed by a post-norm feed-forward block."""
    x = layer_norm(
        q + multi_head_cross_attention(q, kv, p, f"{prefix}.attn", heads, kv_mask),
        p[f"{prefix}.ln1.g"],
        p[f"{prefix}.ln1.b"],
    )
    return layer_norm(x + mlp2(x, p, f"{prefix}.ffn"), p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def transformer_decoder_stack(q, kv, p, depth: int, heads: int, prefix: str = "dec", kv_mask=None):
    for i in range(depth):
        q = decoder_layer(q, kv, p, f"{prefix}.{i}", heads, kv_mask)
    return q


class ParamStore:
    """Named parameters with Adam moments and a step counter.

    Parameters are created in a fixed order from a seeded generator, which
    makes the whole model a deterministic function of the seed.
    """

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0
        self.dtype = dtype
        self._gen = torch.Generator().manual_seed(int(seed))

    def _register(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = value.to(self.dtype).requires_grad_(True)
        self.params[name] = value
        self.m[name] = torch.zeros_like(value, requires_grad=False)
        self.v[name] = torch.zeros_like(value, requires_grad=False)
        return value

    def uniform(self, name: str, shape, fan_in: int) -> torch.Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        u = torch.rand(tuple(shape), generator=self._gen, dtype=torch.float64)
        return self._register(name, (2.0 * u - 1.0) * bound)

    def constant(self, name: str, shape, value: float) -> torch.Tensor:
        return self._register(name, torch.full(tuple(shape), float(value), dtype=torch.float64))

    def add_linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self.uniform(f"{prefix}.w", (n_in, n_out), n_in)
        if bias:
            self.uniform(f"{prefix}.b", (n_out,), n_in)

    def add_mlp2(self, prefix: str, n_in: int, n_hidden: int, n_out: int, out_bias: bool = True) -> None:
        self.uniform(f"{prefix}.w1", (n_in, n_hidden), n_in)
        self.uniform(f"{prefix}.b1", (n_hidden,), n_in)
        self.uniform(f"{prefix}.w2", (n_hidden, n_out), n_hidden)
        if out_bias:
            self.uniform(f"{prefix}.b2", (n_out,), n_hidden)

    def add_attention(self, prefix: str, d: int) -> None:
        # no key bias: it shifts every score of a query by the same amount,
        # which softmax cancels, so its gradient is identically zero
        for k in "qkvo":
            self.uniform(f"{prefix}.w{k}", (d, d), d)
            if k != "k":
                self.uniform(f"{prefix}.b{k}", (d,), d)

    def add_layer_norm(self, prefix: str, d: int) -> None:
        self.constant(f"{prefix}.g", (d,), 1.0)
        self.constant(f"{prefix}.b", (d,), 0.0)

    def add_decoder_stack(self, prefix: str, d: int, ffn: int, depth: int) -> None:
        for i in range(depth):
            self.add_attention(f"{prefix}.{i}.attn", d)
            self.add_layer_norm(f"{prefix}.{i}.ln1", d)
            self.add_mlp2(f"{prefix}.{i}.ffn", d, ffn, d)
            self.add_layer_norm(f"{prefix}.{i}.ln2", d)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def get(self, name, default=None):
        return self.params.get(name, default)

    def n_values(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype: torch.dtype) -> "ParamStore":
        """Detached copy in another precision (Adam state included)."""
        out = ParamStore(dtype=dtype)
        out.step = self.step
        for k, p in self.params.items():
            out.params[k] = p.detach().to(dtype).clone().requires_grad_(True)
            out.m[k] = self.m[k].to(dtype).clone()
            out.v[k] = self.v[k].to(dtype).clone()
        return out

    def zero_(self, prefix: str = "") -> None:
        with torch.no_grad():
            for k, p in self.params.items():
                if k.startswith(prefix):
                    p.zero_()

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}


def adam_step(
    store: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update, applied in place; returns ``store``."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = store.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = store.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return store


def grad_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return float(math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values())))


def grad_check(
    fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    fd_dtype: torch.dtype | None = None,
    method: str = "stencil",
) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    The finite-difference side uses the fourth-order central stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``. ``max_entries``
    limits the number of coordinates probed per tensor (chosen with a
    seeded RNG); ``None`` probes all of them. The error for one coordinate is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.

    ``fd_dtype`` evaluates the finite-difference side with the parameters cast
    to that dtype (typically float64), so a float32 reverse-mode gradient is
    compared against a reference that is not dominated by rounding noise.
    ``fn`` must then accept parameters of either dtype.

    ``method="ridders"`` replaces the fixed stencil with Ridders' polynomial
    extrapolation of central differences, starting from step ``eps`` and
    shrinking it by 1.4 per stage. Starting from a large step keeps the
    round-off floor low, which matters when some true gradients are many
    orders of magnitude below the function value.
    """
    if method not in ("stencil", "ridders"):
        raise ValueError(f"unknown finite-difference method {method!r}")
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = fn(leaves)
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(v)).detach() for (k, v), g in zip(leaves.items(), grads)
    }
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        work = {k: v.detach().to(fd_dtype or v.dtype).clone() for k, v in params.items()}

        def f() -> float:
            return float(fn(work))

        for name, tensor in work.items():
            flat = tensor.view(-1)
            n = flat.numel()
            idx = range(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
            g_ad = analytic[name].view(-1)
            for i in idx:
                orig = flat[i].item()
                if method == "ridders":
                    g_fd = _ridders(f, flat, i, orig, eps)
                else:
                    vals = []
                    for step in (2.0, 1.0, -1.0, -2.0):
                        flat[i] = orig + step * eps
                        vals.append(f())
                    # differences first so an unused coordinate yields exactly zero
                    g_fd = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * eps)
                flat[i] = orig
                a = float(g_ad[i])
                err = abs(a - g_fd) / max(abs(a), abs(g_fd), 1e-8)
                worst = max(worst, err)
    return worst


def _ridders(f: Callable[[], float], flat: torch.Tensor, i: int, orig: float, h: float, shrink: float = 1.4, stages: int = 10) -> float:
    """Ridders' extrapolated central difference of ``f`` along ``flat[i]``."""

    def central(step: float) -> float:
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        return (up - f()) / (2.0 * step)

    table = np.zeros((stages, stages))
    table[0, 0] = best = central(h)
    best_err = math.inf
    for j in range(1, stages):
        h /= shrink
        table[0, j] = central(h)
        fac = shrink * shrink
        for m in range(1, j + 1):
            table[m, j] = (table[m - 1, j] * fac - table[m - 1, j - 1]) / (fac - 1.0)
            fac *= shrink * shrink
            err = max(abs(table[m, j] - table[m - 1, j]), abs(table[m, j] - table[m - 1, j - 1]))
            if err <= best_err:
                best_err, best = err, table[m, j]
        # stop once higher orders start to diverge
        if abs(table[j, j] - table[j - 1, j - 1]) >= 2.0 * best_err:
            break
    return float(best)


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 4
    depth: int = 3
    n_bands: int = 8
    horizon: int = 6
    n_actions: int = 4096
    ffn: int = 256


def checkpoint_to_bytes(store: ParamStore, config: ModelConfig) -> bytes:
    records = []
    for prefix, table in (("", store.params), ("adam_m/", store.m), ("adam_v/", store.v)):
        for name, t in table.items():
            records.append((prefix + name, t.detach()))
    buf = io.BytesIO()
    buf.write(
        _CKPT_HEADER.pack(
            CKPT_MAGIC,
            CKPT_VERSION,
            config.d,
            config.heads,
            config.depth,
            config.n_bands,
            config.horizon,
            config.n_actions,
            config.ffn,
            store.step,
            len(records),
        )
    )
    for name, t in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.to(torch.float32).numpy().astype("<f4").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> tuple[ParamStore, ModelConfig]:
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    fields = _CKPT_HEADER.unpack_from(data, 0)
    if fields[1] != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {fields[1]}", offset=4)
    config = ModelConfig(*fields[2:9])
    step, n_records = fields[9], fields[10]
    store = ParamStore(dtype=torch.float32)
    store.step = step
    off = _CKPT_HEADER.size

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise FormatError("truncated checkpoint record", offset=off)
        chunk = data[off : off + n]
        off += n
        return chunk

    for _ in range(n_records):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        t = torch.from_numpy(values.copy())
        if name.startswith("adam_m/"):
            store.m[name[7:]] = t
        elif name.startswith("adam_v/"):
            store.v[name[7:]] = t
        else:
            store.params[name] = t.requires_grad_(True)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint records", offset=off)
    for name, p in store.params.items():
        store.m.setdefault(name, torch.zeros_like(p, requires_grad=False))
        store.v.setdefault(name, torch.zeros_like(p, requires_grad=False))
    return store, config
