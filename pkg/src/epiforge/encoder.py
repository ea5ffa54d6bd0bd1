"""Compact patch-embedding transformer encoder with functional parameters.

Parameters live in a plain ``dict[str, torch.Tensor]`` (float64, no grad)
inside an immutable :class:`EncoderState`.  ``encode`` maps a batch of
``(128, 128, 3)`` image tensors to a ``(b, embed_dim)`` feature matrix by
patch embedding, pre-norm self-attention blocks, a final LayerNorm and mean
pooling over patch tokens.  Gradients come from reverse-mode autodiff on the
same forward pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
MAGIC = b"EPIF"
FORMAT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
INIT_STD = 0.02

Params = dict[str, torch.Tensor]


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


class WeightFormatError(ValueError):
    """A weight file is malformed, truncated or does not match a config."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    input_size: int = 128

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.patch_size, self.embed_dim, self.depth, self.heads) < 1 or self.mlp_ratio <= 0:
            raise ValueError(f"invalid encoder config {self}")

    @property
    def n_patches(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))


@dataclass(frozen=True)
class EncoderState:
    config: EncoderConfig
    parameters: Params
    optimizer_state: Params = field(default_factory=dict)
    step_count: int = 0
    metadata: dict = field(default_factory=dict)

    def with_fresh_optimizer(self) -> "EncoderState":
        return replace(self, optimizer_state={})


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.n_patches, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,),
            p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, h),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (h, d),
            p + "mlp.fc2.bias": (d,),
        })
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def init_encoder(config: EncoderConfig | None = None, seed: int = 0) -> EncoderState:
    """Truncated-normal (std 0.02, cut at two std) weights, unit LayerNorm gains, zero biases."""
    config = config or EncoderConfig()
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(("norm.weight", "norm1.weight", "norm2.weight")):
            t = torch.ones(shape, dtype=DTYPE)
        elif name.endswith("bias"):
            t = torch.zeros(shape, dtype=DTYPE)
        else:
            t = torch.empty(shape, dtype=DTYPE)
            torch.nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
        params[name] = t
    return EncoderState(config, params)


# ---------------------------------------------------------------------------
# forward


def as_batch(batch, config: EncoderConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch, dtype=DTYPE)
    s = config.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (s, s, 3):
        raise ValueError(f"expected a batch of shape (b, {s}, {s}, 3), got {tuple(x.shape)}")
    return x


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(b, H, W, C) -> (b, n_patches, patch*patch*C) in row-major patch order."""
    b, h, w, c = x.shape
    x = x.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def forward_features(params: Mapping[str, torch.Tensor], config: EncoderConfig, x: torch.Tensor) -> torch.Tensor:
    """Differentiable forward pass; ``x`` is a checked ``(b, S, S, 3)`` tensor."""
    d, nh = config.embed_dim, config.heads
    hd = d // nh
    tokens = patchify(x, config.patch_size) @ params["patch_embed.weight"] + params["patch_embed.bias"]
    tokens = tokens + params["pos_embed"]
    b, n, _ = tokens.shape
    for i in range(config.depth):
        p = f"blocks.{i}."
        y = F.layer_norm(tokens, (d,), params[p + "norm1.weight"], params[p + "norm1.bias"])
        qkv = (y @ params[p + "attn.qkv.weight"] + params[p + "attn.qkv.bias"]).reshape(b, n, 3, nh, hd)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        tokens = tokens + mixed @ params[p + "attn.proj.weight"] + params[p + "attn.proj.bias"]
        y = F.layer_norm(tokens, (d,), params[p + "norm2.weight"], params[p + "norm2.bias"])
        y = F.gelu(y @ params[p + "mlp.fc1.weight"] + params[p + "mlp.fc1.bias"])
        tokens = tokens + y @ params[p + "mlp.fc2.weight"] + params[p + "mlp.fc2.bias"]
    tokens = F.layer_norm(tokens, (d,), params["norm.weight"], params["norm.bias"])
    return tokens.mean(dim=1)


def encode(state: EncoderState, batch) -> torch.Tensor:
    """Feature matrix ``(b, embed_dim)`` for a batch of image tensors."""
    x = as_batch(batch, state.config)
    with torch.no_grad():
        return forward_features(state.parameters, state.config, x)


def encode_vjp(state: EncoderState, batch) -> tuple[torch.Tensor, Callable[[torch.Tensor], Params]]:
    """Features plus a pullback mapping an upstream feature gradient to parameter gradients.

    The pullback may be called once; it releases the recorded graph.
    """
    x = as_batch(batch, state.config)
    names = list(state.parameters)
    leaves = {k: v.detach().requires_grad_(True) for k, v in state.parameters.items()}
    with torch.enable_grad():
        feats = forward_features(leaves, state.config, x)

    def pullback(upstream: torch.Tensor) -> Params:
        upstream = torch.as_tensor(upstream, dtype=DTYPE)
        if upstream.shape != feats.shape:
            raise ValueError(f"upstream gradient shape {tuple(upstream.shape)} != features {tuple(feats.shape)}")
        grads = torch.autograd.grad(feats, [leaves[k] for k in names], grad_outputs=upstream, allow_unused=True)
        return {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}

    return feats.detach(), pullback


def backward(state: EncoderState, batch, upstream_gradient) -> Params:
    """Gradients of ``<encode(state, batch), upstream_gradient>`` w.r.t. every parameter."""
    _, pullback = encode_vjp(state, batch)
    return pullback(upstream_gradient)


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor]) -> None:
    if set(grads) != set(params):
        missing, extra = set(params) - set(grads), set(grads) - set(params)
        raise KeyError(f"gradient names do not match parameters (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {tuple(g.shape)}, expected {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")


def sgd_update(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], lr: float) -> Params:
    _check_grads(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


def adam_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    moments: Mapping[str, torch.Tensor],
    lr: float,
) -> tuple[Params, Params]:
    """One bias-corrected Adam step.

    ``moments`` holds ``adam.m.<name>``, ``adam.v.<name>`` and a scalar
    ``adam.t``; an empty mapping starts from zero moments.
    """
    _check_grads(params, grads)
    b1, b2 = ADAM_BETAS
    t = int(moments["adam.t"].item()) + 1 if "adam.t" in moments else 1
    new_params, new_moments = {}, {"adam.t": torch.tensor(float(t), dtype=DTYPE)}
    for k, p in params.items():
        g = grads[k]
        m = b1 * moments.get(f"adam.m.{k}", torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * moments.get(f"adam.v.{k}", torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = p - lr * m_hat / (torch.sqrt(v_hat) + ADAM_EPS)
        new_moments[f"adam.m.{k}"] = m
        new_moments[f"adam.v.{k}"] = v
    return new_params, new_moments


def _check_lr(lr: float) -> None:
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")


def sgd_step(state: EncoderState, gradients: Mapping[str, torch.Tensor], learning_rate: float) -> EncoderState:
    _check_lr(learning_rate)
    params = sgd_update(state.parameters, gradients, learning_rate)
    return replace(state, parameters=params, step_count=state.step_count + 1)


def adam_step(state: EncoderState, gradients: Mapping[str, torch.Tensor], learning_rate: float) -> EncoderState:
    _check_lr(learning_rate)
    adam_keys = {k: v for k, v in state.optimizer_state.items() if k.startswith("adam.")}
    params, moments = adam_update(state.parameters, gradients, adam_keys, learning_rate)
    other = {k: v for k, v in state.optimizer_state.items() if not k.startswith("adam.")}
    return replace(state, parameters=params, optimizer_state={**other, **moments}, step_count=state.step_count + 1)


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(
    state: EncoderState,
    batch,
    upstream=None,
    eps: float = 1e-4,
    samples_per_tensor: int = 12,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error per parameter between autodiff and central differences.

    Each tensor is probed at ``samples_per_tensor`` random coordinates plus
    one random direction over the whole tensor.  Relative error is
    ``|a - n| / max(|a| + |n|, 1e-10)``.
    """
    rng = np.random.default_rng(seed)
    x = as_batch(batch, state.config)
    feats = encode(state, x)
    up = torch.as_tensor(rng.standard_normal(tuple(feats.shape)) if upstream is None else upstream, dtype=DTYPE)
    grads = backward(state, x, up)

    def objective(params: Params) -> float:
        with torch.no_grad():
            return float((forward_features(params, state.config, x) * up).sum())

    def relerr(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a) + abs(n), 1e-10)

    report = {}
    for name, p in state.parameters.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()), replace=False)
        worst = 0.0
        for j in idx:
            plus, minus = flat.clone(), flat.clone()
            plus[j] += eps
            minus[j] -= eps
            num = (objective({**state.parameters, name: plus.reshape(p.shape)})
                   - objective({**state.parameters, name: minus.reshape(p.shape)})) / (2 * eps)
            worst = max(worst, relerr(float(grads[name].reshape(-1)[j]), num))
        direction = torch.as_tensor(rng.standard_normal(tuple(p.shape)), dtype=DTYPE)
        num = (objective({**state.parameters, name: p + eps * direction})
               - objective({**state.parameters, name: p - eps * direction})) / (2 * eps)
        worst = max(worst, relerr(float((grads[name] * direction).sum()), num))
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# weight files
#
# layout: b"EPIF" | u32 version | u32 record count |
#   per record: u32 name length | utf-8 name | u32 rank | u64 dims... | f64 LE data
#   | u64 json length | json {config, step_count, metadata}
# record names are prefixed "param:" or "optim:".


def save_weights(state: EncoderState, path: str | Path) -> Path:
    path = Path(path)
    records = [("param:" + k, v) for k, v in state.parameters.items()]
    records += [("optim:" + k, v) for k, v in state.optimizer_state.items()]
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for name, tensor in records:
        raw = name.encode("utf-8")
        arr = np.asarray(tensor.detach().cpu().numpy(), dtype="<f8", order="C")  # keeps 0-d scalars 0-d
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    blob = json.dumps(
        {"config": asdict(state.config), "step_count": state.step_count, "metadata": state.metadata},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    chunks.append(struct.pack("<Q", len(blob)) + blob)
    data = b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"truncated weight file at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: str | Path, config: EncoderConfig | None = None) -> EncoderState:
    """Read a weight file; with ``config`` given, parameter shapes must match it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not an EPIF weight file")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    params, optim = {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"{path}: corrupt record name") from exc
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        tensor = torch.from_numpy(arr.astype(np.float64))
        kind, _, key = name.partition(":")
        if kind == "param":
            params[key] = tensor
        elif kind == "optim":
            optim[key] = tensor
        else:
            raise WeightFormatError(f"{path}: unknown record kind in {name!r}")
    (blob_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
        stored = EncoderConfig(**meta["config"])
        step_count = int(meta["step_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"{path}: corrupt trailing metadata: {exc}") from exc
    if r.pos != len(r.data):
        raise WeightFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after metadata")
    target = config or stored
    expected = parameter_shapes(target)
    for name, shape in expected.items():
        got = tuple(params[name].shape) if name in params else None
        if got != shape:
            raise WeightFormatError(f"tensor {name!r}: expected shape {shape}, file has {got}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise WeightFormatError(f"tensor {extra[0]!r} in file is not part of the config")
    ordered = {k: params[k] for k in expected}
    return EncoderState(target, ordered, optim, step_count, meta.get("metadata", {}))


def states_equal(a: EncoderState, b: EncoderState) -> bool:
    """Bit-exact equality of config, parameters, optimizer state and step count."""
    def same(x: Params, y: Params) -> bool:
        return list(x) == list(y) and all(torch.equal(x[k], y[k]) for k in x)

    return (
        a.config == b.config
        and a.step_count == b.step_count
        and same(a.parameters, b.parameters)
        and same(a.optimizer_state, b.optimizer_state)
    )
