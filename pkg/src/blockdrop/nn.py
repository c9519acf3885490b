"""Pre-norm transformer blocks, the droppable block stack, and LoRA adapters."""

from __future__ import annotations

import copy
import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .exceptions import BlockLookupError, ContractError, DimensionError
from .tensor import Tensor

ACTIVATIONS = ("gelu", "relu")
LORA_TARGETS = ("q", "k", "v", "o")


class Module:
    """Minimal parameter container; every ``Tensor`` attribute is a parameter."""

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            yield from _walk(value, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self, trainable_only=False):
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        return self


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, scale=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, width):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class LoraAdapter(Module):
    """Low-rank update ``scale * down @ up`` on one attention projection.

    ``up`` starts at zero so a fresh adapter does not change the output.
    With ``alpha == rank`` the effective scale is 1.
    """

    def __init__(self, width, rank, target, alpha=None, rng=None):
        if target not in LORA_TARGETS:
            raise ValueError(f"unknown LoRA target {target!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rank = int(rank)
        self.alpha = float(rank if alpha is None else alpha)
        self.target = target
        self.down = Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, rank)),
                           requires_grad=True)
        self.up = Tensor(np.zeros((rank, width)), requires_grad=True)

    @property
    def scale(self):
        return self.alpha / self.rank

    def __call__(self, x):
        return (x @ self.down) @ self.up * self.scale

    def delta(self):
        return self.scale * (self.down.data @ self.up.data)


class TransformerBlock(Module):
    """Pre-norm block: ``x + Attn(LN(x))`` then ``+ FFN(LN(.))``."""

    def __init__(self, width, heads, hidden=None, activation="gelu", rng=None, residual_scale=1.0):
        if width % heads:
            raise ValueError("width must be divisible by heads")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = 4 * width if hidden is None else hidden
        self.heads = heads
        self.activation = activation
        self.ln1 = LayerNorm(width)
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.o = Linear(width, width, rng, scale=residual_scale)
        self.ln2 = LayerNorm(width)
        self.ffn_in = Linear(width, hidden, rng)
        self.ffn_out = Linear(hidden, width, rng, scale=residual_scale)
        self.adapters = {}

    @property
    def width(self):
        return self.q.weight.shape[0]

    @property
    def hidden(self):
        return self.ffn_in.weight.shape[1]

    def _project(self, name, h):
        out = getattr(self, name)(h)
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = out + adapter(h)
        return out

    def __call__(self, x, observer=None):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        n, t, d = x.shape
        if d != self.width:
            raise DimensionError(f"block width {self.width} != input width {d}")
        hd = d // self.heads

        h = self.ln1(x)
        q, k, v = (self._project(p, h).reshape(n, t, self.heads, hd).transpose(0, 2, 1, 3)
                   for p in ("q", "k", "v"))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
        mixed = (T.softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        x = x + self._project("o", mixed)

        a = self.ffn_in(self.ln2(x))
        a = T.relu(a) if self.activation == "relu" else T.gelu(a)
        if observer is not None:
            observer(a)
        x = x + self.ffn_out(a)
        return x.reshape(x.shape[1:]) if squeeze else x


class BlockStack(Module):
    """Embedding, an ordered list of droppable blocks, and an output projection.

    ``tags`` holds each surviving block's index in the original stack.
    """

    def __init__(self, d_in, width, depth, heads, max_len, activation="gelu", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embed = Linear(d_in, width, rng)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_len, width)), requires_grad=True)
        # residual branches start small so deep stacks train stably
        res = 1.0 / math.sqrt(2.0 * depth)
        self.blocks = [TransformerBlock(width, heads, activation=activation, rng=rng, residual_scale=res)
                       for _ in range(depth)]
        self.tags = list(range(depth))
        self.unembed = Linear(width, width, rng)

    def named_parameters(self, prefix=""):
        yield from _walk(self.embed, prefix + "embed")
        yield prefix + "pos", self.pos
        for tag, block in zip(self.tags, self.blocks):
            yield from block.named_parameters(f"{prefix}block{tag}.")
        yield from _walk(self.unembed, prefix + "unembed")

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def width(self):
        return self.pos.shape[1]

    def __call__(self, x, trace=None, observer=None):
        h = self.embed(x) + self.pos[: x.shape[-2]]
        for tag, block in zip(self.tags, self.blocks):
            h = block(h, observer=observer)
            if trace is not None:
                trace[tag] = h
        return self.unembed(h)

    def index_of(self, tag):
        try:
            return self.tags.index(tag)
        except ValueError:
            raise BlockLookupError(f"block {tag} is not in the stack (tags={self.tags})") from None


def block_forward(block, x, adapters=None, trace=None, tag=None):
    """Run one block, optionally with explicit adapters, recording its output."""
    saved = block.adapters
    if adapters is not None:
        block.adapters = dict(adapters)
    try:
        out = block(x)
    finally:
        block.adapters = saved
    if trace is not None:
        trace[tag] = out
    return out


def _backbone(model):
    return model if isinstance(model, BlockStack) else model.backbone


def _with_backbone(model, stack):
    if isinstance(model, BlockStack):
        return stack
    clone = copy.copy(model)
    clone.backbone = stack
    return clone


def drop_block(model, original_index):
    """Return a model without block ``original_index``; other blocks are shared, not copied."""
    stack = _backbone(model)
    pos = stack.index_of(original_index)
    if stack.depth < 2:
        raise ContractError("cannot drop the last remaining block")
    new = copy.copy(stack)
    new.blocks = stack.blocks[:pos] + stack.blocks[pos + 1:]
    new.tags = stack.tags[:pos] + stack.tags[pos + 1:]
    return _with_backbone(model, new)


def lora_rank(width, rank_ratio):
    if not 0 < rank_ratio <= 1:
        raise ValueError("rank_ratio must lie in (0, 1]")
    return max(1, int(round(width * rank_ratio)))


def insert_lora(model, rank_ratio=0.25, targets=LORA_TARGETS, rng=None):
    """Attach fresh adapters to every backbone block (in place) and freeze the backbone.

    Only adapter parameters remain trainable inside the backbone; the head's
    flags are left to the caller.
    """
    if not targets:
        raise ValueError("targets must be non-empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    stack = _backbone(model)
    stack.set_trainable(False)
    r = lora_rank(stack.width, rank_ratio)
    for block in stack.blocks:
        block.adapters = {t: LoraAdapter(block.width, r, t, rng=rng) for t in targets}
    return model


def merge_lora(model):
    """Fold every adapter into its projection weight (in place) and drop the adapters."""
    stack = _backbone(model)
    if not any(b.adapters for b in stack.blocks):
        raise ContractError("model has no adapters to merge")
    for block in stack.blocks:
        for name, adapter in block.adapters.items():
            proj = getattr(block, name)
            proj.weight = Tensor(proj.weight.data + adapter.delta(), requires_grad=True)
        block.adapters = {}
    stack.set_trainable(True)
    return model


def adapter_parameter_count(model):
    return sum(a.down.size + a.up.size
               for b in _backbone(model).blocks for a in b.adapters.values())


def near_identity_block(width, heads, rng, scale=1e-3, activation="gelu"):
    """A block whose residual branches are scaled down so that ``out ~= in``."""
    block = TransformerBlock(width, heads, activation=activation, rng=rng)
    for lin in (block.o, block.ffn_out):
        lin.weight.data *= scale
        lin.bias.data[:] = 0.0
    return block


def plant_identity_blocks(model, positions, rng=None, scale=1e-3):
    """Insert near-identity blocks at ``positions`` of the final stack and renumber tags."""
    rng = rng if rng is not None else np.random.default_rng(0)
    stack = _backbone(model)
    blocks = list(stack.blocks)
    act = blocks[0].activation if blocks else "gelu"
    heads = blocks[0].heads if blocks else 1
    for pos in sorted(positions):
        if not 0 <= pos <= len(blocks):
            raise ValueError(f"cannot plant at position {pos}")
        blocks.insert(pos, near_identity_block(stack.width, heads, rng, scale, act))
    stack.blocks = blocks
    stack.tags = list(range(len(blocks)))
    return model
