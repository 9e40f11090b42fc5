"""Pre-norm transformer blocks on top of :mod:`pointgac.diffcore.autograd`.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
(``"enc.0.wq"``), which is also how they are written to checkpoints.
"""
import numpy as np

from . import autograd as ag
from .autograd import Tensor


def xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def linear(x, params, name):
    return x @ params[name + ".w"] + params[name + ".b"]


def init_linear(params, rng, name, fan_in, fan_out):
    params[name + ".w"] = Tensor(xavier(rng, fan_in, fan_out), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_norm(params, name, dim):
    params[name + ".g"] = Tensor(np.ones(dim), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(dim), requires_grad=True)


def norm(x, params, name):
    return ag.layer_norm(x, params[name + ".g"], params[name + ".b"])


def init_block(params, rng, prefix, dim, mlp_ratio=4):
    init_norm(params, prefix + ".ln1", dim)
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, rng, f"{prefix}.{proj}", dim, dim)
    init_norm(params, prefix + ".ln2", dim)
    init_linear(params, rng, prefix + ".fc1", dim, mlp_ratio * dim)
    init_linear(params, rng, prefix + ".fc2", mlp_ratio * dim, dim)


def init_stack(params, rng, prefix, dim, depth, mlp_ratio=4):
    for i in range(depth):
        init_block(params, rng, f"{prefix}.{i}", dim, mlp_ratio)
    init_norm(params, prefix + ".norm", dim)
    return params


def multi_head_attention(x, params, prefix, heads, return_weights=False):
    """Scaled dot-product self-attention over the token axis of (..., L, D)."""
    *lead, L, D = x.shape
    if D % heads:
        raise ValueError(f"dim {D} not divisible by {heads} heads")
    hd = D // heads

    def split(t):
        # (..., L, D) -> (..., H, L, hd)
        t = t.reshape(*lead, L, heads, hd)
        nl = len(lead)
        axes = list(range(nl)) + [nl + 1, nl, nl + 2]
        return t.transpose(*axes)

    q = split(linear(x, params, prefix + ".wq"))
    k = split(linear(x, params, prefix + ".wk"))
    v = split(linear(x, params, prefix + ".wv"))
    nl = len(lead)
    kt = k.transpose(*(list(range(nl + 1)) + [nl + 2, nl + 1]))
    weights = ag.softmax((q @ kt) * (1.0 / np.sqrt(hd)), axis=-1)
    ctx = weights @ v
    ctx = ctx.transpose(*(list(range(nl)) + [nl + 1, nl, nl + 2])).reshape(*lead, L, D)
    out = linear(ctx, params, prefix + ".wo")
    if return_weights:
        return out, weights
    return out


def attention_block(x, params, prefix, heads):
    """One pre-norm block: x + MHA(LN(x)), then h + FFN(LN(h))."""
    h = x + multi_head_attention(norm(x, params, prefix + ".ln1"), params, prefix, heads)
    ff = linear(ag.silu(linear(norm(h, params, prefix + ".ln2"), params, prefix + ".fc1")),
                params, prefix + ".fc2")
    return h + ff


def stack_forward(x, params, prefix, depth, heads):
    for i in range(depth):
        x = attention_block(x, params, f"{prefix}.{i}", heads)
    return norm(x, params, prefix + ".norm")


def encoder_forward(tokens, params, depth, heads, prefix="enc"):
    return stack_forward(tokens, params, prefix, depth, heads)


def decoder_forward(tokens, params, depth, heads, prefix="dec"):
    return stack_forward(tokens, params, prefix, depth, heads)
