"""Toy transformer encoder with a gated-sum keypoint head, in numpy with manual backprop.

Pipeline for a batch of grayscale images ``(B, H, W)``:

* patchify into ``P`` non-overlapping ``patch x patch`` tiles, embed linearly to
  ``d`` and add a fixed 2D sinusoidal positional encoding;
* ``N`` pre-norm encoder layers (multi-head self-attention + GELU feed-forward,
  both residual);
* per layer: token mean (``ir``), a per-layer linear map to ``2K`` values
  (``cr``); softmax gate from the last layer's ``ir``; gated sum of the
  ``cr`` vectors; ReLU.

Parameters live in an ordered ``dict`` of float64 arrays keyed by name
(``patch_embed.w``, ``layer1.attn.q.w``, ``cr_proj.1.w``, ``gate_proj.w`` ...).
Linear weights are stored ``(out, in)``.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "dronepose-encoder/1"
GELU_C = math.sqrt(2.0 / math.pi)


class StaleTraceError(RuntimeError):
    pass


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"non-finite activation in encoder layer {layer}")


@dataclass(frozen=True)
class HyperParams:
    image_height: int = 64
    image_width: int = 64
    patch: int = 8
    d: int = 64
    heads: int = 4
    layers: int = 6
    keypoints: int = 4
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            raise ValueError("d must be divisible by 4 for the 2D positional encoding")
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ValueError("patch size must divide the image size")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")

    @property
    def grid(self):
        return self.image_height // self.patch, self.image_width // self.patch

    @property
    def num_tokens(self):
        gh, gw = self.grid
        return gh * gw


@dataclass
class EncoderModel:
    hp: HyperParams
    params: OrderedDict
    version: int = 0

    def param_shapes(self):
        return {k: v.shape for k, v in self.params.items()}

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        return EncoderModel(self.hp, OrderedDict((k, v.copy()) for k, v in self.params.items()), self.version)


def param_layout(hp):
    """Ordered (name, shape) list of every trainable array."""
    d, f, K2 = hp.d, hp.ffn_mult * hp.d, 2 * hp.keypoints
    out = [("patch_embed.w", (d, hp.patch * hp.patch)), ("patch_embed.b", (d,))]
    for l in range(1, hp.layers + 1):
        p = f"layer{l}."
        out += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,))]
        for m in "qkvo":
            out += [(p + f"attn.{m}.w", (d, d)), (p + f"attn.{m}.b", (d,))]
        out += [(p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
        out += [(p + "ffn.w1", (f, d)), (p + "ffn.b1", (f,)), (p + "ffn.w2", (d, f)), (p + "ffn.b2", (d,))]
    for l in range(1, hp.layers + 1):
        out += [(f"cr_proj.{l}.w", (K2, d)), (f"cr_proj.{l}.b", (K2,))]
    out += [("gate_proj.w", (hp.layers, d)), ("gate_proj.b", (hp.layers,))]
    return out


def init_model(hp, seed=0):
    """Xavier-uniform weights, unit layer-norm gains, zero biases.

    The compact-representation biases start at the image centre instead of 0:
    with a ReLU output, coordinates whose pre-activation starts negative for
    every input never receive gradient.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    centre = np.tile([(hp.image_width - 1) / 2.0, (hp.image_height - 1) / 2.0], hp.keypoints)
    for name, shape in param_layout(hp):
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name.startswith("cr_proj."):
            params[name] = centre.copy()
        else:
            params[name] = np.zeros(shape)
    return EncoderModel(hp, params)


def positional_encoding(hp):
    """Fixed 2D sine/cosine table ``(P, d)``: first half encodes the row, second the column."""
    gh, gw = hp.grid
    quarter = hp.d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(gh, dtype=float), np.arange(gw, dtype=float), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    pe = np.concatenate(
        [
            np.sin(rows[:, None] * freqs), np.cos(rows[:, None] * freqs),
            np.sin(cols[:, None] * freqs), np.cos(cols[:, None] * freqs),
        ],
        axis=1,
    )
    return pe


def patchify(images, patch):
    """``(B, H, W) -> (B, P, patch*patch)``, patches in row-major order."""
    B, H, W = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch)


def _as_batch(images, hp):
    images = np.asarray(getattr(images, "pixels", images), dtype=float)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (hp.image_height, hp.image_width):
        raise ValueError(
            f"image size {images.shape[1:]} does not match model ({hp.image_height}, {hp.image_width})"
        )
    return images


def tokenize(img, model):
    """Token grid ``(P, d)`` for one image (or ``(B, P, d)`` for a batch)."""
    hp = model.hp
    single = np.ndim(getattr(img, "pixels", img)) == 2
    patches = patchify(_as_batch(img, hp), hp.patch)
    tokens = patches @ model.params["patch_embed.w"].T + model.params["patch_embed.b"] + positional_encoding(hp)
    return tokens[0] if single else tokens


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    th = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * GELU_C * (1.0 + 3 * 0.044715 * x**2)


def _ln_forward(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split(x, h):
    B, P, d = x.shape
    return x.reshape(B, P, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    B, h, P, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, P, h * dh)


def _layer_forward(x, prm, p, hp):
    a1, ln1 = _ln_forward(x, prm[p + "ln1.g"], prm[p + "ln1.b"], hp.ln_eps)
    q = _split(a1 @ prm[p + "attn.q.w"].T + prm[p + "attn.q.b"], hp.heads)
    k = _split(a1 @ prm[p + "attn.k.w"].T + prm[p + "attn.k.b"], hp.heads)
    v = _split(a1 @ prm[p + "attn.v.w"].T + prm[p + "attn.v.b"], hp.heads)
    scale = 1.0 / math.sqrt(hp.d // hp.heads)
    A = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    o = _merge(A @ v)
    x_mid = x + o @ prm[p + "attn.o.w"].T + prm[p + "attn.o.b"]
    a2, ln2 = _ln_forward(x_mid, prm[p + "ln2.g"], prm[p + "ln2.b"], hp.ln_eps)
    hpre = a2 @ prm[p + "ffn.w1"].T + prm[p + "ffn.b1"]
    hact = gelu(hpre)
    x_out = x_mid + hact @ prm[p + "ffn.w2"].T + prm[p + "ffn.b2"]
    cache = dict(a1=a1, ln1=ln1, q=q, k=k, v=v, A=A, o=o, a2=a2, ln2=ln2, hpre=hpre, hact=hact, scale=scale)
    return x_out, cache


def _linear_grads(grads, w_name, b_name, dy, x):
    grads[w_name] = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    grads[b_name] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def _layer_backward(dx_out, prm, p, hp, c, grads):
    # feed-forward block
    _linear_grads(grads, p + "ffn.w2", p + "ffn.b2", dx_out, c["hact"])
    dh = (dx_out @ prm[p + "ffn.w2"]) * gelu_grad(c["hpre"])
    _linear_grads(grads, p + "ffn.w1", p + "ffn.b1", dh, c["a2"])
    da2 = dh @ prm[p + "ffn.w1"]
    dx, dg, db = _ln_backward(da2, prm[p + "ln2.g"], c["ln2"])
    grads[p + "ln2.g"], grads[p + "ln2.b"] = dg, db
    dx_mid = dx_out + dx
    # attention block
    _linear_grads(grads, p + "attn.o.w", p + "attn.o.b", dx_mid, c["o"])
    do = _split(dx_mid @ prm[p + "attn.o.w"], hp.heads)
    A, q, k, v = c["A"], c["q"], c["k"], c["v"]
    dA = do @ v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ do
    ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c["scale"]
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    da1 = 0
    for m, dm in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge(dm)
        _linear_grads(grads, p + f"attn.{m}.w", p + f"attn.{m}.b", dm, c["a1"])
        da1 = da1 + dm @ prm[p + f"attn.{m}.w"]
    dx, dg, db = _ln_backward(da1, prm[p + "ln1.g"], c["ln1"])
    grads[p + "ln1.g"], grads[p + "ln1.b"] = dg, db
    return dx_mid + dx


def _encode(tokens, model):
    outputs, caches = [], []
    x = tokens
    for l in range(1, model.hp.layers + 1):
        x, cache = _layer_forward(x, model.params, f"layer{l}.", model.hp)
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivationError(l)
        outputs.append(x)
        caches.append(cache)
    return outputs, caches


def encoder_forward(tokens, model):
    """Outputs of all ``N`` encoder layers for a ``(P, d)`` or ``(B, P, d)`` token grid."""
    tokens = np.asarray(tokens, dtype=float)
    single = tokens.ndim == 2
    outputs, _ = _encode(tokens[None] if single else tokens, model)
    return [o[0] for o in outputs] if single else outputs


@dataclass
class ForwardTrace:
    """Activations of one forward pass (batch-first).

    ``ir`` is ``(B, N, d)``, ``cr`` ``(B, N, 2K)``, ``gate`` ``(B, N)``,
    ``xg`` ``(B, 2K)`` and ``y`` ``(B, K, 2)`` in pixels.
    """

    enc_outputs: list
    ir: np.ndarray
    cr: np.ndarray
    gate: np.ndarray
    xg: np.ndarray
    y: np.ndarray
    version: int
    patches: np.ndarray | None = None
    caches: list | None = field(default=None, repr=False)

    @property
    def batch_size(self):
        return self.y.shape[0]


def _head(enc_outputs, model):
    prm, N, K = model.params, model.hp.layers, model.hp.keypoints
    ir = np.stack([x.mean(axis=1) for x in enc_outputs], axis=1)  # (B, N, d)
    cr = np.stack(
        [ir[:, l] @ prm[f"cr_proj.{l + 1}.w"].T + prm[f"cr_proj.{l + 1}.b"] for l in range(N)], axis=1
    )
    gate = _softmax(ir[:, -1] @ prm["gate_proj.w"].T + prm["gate_proj.b"])
    xg = np.einsum("bl,blj->bj", gate, cr)
    y = np.maximum(xg, 0.0).reshape(-1, K, 2)
    return ir, cr, gate, xg, y


def head_forward(enc_outputs, model):
    """Gated-sum head on precomputed encoder outputs (no encoder caches kept)."""
    enc = [np.asarray(x, dtype=float) for x in enc_outputs]
    if len(enc) != model.hp.layers:
        raise ValueError(f"expected {model.hp.layers} encoder outputs, got {len(enc)}")
    if enc[0].ndim == 2:
        enc = [x[None] for x in enc]
    ir, cr, gate, xg, y = _head(enc, model)
    return ForwardTrace(enc, ir, cr, gate, xg, y, model.version)


def forward(model, images):
    """Full forward pass; keeps every activation needed by :func:`backward`."""
    hp = model.hp
    patches = patchify(_as_batch(images, hp), hp.patch)
    tokens = patches @ model.params["patch_embed.w"].T + model.params["patch_embed.b"] + positional_encoding(hp)
    enc, caches = _encode(tokens, model)
    ir, cr, gate, xg, y = _head(enc, model)
    return ForwardTrace(enc, ir, cr, gate, xg, y, model.version, patches=patches, caches=caches)


def predict_keypoints(model, images, batch_size=32):
    images = _as_batch(images, model.hp)
    out = [forward(model, images[i : i + batch_size]).y for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.hp.keypoints, 2))


def backward(trace, model, loss_grad):
    """Gradients of every parameter given ``dL/dy`` of shape ``(B, K, 2)`` (or ``(K, 2)``)."""
    if trace.version != model.version:
        raise StaleTraceError("trace was produced before the last parameter update")
    prm, hp = model.params, model.hp
    N = hp.layers
    dy = np.asarray(loss_grad, dtype=float).reshape(trace.batch_size, -1)
    grads = {}
    dxg = dy * (trace.xg > 0)
    dcr = trace.gate[:, :, None] * dxg[:, None, :]  # (B, N, 2K)
    dgate = np.einsum("bj,blj->bl", dxg, trace.cr)
    dz = trace.gate * (dgate - (dgate * trace.gate).sum(axis=1, keepdims=True))
    grads["gate_proj.w"] = dz.T @ trace.ir[:, -1]
    grads["gate_proj.b"] = dz.sum(axis=0)
    dir_ = np.einsum("blj,ljd->bld", dcr, np.stack([prm[f"cr_proj.{l}.w"] for l in range(1, N + 1)]))
    dir_[:, -1] += dz @ prm["gate_proj.w"]
    for l in range(1, N + 1):
        grads[f"cr_proj.{l}.w"] = dcr[:, l - 1].T @ trace.ir[:, l - 1]
        grads[f"cr_proj.{l}.b"] = dcr[:, l - 1].sum(axis=0)
    if trace.caches is None:
        return grads
    P = trace.enc_outputs[0].shape[1]
    dx = np.zeros_like(trace.enc_outputs[-1])
    for l in range(N, 0, -1):
        dx = dx + dir_[:, l - 1][:, None, :] / P
        dx = _layer_backward(dx, prm, f"layer{l}.", hp, trace.caches[l - 1], grads)
    grads["patch_embed.w"] = np.einsum("bpi,bpj->ij", dx, trace.patches)
    grads["patch_embed.b"] = dx.reshape(-1, dx.shape[-1]).sum(axis=0)
    return OrderedDict((name, grads[name]) for name in prm)


def gate_weights(model, images, batch_size=32):
    images = _as_batch(images, model.hp)
    return np.concatenate(
        [forward(model, images[i : i + batch_size]).gate for i in range(0, len(images), batch_size)], axis=0
    )


def dump_gate_weights(model, images):
    """Mean gate weight per layer over a set of frames (length ``N``, sums to 1)."""
    images = _as_batch(images, model.hp)
    if len(images) == 0:
        raise ValueError("cannot average gate weights over an empty dataset")
    return gate_weights(model, images).mean(axis=0)


def gate_csv(weights):
    lines = ["layer,gate_weight"] + [f"{l},{w!r}" for l, w in enumerate(np.asarray(weights, dtype=float).tolist(), 1)]
    return "\n".join(lines) + "\n"


def save_model(model, path):
    payload = OrderedDict(
        format=CHECKPOINT_FORMAT,
        hyperparams=asdict(model.hp),
        params=OrderedDict(
            (k, OrderedDict(shape=list(v.shape), data=v.ravel().tolist())) for k, v in model.params.items()
        ),
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    hp = HyperParams(**payload["hyperparams"])
    params = OrderedDict()
    for name, shape in param_layout(hp):
        entry = payload["params"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        arr = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = arr
    return EncoderModel(hp, params)
