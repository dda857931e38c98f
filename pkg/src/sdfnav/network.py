"""Local map network: a frozen Fourier feature layer shared by two small
residual MLP heads (signed distance and confidence).

Gradients are written out by hand. The Eikonal term needs the input gradient
of the SDF head inside the loss, so the SDF head is evaluated with forward-mode
tangents (one per input dimension) and the reverse pass runs back through both
the primal and the tangent computation.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

HEADS = ("s", "c")
LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")
TRAINABLE = tuple(f"{h}_{n}" for h in HEADS for n in LAYERS)
ACTIVATION = {"s": "tanhshrink", "c": "tanh"}
CONF_FLOOR = 1e-7

MAGIC = b"SDFNET\x00\x01"
VERSION = 1


class DivergenceError(FloatingPointError):
    """Raised when a forward pass or loss stops being finite."""


@dataclass
class NetParams:
    B: np.ndarray
    center: np.ndarray
    scale: float
    weights: dict

    @property
    def dim(self):
        return self.B.shape[1]

    @property
    def n_freq(self):
        return self.B.shape[0]

    @property
    def hidden(self):
        return self.weights["s_W1"].shape[0]

    @property
    def dtype(self):
        return self.weights["s_W1"].dtype

    def astype(self, dtype):
        return NetParams(self.B.astype(dtype), self.center.astype(dtype), self.scale,
                         {k: v.astype(dtype) for k, v in self.weights.items()})

    def copy(self):
        return NetParams(self.B.copy(), self.center.copy(), self.scale,
                         {k: v.copy() for k, v in self.weights.items()})

    def flat(self):
        """Trainable parameters concatenated in TRAINABLE order."""
        return np.concatenate([self.weights[k].ravel() for k in TRAINABLE])

    def n_trainable(self):
        return sum(self.weights[k].size for k in TRAINABLE)


def init_params(seed, dim, n_freq=64, hidden=128, sigma_b=0.8, bounds=None, dtype=np.float32):
    """Gaussian Fourier matrix plus PyTorch-default Kaiming-uniform heads."""
    rng = np.random.default_rng(seed)
    if bounds is None:
        center, scale = np.zeros(dim), 1.0
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        center, scale = 0.5 * (lo + hi), float(0.5 * np.max(hi - lo))
    B = rng.normal(0.0, sigma_b, size=(n_freq, dim))
    shapes = {"W1": (hidden, 2 * n_freq), "W2": (hidden, hidden), "W3": (1, hidden)}
    weights = {}
    for head in HEADS:
        for layer in ("1", "2", "3"):
            fan_out, fan_in = shapes["W" + layer]
            bound = 1.0 / np.sqrt(fan_in)
            weights[f"{head}_W{layer}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            weights[f"{head}_b{layer}"] = rng.uniform(-bound, bound, size=fan_out)
    # scale is kept at float32 precision so checkpoints round-trip exactly
    return NetParams(B.astype(dtype), center.astype(dtype), float(np.float32(scale)),
                     {k: v.astype(dtype) for k, v in weights.items()})


def zero_like(params):
    out = params.copy()
    for v in out.weights.values():
        v[...] = 0
    return out


def _act(name, z):
    t = np.tanh(z)
    if name == "tanh":
        return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)
    return z - t, t * t, 2.0 * t * (1.0 - t * t)


def _normalize(params, p):
    p = np.asarray(p, dtype=params.dtype)
    if p.ndim == 1:
        p = p[None, :]
    return (p - params.center) / params.dtype.type(params.scale)


def fourier_encode(params, p, tangents=False):
    """[sin(2 pi B x); cos(2 pi B x)] on world-normalised coordinates ``x``.

    With ``tangents`` also returns d(features)/dp as a (D, N, 2F) array."""
    x = _normalize(params, p)
    two_pi = params.dtype.type(2 * np.pi)
    phi = two_pi * (x @ params.B.T)
    sin, cos = np.sin(phi), np.cos(phi)
    gamma = np.concatenate([sin, cos], axis=1)
    if not tangents:
        return gamma
    dphi = two_pi * params.B.T / params.dtype.type(params.scale)  # (D, F)
    dgamma = np.concatenate([cos[None] * dphi[:, None, :], -sin[None] * dphi[:, None, :]], axis=2)
    return gamma, dgamma


def _head_forward(params, head, gamma, dgamma=None):
    w = params.weights
    W1, b1, W2, b2, W3, b3 = (w[f"{head}_{n}"] for n in LAYERS)
    act = ACTIVATION[head]
    z1 = gamma @ W1.T + b1
    a1, s1, q1 = _act(act, z1)
    z2 = a1 @ W2.T + b2
    h2, s2, q2 = _act(act, z2)
    a2 = h2 + a1
    out = (a2 @ W3.T)[:, 0] + b3[0]
    cache = {"gamma": gamma, "a1": a1, "s1": s1, "q1": q1, "a2": a2, "s2": s2, "q2": q2}
    if dgamma is None:
        return out, None, cache
    D, N, _ = dgamma.shape
    H = W1.shape[0]
    # stacked matmuls are flattened to 2D so they go through BLAS
    dz1 = (dgamma.reshape(D * N, -1) @ W1.T).reshape(D, N, H)
    da1 = s1 * dz1
    dz2 = (da1.reshape(D * N, H) @ W2.T).reshape(D, N, H)
    da2 = s2 * dz2 + da1
    dout = (da2.reshape(D * N, H) @ W3[0]).reshape(D, N).T  # (N, D)
    cache.update(dgamma=dgamma, dz1=dz1, da1=da1, dz2=dz2, da2=da2)
    return out, dout, cache


def _head_backward(params, head, cache, bar_out, bar_dout=None):
    """Reverse pass of one head. ``bar_dout`` is the (N, D) cotangent of the
    input gradient; when given, the tangent computation is differentiated too."""
    w = params.weights
    W2, W3 = w[f"{head}_W2"], w[f"{head}_W3"]
    a1, s1, q1, a2, s2, q2 = (cache[k] for k in ("a1", "s1", "q1", "a2", "s2", "q2"))
    g = {}
    g["W3"] = bar_out[None, :] @ a2
    g["b3"] = np.array([bar_out.sum()], dtype=bar_out.dtype)
    bar_a2 = bar_out[:, None] * W3[0]
    bar_z2 = s2 * bar_a2
    bar_a1 = bar_a2.copy()
    if bar_dout is not None:
        dz1, da1, dz2, da2 = (cache[k] for k in ("dz1", "da1", "dz2", "da2"))
        D, N, H = da2.shape
        G = bar_dout.T  # (D, N)
        g["W3"] = g["W3"] + (G.reshape(-1) @ da2.reshape(D * N, H))[None, :]
        bar_da2 = G[..., None] * W3[0]
        bar_dz2 = s2 * bar_da2
        bar_z2 = bar_z2 + q2 * (bar_da2 * dz2).sum(axis=0)
        bar_da1 = bar_da2 + (bar_dz2.reshape(D * N, H) @ W2).reshape(D, N, H)
        gW2 = bar_dz2.reshape(D * N, H).T @ da1.reshape(D * N, H)
    g["W2"] = bar_z2.T @ a1
    g["b2"] = bar_z2.sum(axis=0)
    bar_a1 = bar_a1 + bar_z2 @ W2
    bar_z1 = s1 * bar_a1
    gamma = cache["gamma"]
    if bar_dout is not None:
        g["W2"] = g["W2"] + gW2
        bar_dz1 = s1 * bar_da1
        bar_z1 = bar_z1 + q1 * (bar_da1 * dz1).sum(axis=0)
        dgamma = cache["dgamma"]
        g["W1"] = bar_dz1.reshape(D * N, H).T @ dgamma.reshape(D * N, -1) + bar_z1.T @ gamma
    else:
        g["W1"] = bar_z1.T @ gamma
    g["b1"] = bar_z1.sum(axis=0)
    return {f"{head}_{k}": v for k, v in g.items()}


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite network output")


def forward_raw(params, p):
    """Signed distance and unclamped confidence output."""
    gamma = fourier_encode(params, p)
    s, _, _ = _head_forward(params, "s", gamma)
    c, _, _ = _head_forward(params, "c", gamma)
    _check_finite(s, c)
    return s, c


def forward(params, p):
    """(s_hat, c_hat) with the confidence clamped to [1e-7, 1]."""
    s, c = forward_raw(params, p)
    return s, np.clip(c, CONF_FLOOR, 1.0)


def forward_with_input_grad(params, p):
    """(s_hat, d s_hat / dp) by forward-mode tangents."""
    gamma, dgamma = fourier_encode(params, p, tangents=True)
    s, ds, _ = _head_forward(params, "s", gamma, dgamma)
    _check_finite(s, ds)
    return s, ds


def forward_all_with_input_grad(params, p):
    """(s, ds/dp, c, dc/dp) with the clamped confidence; the gradient of the
    confidence is zero where the clamp is active."""
    gamma, dgamma = fourier_encode(params, p, tangents=True)
    s, ds, _ = _head_forward(params, "s", gamma, dgamma)
    c, dc, _ = _head_forward(params, "c", gamma, dgamma)
    _check_finite(s, ds, c, dc)
    clamped = (c < CONF_FLOOR) | (c > 1.0)
    dc = np.where(clamped[:, None], 0.0, dc).astype(c.dtype)
    return s, ds, np.clip(c, CONF_FLOOR, 1.0), dc


@dataclass
class LossWeights:
    sdf: float = 1e4
    conf: float = 1e4
    eikonal: float = 1.0
    lipschitz: float = 1e-3
    delta: float = 1.0


@dataclass
class Batch:
    p: np.ndarray
    s: np.ndarray
    c: np.ndarray
    has_sdf: np.ndarray = None

    def __post_init__(self):
        if self.has_sdf is None:
            self.has_sdf = np.ones(len(self.p), dtype=bool)

    def __len__(self):
        return len(self.p)


def huber(r, delta=1.0):
    a = np.abs(r)
    return np.where(a < delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r, delta=1.0):
    return np.where(np.abs(r) < delta, r, delta * np.sign(r))


def loss_and_param_grads(params, batch, weights=None):
    """Mean per-sample loss over the batch, its parameter gradients and the
    per-term breakdown (unweighted term values)."""
    weights = LossWeights() if weights is None else weights
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    dt = params.dtype.type
    gamma, dgamma = fourier_encode(params, batch.p, tangents=True)
    s_hat, ds, cache_s = _head_forward(params, "s", gamma, dgamma)
    c_hat, _, cache_c = _head_forward(params, "c", gamma)

    mask = batch.has_sdf.astype(params.dtype)
    rs = s_hat - batch.s.astype(params.dtype)
    rc = c_hat - batch.c.astype(params.dtype)
    l_hs = float((huber(rs, weights.delta) * mask).sum() / n)
    l_hc = float(huber(rc, weights.delta).sum() / n)
    gnorm = np.sqrt((ds * ds).sum(axis=1))
    l_e = float(((gnorm - 1.0) ** 2).sum() / n)
    flat = params.flat()
    imax = int(np.argmax(np.abs(flat)))  # argmax picks the lowest index on ties
    l_r = float(abs(flat[imax]))
    total = weights.sdf * l_hs + weights.conf * l_hc + weights.eikonal * l_e + weights.lipschitz * l_r
    if not np.isfinite(total):
        raise DivergenceError("non-finite loss")

    bar_s = (dt(weights.sdf / n) * huber_grad(rs, weights.delta) * mask).astype(params.dtype)
    bar_c = (dt(weights.conf / n) * huber_grad(rc, weights.delta)).astype(params.dtype)
    safe = np.where(gnorm > 0, gnorm, 1.0)
    coef = np.where(gnorm > 0, 2.0 * (gnorm - 1.0) / safe, 0.0)
    bar_ds = (dt(weights.eikonal / n) * coef[:, None] * ds).astype(params.dtype)

    grads = _head_backward(params, "s", cache_s, bar_s, bar_ds)
    grads.update(_head_backward(params, "c", cache_c, bar_c))
    # subgradient of the max-norm lands on a single coordinate
    offset = 0
    for k in TRAINABLE:
        size = params.weights[k].size
        if offset <= imax < offset + size:
            g = grads[k].reshape(-1)
            g[imax - offset] += dt(weights.lipschitz) * np.sign(flat[imax])
            break
        offset += size
    grads = {k: np.asarray(v, dtype=params.dtype).reshape(params.weights[k].shape) for k, v in grads.items()}
    breakdown = {"total": total, "sdf": l_hs, "conf": l_hc, "eikonal": l_e, "lipschitz": l_r}
    return total, grads, breakdown


@dataclass
class OptState:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    vhat: dict = field(default_factory=dict)


def amsgrad_step(opt, params, grads):
    """AMSGrad with decoupled weight decay; updates ``params`` and ``opt`` in place."""
    if set(grads) != set(TRAINABLE):
        raise ValueError("gradient keys do not match parameters")
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for k in TRAINABLE:
        p, g = params.weights[k], grads[k]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        if k not in opt.m:
            opt.m[k] = np.zeros_like(p)
            opt.v[k] = np.zeros_like(p)
            opt.vhat[k] = np.zeros_like(p)
        m, v, vhat = opt.m[k], opt.v[k], opt.vhat[k]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        np.maximum(vhat, v, out=vhat)
        if opt.weight_decay:
            p *= 1 - opt.lr * opt.weight_decay
        p -= (opt.lr / bc1) * m / (np.sqrt(vhat / bc2) + opt.eps)
    return params


# Checkpoint layout (little-endian):
#   8 bytes magic, u32 version, u32 D, u32 F, u32 H,
#   then float32 arrays: B (F*D), center (D), scale (1), and for head s then c:
#   W1 (H*2F), b1 (H), W2 (H*H), b2 (H), W3 (H), b3 (1), all row-major.
def _ordered_arrays(params):
    yield params.B
    yield params.center
    yield np.array([params.scale])
    for k in TRAINABLE:
        yield params.weights[k]


def checkpoint_bytes(params):
    D, F, H = params.dim, params.n_freq, params.hidden
    parts = [MAGIC, struct.pack("<4I", VERSION, D, F, H)]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _ordered_arrays(params)]
    return b"".join(parts)


def params_from_bytes(data):
    if data[:8] != MAGIC:
        raise ValueError("bad checkpoint magic")
    if len(data) < 24:
        raise ValueError("truncated checkpoint header")
    version, D, F, H = struct.unpack("<4I", data[8:24])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [("B", (F, D)), ("center", (D,)), ("scale", (1,))]
    for head in HEADS:
        shapes += [(f"{head}_W1", (H, 2 * F)), (f"{head}_b1", (H,)), (f"{head}_W2", (H, H)),
                   (f"{head}_b2", (H,)), (f"{head}_W3", (1, H)), (f"{head}_b3", (1,))]
    need = 24 + 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != need:
        raise ValueError(f"checkpoint size {len(data)} != expected {need}")
    arrays, off = {}, 24
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    weights = {k: arrays[k] for k in TRAINABLE}
    return NetParams(arrays["B"], arrays["center"], float(arrays["scale"][0]), weights)


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
