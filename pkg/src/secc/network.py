"""Student/teacher networks with hand-written backward passes.

Layout of the student:

    x -> [FC+ReLU]* -> reshape (H, H, D0) feature map
      -> spatial mean -> linear -> pooled (M)
      -> classifier logits (N) -> softmax                 P_cls
      -> cosine softmax against rows of W (K x M)        P_clu
    feature map -> 3x3 same conv (D1 filters) -> spatial mean   G
    [G, P_cls, P_clu]            -> 3 FC layers   -> global MI score
    [map_i, P_cls, P_clu] per i  -> 3 1x1 convs   -> local MI score map

The teacher holds only the backbone, pooling and classifier tensors.
Every batched function takes arrays with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import ValidationError

TEACHER_PREFIXES = ("backbone.", "pool.", "cls.")


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    N: int
    K: int
    hidden_widths: tuple = (64, 64)
    H: int = 2
    D0: int = 16
    M: int = 32
    D1: int = 16
    disc_hidden: int = 32

    def validate(self):
        for name in ("input_dim", "N", "K", "H", "D0", "M", "D1", "disc_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not self.hidden_widths:
            raise ValidationError("hidden_widths must be nonempty")
        if self.hidden_widths[-1] != self.H * self.H * self.D0:
            raise ValidationError(
                f"last hidden width {self.hidden_widths[-1]} must equal H*H*D0 = {self.H * self.H * self.D0}")

    def shapes(self) -> dict:
        s = {}
        widths = (self.input_dim,) + tuple(self.hidden_widths)
        for i in range(len(self.hidden_widths)):
            s[f"backbone.{i}.W"] = (widths[i], widths[i + 1])
            s[f"backbone.{i}.b"] = (widths[i + 1],)
        s["pool.W"] = (self.D0, self.M)
        s["pool.b"] = (self.M,)
        s["cls.W"] = (self.M, self.N)
        s["cls.b"] = (self.N,)
        s["clu.W"] = (self.K, self.M)
        s["mienc.W"] = (3, 3, self.D0, self.D1)
        s["mienc.b"] = (self.D1,)
        for prefix, d_in in (("gdisc", self.D1 + self.N + self.K), ("ldisc", self.D0 + self.N + self.K)):
            dims = (d_in, self.disc_hidden, self.disc_hidden, 1)
            for i in range(3):
                s[f"{prefix}.{i}.W"] = (dims[i], dims[i + 1])
                s[f"{prefix}.{i}.b"] = (dims[i + 1],)
        return s


@dataclass
class Params:
    spec: BackboneSpec
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def copy(self):
        return type(self)(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


class StudentParams(Params):
    pass


class TeacherParams(Params):
    pass


def _glorot(rng, shape):
    if len(shape) == 4:  # conv kernel (kh, kw, c_in, c_out)
        fan_in = shape[0] * shape[1] * shape[2]
        fan_out = shape[0] * shape[1] * shape[3]
    else:
        fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_student(spec: BackboneSpec, seed: int) -> StudentParams:
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.shapes().items():
        tensors[name] = np.zeros(shape) if name.endswith(".b") else _glorot(rng, shape)
    return StudentParams(spec, tensors)


def teacher_from_student(student: StudentParams) -> TeacherParams:
    t = {k: v.copy() for k, v in student.items() if k.startswith(TEACHER_PREFIXES)}
    return TeacherParams(student.spec, t)


def ema_update(teacher: TeacherParams, student: StudentParams, decay: float) -> TeacherParams:
    if not 0.0 <= decay < 1.0:
        raise ValidationError(f"EMA decay must lie in [0, 1), got {decay}")
    out = {}
    for k, w_t in teacher.items():
        w_s = student[k]
        if w_s.shape != w_t.shape:
            raise ValidationError(f"shape mismatch for {k}: {w_t.shape} vs {w_s.shape}")
        out[k] = decay * w_t + (1.0 - decay) * w_s
    return TeacherParams(teacher.spec, out)


# --- primitive layers -------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - (dp * p).sum(-1, keepdims=True))


def _mlp_forward(tensors, prefix, n_layers, x, final_relu):
    cache = []
    h = x
    for i in range(n_layers):
        z = h @ tensors[f"{prefix}.{i}.W"] + tensors[f"{prefix}.{i}.b"]
        cache.append((h, z))
        h = np.maximum(z, 0.0) if (final_relu or i < n_layers - 1) else z
    return h, cache


def _mlp_backward(tensors, prefix, n_layers, cache, dout, final_relu, grads):
    d = dout
    for i in reversed(range(n_layers)):
        h, z = cache[i]
        if final_relu or i < n_layers - 1:
            d = d * (z > 0)
        grads[f"{prefix}.{i}.W"] = grads.get(f"{prefix}.{i}.W", 0) + h.T @ d
        grads[f"{prefix}.{i}.b"] = grads.get(f"{prefix}.{i}.b", 0) + d.sum(0)
        d = d @ tensors[f"{prefix}.{i}.W"].T
    return d


def cosine_softmax(x: np.ndarray, W: np.ndarray, rho: float):
    """Batched softmax over rho * cos(x, W_k). Returns (p, cache)."""
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    wn = np.linalg.norm(W, axis=-1, keepdims=True)
    if np.any(xn == 0):
        raise ValidationError("zero pooled feature: cosine similarity undefined")
    if np.any(wn == 0):
        raise ValidationError("zero row in cluster matrix W: cosine similarity undefined")
    xu, wu = x / xn, W / wn
    cos = xu @ wu.T
    p = softmax(rho * cos)
    return p, (xu, xn, wu, wn, cos, p, rho)


def cosine_softmax_backward(cache, dp):
    xu, xn, wu, wn, cos, p, rho = cache
    dcos = rho * softmax_backward(p, dp)
    # d cos_bk / d x_b = (wu_k - cos_bk xu_b) / |x_b|
    dx = (dcos @ wu - (dcos * cos).sum(1, keepdims=True) * xu) / xn
    dW = (dcos.T @ xu - (dcos * cos).sum(0)[:, None] * wu) / wn
    return dx, dW


def cluster_branch(pooled, W, rho) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    single = pooled.ndim == 1
    p, _ = cosine_softmax(pooled[None] if single else pooled, np.asarray(W, dtype=np.float64), rho)
    return p[0] if single else p


def _im2col3(fmap):
    B, H, _, C = fmap.shape
    pad = np.zeros((B, H + 2, H + 2, C))
    pad[:, 1:-1, 1:-1] = fmap
    cols = np.empty((B, H, H, 9 * C))
    for di in range(3):
        for dj in range(3):
            k = (di * 3 + dj) * C
            cols[..., k:k + C] = pad[:, di:di + H, dj:dj + H]
    return cols


def _col2im3(dcols, H, C):
    B = dcols.shape[0]
    dpad = np.zeros((B, H + 2, H + 2, C))
    for di in range(3):
        for dj in range(3):
            k = (di * 3 + dj) * C
            dpad[:, di:di + H, dj:dj + H] += dcols[..., k:k + C]
    return dpad[:, 1:-1, 1:-1]


def conv3x3_same(fmap, kernel, bias):
    """Stride-1, zero-padded 3x3 convolution on a (B, H, H, C) map."""
    cols = _im2col3(fmap)
    out = cols @ kernel.reshape(-1, kernel.shape[-1]) + bias
    return out, cols


def mi_global_encode(feature_map, weights) -> np.ndarray:
    """``weights`` is a mapping with ``mienc.W`` and ``mienc.b``."""
    fm = np.asarray(feature_map, dtype=np.float64)
    single = fm.ndim == 3
    fm = fm[None] if single else fm
    k = weights["mienc.W"]
    if fm.shape[-1] != k.shape[2] or fm.shape[1] != fm.shape[2]:
        raise ValidationError(f"feature map shape {fm.shape[1:]} does not match encoder kernel {k.shape}")
    out, _ = conv3x3_same(fm, k, weights["mienc.b"])
    g = out.mean(axis=(1, 2))
    return g[0] if single else g


def mi_global_disc(g, p_cls, p_clu, weights) -> np.ndarray:
    g, p_cls, p_clu = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (g, p_cls, p_clu))
    inp = np.concatenate([g, p_cls, p_clu], axis=1)
    if inp.shape[1] != weights["gdisc.0.W"].shape[0]:
        raise ValidationError("global discriminator input width mismatch")
    out, _ = _mlp_forward(weights, "gdisc", 3, inp, final_relu=False)
    return out[:, 0]


def _local_input(fmap, p_cls, p_clu):
    B, H = fmap.shape[0], fmap.shape[1]
    rep = np.concatenate([p_cls, p_clu], axis=1)[:, None, None, :]
    return np.concatenate([fmap, np.broadcast_to(rep, (B, H, H, rep.shape[-1]))], axis=-1)


def mi_local_disc(feature_map, p_cls, p_clu, weights) -> np.ndarray:
    fm = np.asarray(feature_map, dtype=np.float64)
    single = fm.ndim == 3
    fm = fm[None] if single else fm
    p_cls, p_clu = np.atleast_2d(p_cls), np.atleast_2d(p_clu)
    inp = _local_input(fm, p_cls, p_clu)
    B, H, _, C = inp.shape
    if C != weights["ldisc.0.W"].shape[0]:
        raise ValidationError("local discriminator channel mismatch")
    out, _ = _mlp_forward(weights, "ldisc", 3, inp.reshape(-1, C), final_relu=False)
    out = out.reshape(B, H, H)
    return out[0] if single else out


# --- student / teacher ------------------------------------------------------

@dataclass
class StudentOutputs:
    feature_map: np.ndarray
    pooled: np.ndarray
    p_cls: np.ndarray
    p_clu: Optional[np.ndarray] = None
    global_feat: Optional[np.ndarray] = None
    cache: dict = field(default_factory=dict, repr=False)


def _backbone_forward(t, spec: BackboneSpec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValidationError(f"input shape {x.shape} does not match input_dim={spec.input_dim}")
    h, bb_cache = _mlp_forward(t, "backbone", len(spec.hidden_widths), x, final_relu=True)
    fmap = h.reshape(len(x), spec.H, spec.H, spec.D0)
    pooled = fmap.mean(axis=(1, 2)) @ t["pool.W"] + t["pool.b"]
    logits = pooled @ t["cls.W"] + t["cls.b"]
    return fmap, pooled, logits, bb_cache


def forward_student(params: StudentParams, x, rho: float = 10.0, with_cluster: bool = True,
                    with_mi: bool = True) -> StudentOutputs:
    """Batched student pass. A 1-D ``x`` is treated as a batch of one."""
    spec = params.spec
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fmap, pooled, logits, bb_cache = _backbone_forward(params, spec, x)
    p_cls = softmax(logits)
    cache = {"bb": bb_cache, "fmap": fmap, "pooled": pooled, "p_cls": p_cls}
    out = StudentOutputs(fmap, pooled, p_cls, cache=cache)
    if with_cluster or with_mi:
        out.p_clu, cache["clu"] = cosine_softmax(pooled, params["clu.W"], rho)
    if with_mi:
        conv, cols = conv3x3_same(fmap, params["mienc.W"], params["mienc.b"])
        cache["mienc_cols"] = cols
        out.global_feat = conv.mean(axis=(1, 2))
    return out


def forward_teacher(params: TeacherParams, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, _, logits, _ = _backbone_forward(params, params.spec, x)
    return softmax(logits)


def student_backward(params: StudentParams, out: StudentOutputs, d_pcls=None, d_pclu=None,
                     d_global=None, d_fmap=None, d_logits=None, grads=None) -> dict:
    """Accumulate parameter gradients given upstream gradients on the outputs."""
    spec, t, c = params.spec, params, out.cache
    grads = {} if grads is None else grads
    B = out.pooled.shape[0]
    dl = np.zeros((B, spec.N)) if d_logits is None else d_logits.copy()
    if d_pcls is not None:
        dl += softmax_backward(c["p_cls"], d_pcls)
    grads["cls.W"] = grads.get("cls.W", 0) + out.pooled.T @ dl
    grads["cls.b"] = grads.get("cls.b", 0) + dl.sum(0)
    dpooled = dl @ t["cls.W"].T
    if d_pclu is not None:
        dx, dW = cosine_softmax_backward(c["clu"], d_pclu)
        dpooled += dx
        grads["clu.W"] = grads.get("clu.W", 0) + dW
    fm_mean = out.feature_map.mean(axis=(1, 2))
    grads["pool.W"] = grads.get("pool.W", 0) + fm_mean.T @ dpooled
    grads["pool.b"] = grads.get("pool.b", 0) + dpooled.sum(0)
    dfm_mean = dpooled @ t["pool.W"].T
    HH = spec.H * spec.H
    dfmap = np.broadcast_to((dfm_mean / HH)[:, None, None, :], out.feature_map.shape).copy()
    if d_fmap is not None:
        dfmap += d_fmap
    if d_global is not None:
        dconv = np.broadcast_to((d_global / HH)[:, None, None, :], (B, spec.H, spec.H, spec.D1))
        cols = c["mienc_cols"]
        kflat = t["mienc.W"].reshape(-1, spec.D1)
        grads["mienc.W"] = grads.get("mienc.W", 0) + (
            cols.reshape(-1, cols.shape[-1]).T @ dconv.reshape(-1, spec.D1)).reshape(t["mienc.W"].shape)
        grads["mienc.b"] = grads.get("mienc.b", 0) + dconv.sum(axis=(0, 1, 2))
        dfmap += _col2im3(dconv @ kflat.T, spec.H, spec.D0)
    _mlp_backward(t, "backbone", len(spec.hidden_widths), c["bb"], dfmap.reshape(B, -1), True, grads)
    return grads


def global_disc_forward(t, inp):
    out, cache = _mlp_forward(t, "gdisc", 3, inp, final_relu=False)
    return out[:, 0], cache


def global_disc_backward(t, cache, dscore, grads):
    return _mlp_backward(t, "gdisc", 3, cache, dscore[:, None], False, grads)


def local_disc_forward(t, fmap, p_cls, p_clu):
    inp = _local_input(fmap, p_cls, p_clu)
    B, H, _, C = inp.shape
    out, cache = _mlp_forward(t, "ldisc", 3, inp.reshape(-1, C), final_relu=False)
    return out.reshape(B, H, H), cache


def local_disc_backward(t, cache, dscore_map, grads, D0):
    """Returns gradients w.r.t. (feature map, p_cls ++ p_clu)."""
    B, H = dscore_map.shape[:2]
    dinp = _mlp_backward(t, "ldisc", 3, cache, dscore_map.reshape(-1, 1), False, grads)
    dinp = dinp.reshape(B, H, H, -1)
    return dinp[..., :D0], dinp[..., D0:].sum(axis=(1, 2))


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params: Params, path) -> None:
    """One line per tensor: ``name shape values...`` (shape as d1xd2x...)."""
    lines = []
    for name, v in params.items():
        shape = "x".join(str(s) for s in v.shape)
        lines.append(" ".join([name, shape] + [format(x, ".17g") for x in v.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path, spec: BackboneSpec, kind: type = StudentParams) -> Params:
    expected = spec.shapes()
    tensors = {}
    for ln, line in enumerate(Path(path).read_text().split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        name, shape = parts[0], tuple(int(s) for s in parts[1].split("x"))
        if name not in expected or expected[name] != shape:
            raise ValidationError(f"line {ln}: tensor {name} with shape {shape} does not match the BackboneSpec")
        vals = np.array([float(x) for x in parts[2:]])
        if vals.size != int(np.prod(shape)):
            raise ValidationError(f"line {ln}: {name} has {vals.size} values, expected {np.prod(shape)}")
        tensors[name] = vals.reshape(shape)
    want = set(expected) if kind is StudentParams else {k for k in expected if k.startswith(TEACHER_PREFIXES)}
    missing = want - set(tensors)
    if missing:
        raise ValidationError(f"checkpoint missing tensors: {sorted(missing)}")
    return kind(spec, tensors)
