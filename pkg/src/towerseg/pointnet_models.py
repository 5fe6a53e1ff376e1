"""PointNet classifier and segmenter built on :mod:`towerseg.nn_engine`.

Input is a ``(b, n, 7)`` batch of unit-sphere feature rows. Only the x, y
columns pass through the input T-Net; z and the radiometric columns are
appended after the learned 2x2 transform, since towers are upright.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn_engine import (Dropout, Layer, Linear, MaxPoolPoints, Sequential, Tensor,
                        batched_transform, rowwise_matmul, shared_mlp, BNReLU, ReLU)
from .preprocess import N_FEATURES

DESCRIPTOR_TAG = "pnl-v1"
ORTHO_PENALTY = 1e-3

# Canonical PointNet widths; the light variant halves every one of them.
FULL_WIDTHS = {
    "stage_a": (64, 64),
    "stage_b": (64, 128, 1024),
    "cls_head": (512, 256),
    "seg_head": (512, 256, 128),
    "tnet_head": (512, 256),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str = "light"
    task: str = "cls"
    k: int = 2
    point_feature_dim: int = N_FEATURES
    stage_a: tuple[int, ...] = (32, 32)
    stage_b: tuple[int, ...] = (32, 64, 512)
    head: tuple[int, ...] = (256, 128)
    tnet_head: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.3
    batchnorm: bool = True

    def __post_init__(self):
        if self.variant not in ("light", "full", "custom"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.task not in ("cls", "seg"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.k < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        for name in ("stage_a", "stage_b", "head", "tnet_head"):
            widths = tuple(int(w) for w in getattr(self, name))
            if not widths or min(widths) < 1:
                raise ValueError(f"{name} needs at least one positive width")
            object.__setattr__(self, name, widths)

    def descriptor(self) -> str:
        def fmt(ws):
            return ",".join(str(w) for w in ws)
        return (f"{DESCRIPTOR_TAG};task={self.task};variant={self.variant};k={self.k}"
                f";in={self.point_feature_dim};widths={fmt(self.stage_a)}/{fmt(self.stage_b)}"
                f";head={fmt(self.head)};tnet={fmt(self.tnet_head)}"
                f";dropout={self.dropout_rate!r};bn={int(self.batchnorm)}")

    @classmethod
    def from_descriptor(cls, text: str) -> "ArchitectureSpec":
        tag, *items = text.strip().split(";")
        if tag != DESCRIPTOR_TAG:
            raise ValueError(f"unsupported architecture descriptor {tag!r}")
        kv = dict(item.split("=", 1) for item in items)

        def ints(s):
            return tuple(int(v) for v in s.split(","))
        stage_a, stage_b = kv["widths"].split("/")
        return cls(variant=kv["variant"], task=kv["task"], k=int(kv["k"]),
                   point_feature_dim=int(kv["in"]), stage_a=ints(stage_a),
                   stage_b=ints(stage_b), head=ints(kv["head"]), tnet_head=ints(kv["tnet"]),
                   dropout_rate=float(kv["dropout"]), batchnorm=kv["bn"] == "1")


def make_spec(variant: str = "light", task: str = "cls", k: int = 2, **overrides) -> ArchitectureSpec:
    """Spec for the full PointNet or the light one with every width halved."""
    div = {"full": 1, "light": 2}[variant]

    def widths(key):
        return tuple(w // div for w in FULL_WIDTHS[key])
    spec = ArchitectureSpec(variant=variant, task=task, k=k,
                            stage_a=widths("stage_a"), stage_b=widths("stage_b"),
                            head=widths("cls_head" if task == "cls" else "seg_head"),
                            tnet_head=widths("tnet_head"))
    return replace(spec, **overrides) if overrides else spec


def orthogonality_penalty(mats: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``||I - A A^T||_F^2`` and its gradient w.r.t. ``A``."""
    b, d, _ = mats.shape
    resid = mats @ mats.transpose(0, 2, 1) - np.eye(d, dtype=mats.dtype)
    value = float((resid**2).sum() / b)
    return value, (4.0 / b) * (resid @ mats)


class TNet(Layer):
    """Predicts one ``d x d`` matrix per cloud and applies it to every point.

    The output layer starts at zero weight and identity bias, so a fresh
    T-Net is an exact pass-through.
    """

    def __init__(self, dim: int, widths, head, rng, dtype=np.float32, batchnorm=True):
        self.dim = dim
        self.mlp = shared_mlp(dim, widths, rng, dtype, batchnorm)
        self.pool = MaxPoolPoints()
        self.fc = shared_mlp(widths[-1], head, rng, dtype, batchnorm)
        self.out = Linear(head[-1], dim * dim, rng, dtype)
        self.out.weight.data[...] = 0
        self.out.bias.data[...] = np.eye(dim, dtype=dtype).ravel()
        self._x = None
        self.matrix = None

    def children(self) -> dict[str, Layer]:
        return {"mlp": self.mlp, "fc": self.fc, "out": self.out}

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"T-Net expects (b, n, {self.dim}) input, got {x.shape}")
        b = x.shape[0]
        feat = self.pool.forward(self.mlp.forward(x))
        mats = self.out.forward(self.fc.forward(feat)).reshape(b, self.dim, self.dim)
        self._x, self.matrix = x, mats
        return batched_transform(x, mats), mats

    def backward(self, grad, matrix_grad=None):
        x, mats = self._x, self.matrix
        gx = grad @ mats.transpose(0, 2, 1)
        gm = x.transpose(0, 2, 1) @ grad
        if matrix_grad is not None:
            gm = gm + matrix_grad
        g = self.fc.backward(self.out.backward(gm.reshape(len(x), -1)))
        gx += self.mlp.backward(self.pool.backward(g))
        return gx


class SplitLinear(Layer):
    """Linear layer over ``concat(local_i, global)`` without materialising
    the broadcast: the global half is computed once per cloud."""

    def __init__(self, c_local: int, c_global: int, c_out: int, rng, dtype=np.float32):
        inner = Linear(c_local + c_global, c_out, rng, dtype)
        self.weight, self.bias = inner.weight, inner.bias
        self.c_local = c_local
        self._cache = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, local, glob):
        b, n, _ = local.shape
        w = self.weight.data
        out = rowwise_matmul(local.reshape(b * n, -1), w[:self.c_local]).reshape(b, n, -1)
        out += self.bias.data
        out += rowwise_matmul(glob, w[self.c_local:])[:, None, :]
        self._cache = (local, glob)
        return out

    def backward(self, grad):
        local, glob = self._cache
        b, n, c_out = grad.shape
        g2 = grad.reshape(b * n, c_out)
        gsum = grad.sum(axis=1)
        w = self.weight.data
        self.weight.grad[:self.c_local] += local.reshape(b * n, -1).T @ g2
        self.weight.grad[self.c_local:] += glob.T @ gsum
        self.bias.grad += g2.sum(axis=0)
        return (g2 @ w[:self.c_local].T).reshape(local.shape), gsum @ w[self.c_local:].T


class PointNetModel:
    """Shared trunk: input T-Net, stage A, feature T-Net, stage B, max-pool."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        bn = spec.batchnorm
        a = spec.stage_a[-1]
        self.input_tnet = TNet(2, spec.stage_b, spec.tnet_head, rng, dtype, bn)
        self.stage_a = shared_mlp(spec.point_feature_dim, spec.stage_a, rng, dtype, bn)
        self.feature_tnet = TNet(a, spec.stage_b, spec.tnet_head, rng, dtype, bn)
        self.stage_b = shared_mlp(a, spec.stage_b, rng, dtype, bn)
        self.pool = MaxPoolPoints()
        self._build_head(rng)
        self.training = True
        self.penalty = 0.0

    def _build_head(self, rng):
        raise NotImplementedError

    # -- bookkeeping ----------------------------------------------------

    def children(self) -> dict[str, Layer]:
        return {"input_tnet": self.input_tnet, "stage_a": self.stage_a,
                "feature_tnet": self.feature_tnet, "stage_b": self.stage_b}

    def _walk(self):
        def visit(prefix, layer):
            kids = layer.children() if hasattr(layer, "children") else None
            if kids is not None:
                for name, child in kids.items():
                    yield from visit(f"{prefix}{name}.", child)
            elif isinstance(layer, Sequential):
                for i, child in enumerate(layer.layers):
                    yield from visit(f"{prefix}{i}.", child)
            else:
                yield prefix, layer
        for name, child in self.children().items():
            yield from visit(f"{name}.", child)

    def layers(self) -> list[Layer]:
        return [layer for _, layer in self._walk()]

    def parameters(self) -> dict[str, Tensor]:
        return {prefix + k: v for prefix, layer in self._walk() for k, v in layer.parameters().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {prefix + k: v for prefix, layer in self._walk() for k, v in layer.buffers().items()}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool):
        self.training = training
        for layer in self.layers():
            layer.training = training
        for tnet in (self.input_tnet, self.feature_tnet):
            tnet.training = training
            tnet.pool.training = training
        self.pool.training = training

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # -- trunk ----------------------------------------------------------

    def _trunk_forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[-1] != self.spec.point_feature_dim:
            raise ValueError(f"expected (b, n, {self.spec.point_feature_dim}) features, got {x.shape}")
        if x.shape[1] < 1:
            raise ValueError("need at least one point per cloud")
        xy_t, _ = self.input_tnet.forward(np.ascontiguousarray(x[..., :2]))
        h = self.stage_a.forward(np.concatenate([xy_t, x[..., 2:]], axis=-1))
        local, mats = self.feature_tnet.forward(h)
        self.penalty, self._penalty_grad = orthogonality_penalty(mats)
        glob = self.pool.forward(self.stage_b.forward(local))
        return local, glob

    def _trunk_backward(self, g_local, g_global, penalty_coef):
        g_pool = self.stage_b.backward(self.pool.backward(g_global))
        g_local = g_pool if g_local is None else g_local + g_pool
        gm = penalty_coef * self._penalty_grad if penalty_coef else None
        gh = self.stage_a.backward(self.feature_tnet.backward(g_local, gm))
        g_xy = self.input_tnet.backward(np.ascontiguousarray(gh[..., :2]))
        return np.concatenate([g_xy, gh[..., 2:]], axis=-1)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class PointNetClassifier(PointNetModel):
    """Window-level scores, ``(b, n, 7) -> (b, k)`` logits."""

    def _build_head(self, rng):
        spec = self.spec
        self.head = shared_mlp(spec.stage_b[-1], spec.head, rng, self.dtype, spec.batchnorm)
        self.dropout = Dropout(spec.dropout_rate, np.random.default_rng(rng.integers(2**63)))
        self.final = Linear(spec.head[-1], spec.k, rng, self.dtype)

    def children(self):
        return {**super().children(), "head": self.head, "final": self.final}

    def _set_mode(self, training):
        super()._set_mode(training)
        self.dropout.training = training

    def forward(self, x):
        _, glob = self._trunk_forward(x)
        return self.final.forward(self.dropout.forward(self.head.forward(glob)))

    def backward(self, grad_logits, penalty_coef: float = ORTHO_PENALTY):
        """Back-propagate ``d loss / d logits`` (plus ``penalty_coef`` times the
        feature-transform penalty); returns the input gradient."""
        g = self.head.backward(self.dropout.backward(self.final.backward(grad_logits)))
        return self._trunk_backward(None, g, penalty_coef)


class PointNetSegmenter(PointNetModel):
    """Per-point scores, ``(b, n, 7) -> (b, n, k)`` logits, from local features
    joined with the pooled global feature."""

    def _build_head(self, rng):
        spec = self.spec
        first, *rest = spec.head
        self.joint = SplitLinear(spec.stage_a[-1], spec.stage_b[-1], first, rng, self.dtype)
        self.joint_act = BNReLU(first, self.dtype) if spec.batchnorm else ReLU()
        self.head = shared_mlp(first, rest, rng, self.dtype, spec.batchnorm)
        self.final = Linear(spec.head[-1], spec.k, rng, self.dtype)

    def children(self):
        return {**super().children(), "joint": self.joint, "joint_act": self.joint_act,
                "head": self.head, "final": self.final}

    def forward(self, x):
        local, glob = self._trunk_forward(x)
        h = self.joint_act.forward(self.joint.forward(local, glob))
        return self.final.forward(self.head.forward(h))

    def backward(self, grad_logits, penalty_coef: float = ORTHO_PENALTY):
        g = self.joint_act.backward(self.head.backward(self.final.backward(grad_logits)))
        g_local, g_global = self.joint.backward(g)
        return self._trunk_backward(g_local, g_global, penalty_coef)


def build_model(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> PointNetModel:
    cls = PointNetClassifier if spec.task == "cls" else PointNetSegmenter
    return cls(spec, seed=seed, dtype=dtype)


def parameter_count(spec: ArchitectureSpec) -> int:
    """Trainable scalar count of the network described by ``spec``."""
    return build_model(spec).parameter_count()


def input_tnet(tnet: TNet, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transform ``(b, n, 2)`` coordinates; returns (transformed, matrices)."""
    return tnet.forward(xy)


def feature_tnet(tnet: TNet, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return tnet.forward(features)
