"""Capsule network: statistical-pooling primary capsules, noise-regularized
agreement routing to two output capsules, the column-softmax prediction head,
and the cross-entropy loss.

Class convention, fixed for reproducibility: output capsule 0 is the real
class, capsule 1 is the fake class, and y_hat is the fake-class probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .archive import ArchiveError, WeightArchive, load_archive, save_archive
from .extractor import ToyExtractor, VggFrontExtractor, VGG_FRONT_LAYERS
from .tensor import Tensor

CLASS_CONVENTION = "capsule0=real capsule1=fake"

# channel-wise normalization constants published with each extractor kind
INPUT_NORM = {
    "vgg19_front": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "toy": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


@dataclass
class RoutingConfig:
    """Iteration count, weight-noise scale, and train/eval mode."""

    iterations: int = 2
    noise_sigma: float = 0.01
    mode: str = "eval"
    shared_transform: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"routing needs at least one iteration, got {self.iterations}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be non-negative, got {self.noise_sigma}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"routing mode must be 'train' or 'eval', got {self.mode!r}")


@dataclass
class RoutingState:
    """Final logits, couplings and capsule vectors, for inspection."""

    logits: np.ndarray
    couplings: np.ndarray
    pre_activation: np.ndarray
    outputs: np.ndarray
    coupling_history: List[np.ndarray] = field(default_factory=list)


@dataclass
class Prediction:
    """Fake-class probability plus the per-class pair it came from."""

    y_hat: Tensor
    per_class: Tensor
    m: int


@dataclass
class ForwardState:
    capsule_outputs: np.ndarray
    routing: RoutingState


def stats_pool(features: Tensor) -> Tensor:
    """Reduce [C,H,W] (or [N,C,H,W]) to per-channel spatial mean and
    population variance, stacked as rows: [2,C] (or [N,2,C])."""
    squeeze = features.data.ndim == 3
    f = T.reshape(features, (1,) + features.data.shape) if squeeze else features
    if f.data.ndim != 4:
        raise ValueError(f"stats_pool expects [C,H,W] or [N,C,H,W], got {features.data.shape}")
    n, c = f.data.shape[:2]
    mean = f.mean(axis=(2, 3))
    centered = f - T.reshape(mean, (n, c, 1, 1))
    var = (centered * centered).mean(axis=(2, 3))
    out = T.stack([mean, var], axis=1)
    return T.reshape(out, (2, c)) if squeeze else out


def route(
    u: Tensor,
    weights: Tensor,
    cfg: RoutingConfig,
    rng: Optional[np.random.Generator] = None,
    num_out: Optional[int] = None,
) -> Tuple[Tensor, RoutingState]:
    """Agreement routing of I input capsules to J output capsules.

    Inputs are squashed once before the per-pair affine maps. In train mode
    with sigma > 0, Gaussian noise is added to a copy of the weight tensor,
    freshly sampled from ``rng`` on every call; the persistent weights are
    never touched. With sigma 0 or in eval mode the routing is a pure
    deterministic function.

    u: [I,n] or [N,I,n]; weights: [I,J,m,n] ([I,1,m,n] with shared_transform).
    Returns (v, state) with v of shape [J,m] or [N,J,m].
    """
    if cfg.iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {cfg.iterations}")
    squeeze = u.data.ndim == 2
    if squeeze:
        u = T.reshape(u, (1,) + u.data.shape)
    if u.data.ndim != 3:
        raise ValueError(f"route expects [I,n] or [N,I,n] inputs, got {u.data.shape}")
    n_batch, num_in, dim_in = u.data.shape
    if weights.data.ndim != 4 or weights.data.shape[0] != num_in or weights.data.shape[3] != dim_in:
        raise ValueError(
            f"weight tensor {weights.data.shape} does not match {num_in} input "
            f"capsules of dimension {dim_in}"
        )
    if cfg.shared_transform:
        if weights.data.shape[1] != 1:
            raise ValueError("shared_transform expects weights of shape [I,1,m,n]")
        if num_out is None:
            raise ValueError("shared_transform routing requires num_out")
        j = num_out
    else:
        j = weights.data.shape[1]
    m = weights.data.shape[2]

    effective = weights
    sigma = cfg.noise_sigma if cfg.mode == "train" else 0.0
    if sigma > 0.0:
        if rng is None:
            raise ValueError("train-mode routing with noise requires an rng")
        noise = Tensor((sigma * rng.standard_normal(weights.data.shape)).astype(weights.data.dtype))
        effective = weights + noise

    squashed = T.squash(u, axis=-1)
    columns = T.reshape(squashed, (n_batch, num_in, 1, dim_in, 1))
    u_hat = effective @ columns                       # [N,I,J|1,m,1]
    u_hat = T.reshape(u_hat, (n_batch, num_in, u_hat.data.shape[2], m))
    if cfg.shared_transform:
        u_hat = u_hat * Tensor(np.ones((1, 1, j, 1), dtype=u.data.dtype))

    b = Tensor(np.zeros((n_batch, num_in, j), dtype=u.data.dtype))
    c = s = v = None
    history = []
    for _ in range(cfg.iterations):
        c = T.softmax(b, axis=-1)                     # couplings over output capsules
        s = (T.reshape(c, (n_batch, num_in, j, 1)) * u_hat).sum(axis=1)
        v = T.squash(s, axis=-1)
        agreement = (u_hat * T.reshape(v, (n_batch, 1, j, m))).sum(axis=-1)
        b = b + agreement
        history.append(c.data.copy())

    def _squeeze(a: np.ndarray) -> np.ndarray:
        return a[0] if squeeze else a

    state = RoutingState(
        logits=_squeeze(b.data.copy()),
        couplings=_squeeze(c.data.copy()),
        pre_activation=_squeeze(s.data.copy()),
        outputs=_squeeze(v.data.copy()),
        coupling_history=[_squeeze(h) for h in history],
    )
    if squeeze:
        v = T.reshape(v, (j, m))
    return v, state


def predict(v_real: Tensor, v_fake: Tensor) -> Prediction:
    """Column softmax over the two stacked output capsules.

    Each of the m dimensions votes via a 2-way softmax; y_hat is the mean
    fake-row probability, so swapping the arguments maps y_hat to 1 - y_hat.
    """
    v_real = v_real if isinstance(v_real, Tensor) else Tensor(v_real)
    v_fake = v_fake if isinstance(v_fake, Tensor) else Tensor(v_fake)
    if v_real.data.shape != v_fake.data.shape:
        raise ValueError(
            f"output capsules differ in shape: {v_real.data.shape} vs {v_fake.data.shape}"
        )
    m = v_real.data.shape[-1]
    if m == 0:
        raise ValueError("output capsules must have at least one dimension")
    stacked = T.stack([v_real, v_fake], axis=-2)      # [...,2,m]
    cols = T.softmax(stacked, axis=-2)
    p_real = cols[..., 0, :].mean(axis=-1)
    p_fake = cols[..., 1, :].mean(axis=-1)
    return Prediction(y_hat=p_fake, per_class=T.stack([p_real, p_fake], axis=-1), m=m)


def loss(y, y_hat) -> Tensor:
    """Cross-entropy of the fake-class probability against a 0/1 label.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; labels
    outside {0, 1} are rejected.
    """
    labels = np.asarray(y, dtype=np.float64)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError(f"labels must be 0 (real) or 1 (fake), got {y!r}")
    p = y_hat if isinstance(y_hat, Tensor) else Tensor(float(y_hat))
    p = T.clip(p, 1e-7, 1.0 - 1e-7)
    yt = Tensor(labels.astype(p.data.dtype))
    return -(yt * T.log(p) + (1.0 - yt) * T.log(1.0 - p))


@dataclass(frozen=True)
class CapsuleHeadSpec:
    """Layer widths of one primary capsule.

    Defaults give the production head: conv C->64->16 with batch norm,
    statistical pooling to [2,16], then 1-D convs 2->8 (k=5, stride 2) and
    8->1 (k=3), for a 4-dimensional capsule vector.
    """

    conv_channels: Tuple[int, int] = (64, 16)
    pooled_channels: int = 8
    pooled_kernels: Tuple[int, int] = (5, 3)
    pooled_strides: Tuple[int, int] = (2, 1)

    def capsule_dim(self) -> int:
        l1 = (self.conv_channels[1] - self.pooled_kernels[0]) // self.pooled_strides[0] + 1
        dim = (l1 - self.pooled_kernels[1]) // self.pooled_strides[1] + 1
        if l1 < 1 or dim < 1:
            raise ValueError(f"head spec {self} collapses to an empty capsule vector")
        return dim


class _BatchNorm:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training=train)


def _uniform_init(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class PrimaryCapsule:
    """conv-BN-ReLU twice, statistical pooling, then a 1-D conv head."""

    def __init__(self, in_channels: int, head: CapsuleHeadSpec,
                 rng: np.random.Generator, dtype=np.float64):
        c1, c2 = head.conv_channels
        p = head.pooled_channels
        k1, k2 = head.pooled_kernels
        self.head = head
        self.conv1_kernel = _uniform_init(rng, (c1, in_channels, 3, 3), in_channels * 9, dtype)
        self.conv1_bias = _uniform_init(rng, (c1,), in_channels * 9, dtype)
        self.bn1 = _BatchNorm(c1, dtype)
        self.conv2_kernel = _uniform_init(rng, (c2, c1, 3, 3), c1 * 9, dtype)
        self.conv2_bias = _uniform_init(rng, (c2,), c1 * 9, dtype)
        self.bn2 = _BatchNorm(c2, dtype)
        self.conv3_kernel = _uniform_init(rng, (p, 2, k1), 2 * k1, dtype)
        self.conv3_bias = _uniform_init(rng, (p,), 2 * k1, dtype)
        self.bn3 = _BatchNorm(p, dtype)
        self.conv4_kernel = _uniform_init(rng, (1, p, k2), p * k2, dtype)
        self.conv4_bias = _uniform_init(rng, (1,), p * k2, dtype)
        self.bn4 = _BatchNorm(1, dtype)

    def forward(self, features: Tensor, train: bool = False) -> Tensor:
        """Features [N,C,H,W] (or [C,H,W]) to a capsule vector [N,dim] (or [dim])."""
        squeeze = features.data.ndim == 3
        f = T.reshape(features, (1,) + features.data.shape) if squeeze else features
        h = T.relu(self.bn1(T.conv2d(f, self.conv1_kernel, self.conv1_bias, padding=1), train))
        h = T.relu(self.bn2(T.conv2d(h, self.conv2_kernel, self.conv2_bias, padding=1), train))
        h = stats_pool(h)
        h = T.relu(self.bn3(T.conv1d(h, self.conv3_kernel, self.conv3_bias,
                                     stride=self.head.pooled_strides[0]), train))
        h = self.bn4(T.conv1d(h, self.conv4_kernel, self.conv4_bias,
                              stride=self.head.pooled_strides[1]), train)
        out = T.reshape(h, (h.data.shape[0], h.data.shape[2]))
        return T.reshape(out, (out.data.shape[1],)) if squeeze else out

    def parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for i, bn in ((1, self.bn1), (2, self.bn2), (3, self.bn3), (4, self.bn4)):
            named.append((f"conv{i}.kernel", getattr(self, f"conv{i}_kernel")))
            named.append((f"conv{i}.bias", getattr(self, f"conv{i}_bias")))
            named.append((f"bn{i}.gamma", bn.gamma))
            named.append((f"bn{i}.beta", bn.beta))
        return named

    def batchnorms(self) -> List[Tuple[str, _BatchNorm]]:
        return [(f"bn{i}", bn) for i, bn in
                ((1, self.bn1), (2, self.bn2), (3, self.bn3), (4, self.bn4))]

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


@dataclass
class ParameterBudget:
    frozen: int
    trainable: int

    @property
    def total(self) -> int:
        return self.frozen + self.trainable


class CapsuleModel:
    """Frozen extractor, three primary capsules, and the routing weights."""

    def __init__(self, extractor, routing: Optional[RoutingConfig] = None,
                 head: Optional[CapsuleHeadSpec] = None, num_capsules: int = 3,
                 num_classes: int = 2, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.extractor = extractor
        self.routing = routing if routing is not None else RoutingConfig()
        self.head = head if head is not None else CapsuleHeadSpec()
        self.num_capsules = num_capsules
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.input_norm = INPUT_NORM.get(extractor.kind, INPUT_NORM["toy"])
        self.capsules = [
            PrimaryCapsule(extractor.out_channels, self.head, rng, dtype)
            for _ in range(num_capsules)
        ]
        dim = self.head.capsule_dim()
        j = 1 if self.routing.shared_transform else num_classes
        self.routing_weights = _uniform_init(
            rng, (num_capsules, j, dim, dim), dim, dtype)

    def forward(self, features: Tensor, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                return_state: bool = False):
        """Features to a Prediction; optionally also the capsule internals."""
        cfg = replace(self.routing, mode="train" if train else "eval")
        u = T.stack([cap.forward(features, train) for cap in self.capsules], axis=-2)
        v, state = route(u, self.routing_weights, cfg, rng=rng, num_out=self.num_classes)
        pred = predict(v[..., 0, :], v[..., 1, :])
        if return_state:
            return pred, ForwardState(capsule_outputs=u.data.copy(), routing=state)
        return pred

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [("routing.weights", self.routing_weights)]
        for i, cap in enumerate(self.capsules):
            named.extend((f"capsule{i}.{n}", p) for n, p in cap.parameters())
        return named

    def parameter_budget(self) -> ParameterBudget:
        return ParameterBudget(
            frozen=self.extractor.parameter_count,
            trainable=sum(p.data.size for _, p in self.trainable_parameters()),
        )


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "forgecaps-checkpoint-1"


def save_checkpoint(path, model: CapsuleModel) -> None:
    """Write the full model (extractor included) as a weight archive."""
    arch = WeightArchive()
    arch.meta["format"] = CHECKPOINT_FORMAT
    arch.meta["extractor.kind"] = model.extractor.kind
    arch.meta["extractor.channels"] = str(model.extractor.out_channels)
    arch.meta["routing.iterations"] = str(model.routing.iterations)
    arch.meta["routing.noise_sigma"] = repr(model.routing.noise_sigma)
    arch.meta["routing.shared_transform"] = str(int(model.routing.shared_transform))
    arch.meta["head.conv_channels"] = "{},{}".format(*model.head.conv_channels)
    arch.meta["head.pooled_channels"] = str(model.head.pooled_channels)
    arch.meta["head.pooled_kernels"] = "{},{}".format(*model.head.pooled_kernels)
    arch.meta["head.pooled_strides"] = "{},{}".format(*model.head.pooled_strides)
    arch.meta["num_capsules"] = str(model.num_capsules)
    arch.meta["num_classes"] = str(model.num_classes)
    arch.meta["class_convention"] = CLASS_CONVENTION
    arch.meta["input_norm.mean"] = ",".join(repr(v) for v in model.input_norm[0])
    arch.meta["input_norm.std"] = ",".join(repr(v) for v in model.input_norm[1])
    for name, p in model.extractor.parameters():
        arch.add(f"extractor.{name}", p.data)
    for name, p in model.trainable_parameters():
        arch.add(name, p.data)
    for i, cap in enumerate(model.capsules):
        for bn_name, bn in cap.batchnorms():
            arch.add(f"capsule{i}.{bn_name}.running_mean", bn.running_mean)
            arch.add(f"capsule{i}.{bn_name}.running_var", bn.running_var)
    save_archive(path, arch)


def _meta_pair(meta: Dict[str, str], key: str, cast) -> tuple:
    parts = meta[key].split(",")
    return tuple(cast(p) for p in parts)


def load_checkpoint(path, dtype=np.float64) -> CapsuleModel:
    """Rebuild a model from a checkpoint archive."""
    arch = load_archive(path)
    meta = arch.meta
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ArchiveError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    kind = meta["extractor.kind"]
    if kind == "toy":
        extractor = ToyExtractor(channels=int(meta["extractor.channels"]), dtype=dtype)
        for name, p in extractor.parameters():
            p.data = arch.require(f"extractor.{name}", p.data.shape).astype(dtype)
    elif kind == "vgg19_front":
        params = {}
        for layer, cin, cout in VGG_FRONT_LAYERS:
            params[f"{layer}.kernel"] = Tensor(
                arch.require(f"extractor.{layer}.kernel", (cout, cin, 3, 3)).astype(dtype))
            params[f"{layer}.bias"] = Tensor(
                arch.require(f"extractor.{layer}.bias", (cout,)).astype(dtype))
        extractor = VggFrontExtractor(params)
    else:
        raise ArchiveError(f"{path}: unknown extractor kind {kind!r}")

    routing = RoutingConfig(
        iterations=int(meta["routing.iterations"]),
        noise_sigma=float(meta["routing.noise_sigma"]),
        shared_transform=bool(int(meta["routing.shared_transform"])),
    )
    head = CapsuleHeadSpec(
        conv_channels=_meta_pair(meta, "head.conv_channels", int),
        pooled_channels=int(meta["head.pooled_channels"]),
        pooled_kernels=_meta_pair(meta, "head.pooled_kernels", int),
        pooled_strides=_meta_pair(meta, "head.pooled_strides", int),
    )
    model = CapsuleModel(
        extractor, routing=routing, head=head,
        num_capsules=int(meta["num_capsules"]),
        num_classes=int(meta["num_classes"]), dtype=dtype,
    )
    model.input_norm = (
        _meta_pair(meta, "input_norm.mean", float),
        _meta_pair(meta, "input_norm.std", float),
    )
    for name, p in model.trainable_parameters():
        p.data = arch.require(name, p.data.shape).astype(dtype)
    for i, cap in enumerate(model.capsules):
        for bn_name, bn in cap.batchnorms():
            bn.running_mean[...] = arch.require(
                f"capsule{i}.{bn_name}.running_mean", bn.running_mean.shape)
            bn.running_var[...] = arch.require(
                f"capsule{i}.{bn_name}.running_var", bn.running_var.shape)
    return model
