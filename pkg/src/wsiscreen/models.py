"""The four networks of the screening pipeline, built on tensorcore.

* ``MultiTaskNet``: miniature encoder-decoder.  The encoder's pooled
  bottleneck is both the classification input and the feature vector the
  screening head consumes; the decoder uses deformable 3x3 convolutions.
* ``ForegroundNet``: four convolutions and one x8 upsample over thumbnails.
* ``ScreeningNet``: 1x1 conv + ReLU over the top-k feature rows, max over
  rows, then a sigmoid unit.
* ``BlurNet``: two strided 5x5 convolutions and a sigmoid unit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, ValidationError
from .tensorcore import (
    Tensor,
    batch_norm,
    conv2d,
    deform_conv2d,
    global_avg_pool,
    linear,
    load_checkpoint,
    max_rows,
    no_grad,
    relu,
    save_checkpoint,
    sigmoid,
    upsample_bilinear,
)
from .tensorcore.ops import add


def to_input(images) -> np.ndarray:
    """uint8 [N, H, W, 3] (or one [H, W, 3]) -> float [N, 3, H, W] in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"expected RGB images [N, H, W, 3], got {arr.shape}")
    x = arr.astype(np.float64)
    if arr.dtype == np.uint8:
        x /= 255.0
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


class Network:
    kind = "network"

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.meta: dict = {}
        self.bn_momentum = 0.1
        self._rng = np.random.default_rng(seed)
        self.build()
        del self._rng

    def build(self):
        raise NotImplementedError

    # parameter helpers
    def _conv(self, name, cin, cout, k, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor(self._rng.normal(0, 1, (cout, cin, k, k)) * std, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _linear(self, name, cin, cout):
        std = np.sqrt(1.0 / cin)
        self.params[f"{name}.weight"] = Tensor(self._rng.normal(0, 1, (cout, cin)) * std, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.buffers[f"{name}.running_var"] = np.ones(c)

    def p(self, name) -> Tensor:
        return self.params[name]

    def conv(self, x, name, stride=1, padding=None):
        w = self.params[f"{name}.weight"]
        pad = w.shape[2] // 2 if padding is None else padding
        return conv2d(x, w, self.params[f"{name}.bias"], stride, pad)

    def bn(self, x, name, training):
        return batch_norm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training,
            momentum=self.bn_momentum,
        )

    def recompute_bn_stats(self, batches) -> None:
        """Replace running BN statistics by the plain average of per-batch
        statistics over ``batches`` (float NCHW arrays) under the current weights."""
        keys = [k for k in self.buffers if k.endswith((".running_mean", ".running_var"))]
        if not keys:
            return
        for k in keys:
            self.buffers[k][:] = 0.0
        try:
            with no_grad():
                for i, xb in enumerate(batches):
                    self.bn_momentum = 1.0 / (i + 1)
                    self.forward(Tensor(xb), training=True)
        finally:
            self.bn_momentum = 0.1

    def dense(self, x, name, rowwise=False):
        return linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], rowwise)

    # persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for k, t in self.params.items():
            if k not in tensors:
                raise ConfigurationError(f"checkpoint lacks parameter {k!r}")
            if tensors[k].shape != t.shape:
                raise ConfigurationError(f"parameter {k!r}: checkpoint shape {tensors[k].shape} != {t.shape}")
            t.data = tensors[k].copy()
        for k in self.buffers:
            if f"buffer.{k}" in tensors:
                self.buffers[k] = tensors[f"buffer.{k}"].copy()

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
        path = Path(path)
        save_checkpoint(path, {**self.state_tensors(), **(extra or {})})
        doc = {"kind": self.kind, "config": asdict(self.config), **(meta or {})}
        path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        sidecar = path.with_suffix(".json")
        if not path.is_file() or not sidecar.is_file():
            raise ConfigurationError(f"checkpoint {path} (or its {sidecar.name}) is missing")
        doc = json.loads(sidecar.read_text())
        if doc.get("kind") != cls.kind:
            raise ConfigurationError(f"{path} holds a {doc.get('kind')!r} model, expected {cls.kind!r}")
        net = cls(cls.config_type(**_tuples(doc["config"])))
        net.load_state_tensors(load_checkpoint(path))
        net.meta = {k: v for k, v in doc.items() if k not in ("kind", "config")}
        return net


def _tuples(cfg: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}


# --- multi-task patch network ------------------------------------------------


@dataclass(frozen=True)
class MultiTaskConfig:
    input_size: int = 512
    stem: tuple[int, int, int] = (4, 8, 8)
    stages: tuple[int, int] = (16, 32)
    feature_dim: int = 512
    decoder: tuple[int, int] = (32, 16)
    deformable: bool = True

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigurationError("input size must be a multiple of 32")
        if self.decoder[0] != self.stages[1]:
            raise ConfigurationError("first decoder width must equal the skip stage width")
        if self.feature_dim < 1:
            raise ConfigurationError("feature dimension must be positive")


class MultiTaskNet(Network):
    kind = "multitask"
    config_type = MultiTaskConfig

    def __init__(self, config: MultiTaskConfig | None = None, seed: int = 0):
        super().__init__(config or MultiTaskConfig(), seed)

    def build(self):
        c = self.config
        s1, s2, s3 = c.stem
        e2, e3 = c.stages
        d = c.feature_dim
        d1, d2 = c.decoder
        for name, cin, cout in [
            ("stem1", 3, s1), ("stem2", s1, s2), ("stem3", s2, s3),
            ("enc2", s3, e2), ("enc3", e2, e3), ("enc4", e3, d),
        ]:
            self._conv(name, cin, cout, 3)
            self._bn(f"{name}.bn", cout)
        self._linear("cls", d, 1)
        for name, cin, cout in [("dec1", d, d1), ("dec2", d1, d2)]:
            self._conv(name, cin, cout, 3)
            if c.deformable:
                self._conv(f"{name}.offset", cin, 18, 3, zero=True)
            self._bn(f"{name}.bn", cout)
        self._conv("head", d2, 1, 1)

    def _cbr(self, x, name, stride, training):
        return relu(self.bn(self.conv(x, name, stride), f"{name}.bn", training))

    def _decode(self, x, name, training):
        if self.config.deformable:
            offsets = self.conv(x, f"{name}.offset")
            y = deform_conv2d(x, offsets, self.p(f"{name}.weight"), self.p(f"{name}.bias"), 1, 1)
        else:
            y = self.conv(x, name)
        return relu(self.bn(y, f"{name}.bn", training))

    def forward(self, x: Tensor, training: bool = False):
        """Returns (class_prob [N,1], seg_map [N,1,H,W], feature [N,d])."""
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, size, size):
            raise DimensionError(f"multi-task input must be [N, 3, {size}, {size}], got {x.shape}")
        h = self._cbr(x, "stem1", 2, training)
        h = self._cbr(h, "stem2", 2, training)
        h = self._cbr(h, "stem3", 1, training)
        h = self._cbr(h, "enc2", 2, training)
        skip = self._cbr(h, "enc3", 2, training)
        bottleneck = self._cbr(skip, "enc4", 2, training)

        feature = global_avg_pool(bottleneck)
        class_prob = sigmoid(self.dense(feature, "cls"))

        u = self._decode(bottleneck, "dec1", training)
        u = add(upsample_bilinear(u, 2), skip)
        u = self._decode(u, "dec2", training)
        u = upsample_bilinear(u, 2)
        logits = self.conv(u, "head", padding=0)
        seg = sigmoid(upsample_bilinear(logits, size // logits.shape[2]))
        return class_prob, seg, feature

    def predict(self, images, batch_size: int = 4):
        """Inference over uint8 patches -> (probs [N], seg maps [N,H,W], features [N,d])."""
        x = to_input(images)
        probs, segs, feats = [], [], []
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                p, s, f = self.forward(Tensor(x[i : i + batch_size]), training=False)
                probs.append(p.data[:, 0])
                segs.append(s.data[:, 0])
                feats.append(f.data)
        return np.concatenate(probs), np.concatenate(segs), np.concatenate(feats)


def multitask_forward(patch, net: MultiTaskNet):
    """Single-patch convenience: (class_prob, seg_map [H, W], feature [d])."""
    probs, segs, feats = net.predict(np.asarray(patch)[None] if np.ndim(patch) == 3 else patch, batch_size=1)
    return float(probs[0]), segs[0], feats[0]


# --- foreground extraction ---------------------------------------------------


@dataclass(frozen=True)
class ForegroundConfig:
    input_size: int = 512
    widths: tuple[int, int, int] = (4, 8, 8)


class ForegroundNet(Network):
    kind = "foreground"
    config_type = ForegroundConfig

    def __init__(self, config: ForegroundConfig | None = None, seed: int = 0):
        super().__init__(config or ForegroundConfig(), seed)

    def build(self):
        a, b, c = self.config.widths
        self._conv("conv1", 3, a, 3)
        self._conv("conv2", a, b, 3)
        self._conv("conv3", b, c, 3)
        self._conv("conv4", c, 1, 3)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, size, size):
            raise DimensionError(f"foreground input must be [N, 3, {size}, {size}], got {x.shape}")
        h = relu(self.conv(x, "conv1", 2))
        h = relu(self.conv(h, "conv2", 2))
        h = relu(self.conv(h, "conv3", 2))
        logits = self.conv(h, "conv4", 1)
        return sigmoid(upsample_bilinear(logits, 8))

    def predict(self, thumbs, batch_size: int = 4) -> np.ndarray:
        thumbs = np.asarray(thumbs)
        if thumbs.ndim == 3:
            thumbs = thumbs[None]
        with no_grad():
            return np.concatenate(
                [
                    self.forward(Tensor(to_input(thumbs[i : i + batch_size]))).data[:, 0]
                    for i in range(0, len(thumbs), batch_size)
                ]
            )


def foreground_net_forward(thumb, net: ForegroundNet) -> np.ndarray:
    return net.predict(thumb)[0]


# --- slide screening head ----------------------------------------------------


@dataclass(frozen=True)
class ScreeningConfig:
    feature_dim: int = 512
    hidden: int = 64
    k: int = 64
    threshold: float = 0.74

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")


class ScreeningNet(Network):
    kind = "screening"
    config_type = ScreeningConfig

    def __init__(self, config: ScreeningConfig | None = None, seed: int = 0):
        super().__init__(config or ScreeningConfig(), seed)

    def build(self):
        c = self.config
        self._linear("conv1x1", c.feature_dim, c.hidden)
        self.params["conv1x1.weight"].data *= np.sqrt(2.0)
        self._linear("fc", c.hidden, 1)

    def forward(self, bag: Tensor) -> Tensor:
        if bag.ndim != 2 or bag.shape[1] != self.config.feature_dim:
            raise DimensionError(
                f"screening input must be [m, {self.config.feature_dim}], got {bag.shape}"
            )
        if not 1 <= bag.shape[0] <= self.config.k:
            raise DimensionError(f"bag has {bag.shape[0]} rows; expected 1..{self.config.k}")
        # row-independent arithmetic keeps permutation/duplication invariance exact
        h = relu(self.dense(bag, "conv1x1", rowwise=True))
        return sigmoid(self.dense(max_rows(h), "fc"))


def screening_forward(bag, net: ScreeningNet) -> float:
    with no_grad():
        return float(net.forward(Tensor(np.asarray(bag, dtype=np.float64))).data[0, 0])


def select_topk(probs, features, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows of the k most probable windows -> (matrix [min(n,k), d], window indices).

    Ties keep the original (row-major window) order.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    feats = np.asarray(features, dtype=np.float64)
    if probs.size == 0:
        raise ValidationError("cannot select top-k from an empty bag")
    if feats.ndim != 2 or feats.shape[0] != probs.size:
        raise DimensionError(f"{probs.size} probabilities for features of shape {feats.shape}")
    order = np.argsort(-probs, kind="stable")[:k]
    return feats[order], order


def decide(slide_prob: float, threshold: float) -> str:
    """Strictly greater than the threshold is positive."""
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    return "positive" if slide_prob > threshold else "negative"


# --- blur detector -----------------------------------------------------------


@dataclass(frozen=True)
class BlurConfig:
    input_size: int = 512
    widths: tuple[int, int] = (8, 8)
    batch_norm: bool = True


class BlurNet(Network):
    kind = "blur"
    config_type = BlurConfig

    def __init__(self, config: BlurConfig | None = None, seed: int = 0):
        super().__init__(config or BlurConfig(), seed)

    def build(self):
        a, b = self.config.widths
        self._conv("conv1", 3, a, 5)
        self._conv("conv2", a, b, 5)
        if self.config.batch_norm:
            self._bn("conv1.bn", a)
            self._bn("conv2.bn", b)
        self._linear("fc", b, 1)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"blur detector input must be [N, 3, H, W], got {x.shape}")
        h = x
        for name in ("conv1", "conv2"):
            h = self.conv(h, name, 4)
            if self.config.batch_norm:
                # centring lets the ReLU respond to texture energy rather than brightness
                h = self.bn(h, f"{name}.bn", training)
            h = relu(h)
        return sigmoid(self.dense(global_avg_pool(h), "fc"))

    def predict(self, thumbs, batch_size: int = 4) -> np.ndarray:
        thumbs = np.asarray(thumbs)
        if thumbs.ndim == 3:
            thumbs = thumbs[None]
        with no_grad():
            return np.concatenate(
                [
                    self.forward(Tensor(to_input(thumbs[i : i + batch_size]))).data[:, 0]
                    for i in range(0, len(thumbs), batch_size)
                ]
            )


def blur_detect_forward(thumb, net: BlurNet) -> float:
    return float(net.predict(thumb)[0])
