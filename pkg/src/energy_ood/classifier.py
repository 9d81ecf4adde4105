"""Classifiers producing raw logits, their initialization and pretraining.

Two architectures are provided:

``linear:D=<d>,C=<c>``
    ``f(x) = W x`` with ``W`` of shape (C, D) and no bias. Row ``i`` of ``W``
    is the representation of class ``i``.
``convnet:small,C=<c>[,in=<ch>x<h>x<w>]``
    conv3x3(8) - relu - maxpool2 - conv3x3(16) - relu - maxpool2 -
    dense(64) - relu - dense(C). Input defaults to 1x28x28.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as tn
from .errors import ContractError, DataError, DimensionError, ParameterError
from .optim import sgd_step
from .rng import substream
from .tensor import GradTape, Tensor

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

log = logging.getLogger(__name__)


class Classifier:
    """Common surface: ordered named parameters and a differentiable forward."""

    descriptor: str
    num_classes: int
    input_shape: tuple

    def __init__(self, params: dict):
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
                       for k, v in params.items()}
        expected = self.param_shapes()
        if list(self.params) != list(expected):
            raise ParameterError(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"parameter {name}: shape {self.params[name].shape}, expected {shape}")

    def param_shapes(self) -> dict:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return list(self.params.values())

    def with_params(self, arrays) -> "Classifier":
        """Copy of this model with parameter values replaced (same order).

        Tensors are used as given, so a forward pass can be differentiated
        with respect to them; arrays become fresh trainable tensors.
        """
        new = dict(zip(self.params, (a if isinstance(a, Tensor) else Tensor(a, requires_grad=True) for a in arrays)))
        return type(self)._from_params(self, new)

    @classmethod
    def _from_params(cls, template, params):
        raise NotImplementedError

    def check_input(self, x: Tensor):
        if x.ndim < 2 or x.shape[1:] != self.input_shape:
            if not (isinstance(self, LinearClassifier) and x.ndim >= 2
                    and math.prod(x.shape[1:]) == self.input_shape[0]):
                raise DimensionError(
                    f"{self.descriptor}: input shape {x.shape} does not match per-sample shape {self.input_shape}")


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class LinearClassifier(Classifier):
    """Bias-free linear map ``x -> W x``."""

    def __init__(self, weight, bound: float | None = None):
        w = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        if w.ndim != 2:
            raise DimensionError(f"weight must be a matrix, got shape {w.shape}")
        self.num_classes, self.dim = w.shape
        self.input_shape = (self.dim,)
        self.descriptor = f"linear:D={self.dim},C={self.num_classes}"
        self.bound = bound
        super().__init__({"weight": w})
        if bound is not None:
            if bound <= 0:
                raise ParameterError("representation bound must be positive")
            norms = np.linalg.norm(w.data, axis=1)
            if np.any(norms > bound):
                raise ContractError(f"class representation norm {norms.max():.6g} exceeds bound {bound}")

    @classmethod
    def _from_params(cls, template, params):
        return cls(params["weight"], bound=template.bound)

    @classmethod
    def init(cls, dim: int, num_classes: int, rng) -> "LinearClassifier":
        return cls(_uniform_init(rng, (num_classes, dim), dim))

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    def param_shapes(self):
        return {"weight": (self.num_classes, self.dim)}

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            x = tn.flatten(x)
        return tn.matmul(x, tn.transpose(self.params["weight"]))


class SmallConvNet(Classifier):
    """Two conv blocks and a one-hidden-layer dense head."""

    channels = (8, 16)
    hidden = 64

    def __init__(self, params: dict, num_classes: int, input_shape=(1, 28, 28)):
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        c, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ParameterError(f"convnet input {h}x{w} must be divisible by 4")
        self.descriptor = f"convnet:small,C={self.num_classes},in={c}x{h}x{w}"
        super().__init__(params)

    @classmethod
    def _from_params(cls, template, params):
        return cls(params, template.num_classes, template.input_shape)

    def param_shapes(self):
        c, h, w = self.input_shape
        c1, c2 = self.channels
        flat = c2 * (h // 4) * (w // 4)
        return {
            "conv1.weight": (c1, c, 3, 3),
            "conv1.bias": (c1,),
            "conv2.weight": (c2, c1, 3, 3),
            "conv2.bias": (c2,),
            "fc1.weight": (self.hidden, flat),
            "fc1.bias": (self.hidden,),
            "fc2.weight": (self.num_classes, self.hidden),
            "fc2.bias": (self.num_classes,),
        }

    @classmethod
    def init(cls, num_classes: int, rng, input_shape=(1, 28, 28)) -> "SmallConvNet":
        template = cls.__new__(cls)
        template.num_classes = num_classes
        template.input_shape = tuple(input_shape)
        params = {}
        for name, shape in template.param_shapes().items():
            layer = name.split(".")[0]
            wshape = template.param_shapes()[layer + ".weight"]
            fan_in = math.prod(wshape[1:])
            params[name] = _uniform_init(rng, shape, fan_in)
        return cls(params, num_classes, input_shape)

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = tn.relu(tn.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1))
        h = tn.max_pool2d(h, 2)
        h = tn.relu(tn.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
        h = tn.max_pool2d(h, 2)
        h = tn.flatten(h)
        h = tn.relu(tn.add(tn.matmul(h, tn.transpose(p["fc1.weight"])), p["fc1.bias"]))
        return tn.add(tn.matmul(h, tn.transpose(p["fc2.weight"])), p["fc2.bias"])


_LINEAR_RE = re.compile(r"^linear:D=(\d+),C=(\d+)$")
_CONV_RE = re.compile(r"^convnet:small,C=(\d+)(?:,in=(\d+)x(\d+)x(\d+))?$")


def parse_descriptor(descriptor: str) -> dict:
    m = _LINEAR_RE.match(descriptor)
    if m:
        return {"kind": "linear", "D": int(m.group(1)), "C": int(m.group(2))}
    m = _CONV_RE.match(descriptor)
    if m:
        shape = (1, 28, 28) if m.group(2) is None else tuple(int(m.group(i)) for i in (2, 3, 4))
        return {"kind": "convnet", "C": int(m.group(1)), "in": shape}
    raise ParameterError(f"unrecognised architecture descriptor {descriptor!r}")


def build_model(descriptor: str, seed: int = 0) -> Classifier:
    """Freshly initialized model; weights come from the ``init`` substream."""
    spec = parse_descriptor(descriptor)
    rng = substream(seed, "init")
    if spec["kind"] == "linear":
        return LinearClassifier.init(spec["D"], spec["C"], rng)
    return SmallConvNet.init(spec["C"], rng, spec["in"])


def model_from_arrays(descriptor: str, arrays: dict) -> Classifier:
    spec = parse_descriptor(descriptor)
    if spec["kind"] == "linear":
        return LinearClassifier(arrays["weight"])
    return SmallConvNet(dict(arrays), spec["C"], spec["in"])


def logits(model: Classifier, x) -> Tensor:
    """Raw (pre-softmax) class scores for the batch ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    model.check_input(x)
    return model.forward(x)


def predict_logits(model: Classifier, images, batch_size: int = 500) -> np.ndarray:
    """Logits for a large array, evaluated in chunks without recording a tape."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return np.zeros((0, model.num_classes))
    out = [logits(model, Tensor._wrap(images[i:i + batch_size])).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("labels must be a 1-D array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes
                        or not np.all(np.equal(np.mod(labels, 1), 0))):
        raise DataError(f"labels must be integers in [0, {num_classes})")
    return labels.astype(np.intp)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    """Defaults are the desk-scale recipe (10 epochs; lr 0.05 reaches 95% on the 6k MNIST subset)."""

    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError("pretrain config needs epochs >= 0, batch_size >= 1, lr > 0")


@dataclass
class PretrainResult:
    model: Classifier
    checkpoint: Checkpoint
    epoch_losses: list = field(default_factory=list)


def pretrain(model: Classifier, dataset, config: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Train ``model`` with softmax cross-entropy and SGD + momentum.

    ``dataset`` needs ``images`` and integer ``labels``. Each epoch visits a
    fresh permutation from the ``training`` substream; the last partial batch
    is kept. The recorded ``id_accuracy`` is measured on the training data.
    """
    from .checkpoint import checkpoint_from_model
    from .objectives import cross_entropy

    labels = check_labels(dataset.labels, model.num_classes)
    images = np.asarray(dataset.images, dtype=np.float64)
    n = len(images)
    if n == 0:
        raise DataError("cannot pretrain on an empty dataset")
    current = model
    state = None
    epoch_losses = []
    for epoch in range(config.epochs):
        order = substream(config.seed, "training", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            params = current.parameters()
            with GradTape() as tape:
                loss = cross_entropy(logits(current, Tensor._wrap(images[idx])), labels[idx])
            grads = tape.backward(loss, params)
            arrays, state = sgd_step([p.data for p in params], grads, config.lr,
                                     config.momentum, config.weight_decay, state)
            current = current.with_params(arrays)
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)
        log.info("pretrain epoch %d loss %.6f", epoch + 1, epoch_losses[-1])
    acc = float(np.mean(predict_logits(current, images).argmax(axis=1) == labels))
    meta = {
        "stage": "pretrain",
        "epochs": config.epochs,
        "seed": config.seed,
        "dataset_id": getattr(dataset, "id", None),
        "id_accuracy": acc,
        "epoch_losses": epoch_losses,
    }
    return PretrainResult(current, checkpoint_from_model(current, meta), epoch_losses)
