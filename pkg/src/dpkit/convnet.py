"""Four-conv, one-linear ConvNet for 3x32x32 inputs and 10 classes.

Layout (padding 1, stride 1 on every conv)::

    conv3x3(3 -> w1) relu conv3x3(w1 -> w2) relu avgpool2
    conv3x3(w2 -> w3) relu conv3x3(w3 -> w4) relu avgpool2
    flatten linear(w4 * 8 * 8 -> 10)
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dpkit import autograd as ag
from dpkit.autograd import Tensor
from dpkit.errors import ConfigError, ShapeError

DEFAULT_WIDTHS = (32, 64, 128, 128)
INPUT_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
CHECKPOINT_MAGIC = "DPKIT-CHECKPOINT"

PARAM_NAMES = (
    "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
    "conv3.weight", "conv3.bias", "conv4.weight", "conv4.bias",
    "fc.weight", "fc.bias",
)


def param_shapes(widths=DEFAULT_WIDTHS) -> list[tuple[int, ...]]:
    widths = _check_widths(widths)
    chans = (INPUT_SHAPE[0],) + widths
    shapes = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        shapes += [(cout, cin, 3, 3), (cout,)]
    feat = widths[-1] * (INPUT_SHAPE[1] // 4) * (INPUT_SHAPE[2] // 4)
    shapes += [(NUM_CLASSES, feat), (NUM_CLASSES,)]
    return shapes


def param_count(widths=DEFAULT_WIDTHS) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(widths))


def _check_widths(widths) -> tuple[int, ...]:
    widths = tuple(widths)
    if len(widths) != 4:
        raise ConfigError(f"need exactly 4 conv widths, got {len(widths)}")
    for w in widths:
        if int(w) != w or w < 1:
            raise ConfigError(f"conv widths must be positive integers, got {widths}")
    return tuple(int(w) for w in widths)


@dataclass(frozen=True)
class ConvNetParams:
    tensors: tuple[Tensor, ...]
    widths: tuple[int, ...] = DEFAULT_WIDTHS

    def __post_init__(self):
        expected = param_shapes(self.widths)
        got = [t.shape for t in self.tensors]
        if got != [tuple(s) for s in expected]:
            raise ShapeError(f"parameter shapes {got} do not chain for widths {self.widths}")

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors])

    @classmethod
    def from_flat(cls, vec, widths=DEFAULT_WIDTHS) -> "ConvNetParams":
        vec = np.asarray(vec, dtype=np.float64)
        shapes = param_shapes(widths)
        total = sum(int(np.prod(s)) for s in shapes)
        if vec.shape != (total,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({total},)")
        out, col = [], 0
        for name, s in zip(PARAM_NAMES, shapes):
            n = int(np.prod(s))
            out.append(Tensor(vec[col:col + n].reshape(s), requires_grad=True, name=name))
            col += n
        return cls(tuple(out), tuple(widths))

    def named(self):
        return list(zip(PARAM_NAMES, self.tensors))


def init(seed: int, widths=DEFAULT_WIDTHS) -> ConvNetParams:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases."""
    widths = _check_widths(widths)
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in zip(PARAM_NAMES, param_shapes(widths)):
        if name.endswith("bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors.append(Tensor(data, requires_grad=True, name=name))
    return ConvNetParams(tuple(tensors), widths)


def forward(params: ConvNetParams, batch) -> Tensor:
    """Logits [B, 10] for a batch of normalized images [B, 3, 32, 32]."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected input [B, 3, 32, 32], got {x.shape}")
    w1, b1, w2, b2, w3, b3, w4, b4, fw, fb = params.tensors
    h = ag.relu(ag.conv2d(x, w1, b1, padding=1))
    h = ag.relu(ag.conv2d(h, w2, b2, padding=1))
    h = ag.avgpool2d(h, 2)
    h = ag.relu(ag.conv2d(h, w3, b3, padding=1))
    h = ag.relu(ag.conv2d(h, w4, b4, padding=1))
    h = ag.avgpool2d(h, 2)
    return ag.linear(ag.flatten(h), fw, fb)


def predict(params: ConvNetParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Logits for many images, evaluated in chunks without recording a tape."""
    outs = [forward(params, images[i:i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, NUM_CLASSES))


def save_checkpoint(params: ConvNetParams, path) -> None:
    """Text manifest of names and shapes, then the flat little-endian float64 payload."""
    lines = [CHECKPOINT_MAGIC + " 1", "widths " + " ".join(map(str, params.widths)),
             f"tensors {len(params.tensors)}"]
    for name, t in params.named():
        lines.append(name + " " + " ".join(map(str, t.shape)))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> ConvNetParams:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    first = buf.readline().decode("ascii").split()
    if first != [CHECKPOINT_MAGIC, "1"]:
        raise ValueError(f"{path}: not a dpkit checkpoint")
    widths = tuple(int(v) for v in buf.readline().decode("ascii").split()[1:])
    count = int(buf.readline().decode("ascii").split()[1])
    shapes = []
    for _ in range(count):
        parts = buf.readline().decode("ascii").split()
        shapes.append(tuple(int(v) for v in parts[1:]))
    if buf.readline().decode("ascii").strip() != "end":
        raise ValueError(f"{path}: malformed checkpoint header")
    if shapes != [tuple(s) for s in param_shapes(widths)]:
        raise ShapeError(f"{path}: manifest shapes do not match widths {widths}")
    payload = np.frombuffer(raw[buf.tell():], dtype="<f8")
    return ConvNetParams.from_flat(payload.astype(np.float64), widths)
