"""Compact convolutional regressor and its weight file format.

Architecture (defaults): four conv blocks ``conv -> batchnorm -> GELU`` with
8, 16, 32, 64 channels, 2x2 max pooling after the first two blocks, global
average pooling, ``Linear(64, 32) -> GELU -> Linear(32, 3) -> tanh``.

Weight files are little-endian binaries::

    magic b"NSERW" + version byte
    uint32 array count
    per array: uint16 name length, name (utf-8), uint8 ndim, uint32 dims..., float32 data

with a ``.json`` sidecar holding the architecture dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ShapeMismatch, WeightsMismatch
from .layers import GELU, BatchNorm, Conv2d, GlobalAvgPool, Linear, MaxPool2, Tanh, PLANAR_MAX_C, conv_planar, gelu, global_avg, im2col, pool_max, tanh_open

MAGIC = b"NSERW"
FORMAT_VERSION = 1


def default_arch(input_size=64, in_channels=2, channels=(8, 16, 32, 64), strides=(2, 1, 1, 1), pool_after=2, hidden=32) -> dict:
    return {
        "input": [int(input_size), int(input_size), int(in_channels)],
        "channels": [int(c) for c in channels],
        "strides": [int(s) for s in strides],
        "pool_after": int(pool_after),
        "hidden": [int(hidden)] if isinstance(hidden, int) else [int(h) for h in hidden],
        "outputs": 3,
    }


def arch_from_config(cfg) -> dict:
    st = cfg.student
    return default_arch(st.input_size, 2, st.channels, st.strides, 2, st.hidden)


def full_size_arch() -> dict:
    """The full-size configuration: 224x224x3 input, six blocks 16..512, head 512->256->3."""
    return default_arch(224, 3, (16, 32, 64, 128, 256, 512), (1,) * 6, 2, 256)


class StudentNet:
    def __init__(self, arch: dict | None = None, seed: int = 0, dtype=np.float32):
        self.arch = arch or default_arch()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        a = self.arch
        if len(a["channels"]) != len(a["strides"]):
            raise ShapeMismatch("channels and strides must have equal length")
        layers = []
        c_in = a["input"][2]
        for i, (c, s) in enumerate(zip(a["channels"], a["strides"])):
            layers += [Conv2d(c_in, c, 3, s, rng, dtype), BatchNorm(c, dtype=dtype), GELU()]
            if i < a["pool_after"]:
                layers.append(MaxPool2())
            c_in = c
        layers.append(GlobalAvgPool())
        for h in a["hidden"]:
            layers += [Linear(c_in, h, rng, dtype), GELU()]
            c_in = h
        layers += [Linear(c_in, a["outputs"], rng, dtype, gain=1.0), Tanh()]
        layers[0].input_grad = False
        self.layers = layers
        self.training = False
        self._plan = None

    # ------------------------------------------------------------------
    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{layer.kind}.{k}", layer, k, v

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                yield f"{i}.{layer.kind}.{k}", layer, k, v

    def n_params(self) -> int:
        return int(sum(v.size for *_, v in self.named_params()))

    def state(self) -> dict:
        out = {name: v.copy() for name, _, _, v in self.named_params()}
        out.update({name: v.copy() for name, _, _, v in self.named_buffers()})
        return out

    def load_state(self, state: dict) -> None:
        expected = {name: v.shape for name, _, _, v in self.named_params()}
        expected.update({name: v.shape for name, _, _, v in self.named_buffers()})
        if set(state) != set(expected):
            raise WeightsMismatch("weight names do not match the architecture")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise WeightsMismatch(f"{name}: shape {state[name].shape} != {shape}")
        for name, layer, k, _ in list(self.named_params()):
            layer.params[k] = np.asarray(state[name], dtype=self.dtype).copy()
        for name, layer, k, _ in list(self.named_buffers()):
            layer.buffers[k] = np.asarray(state[name], dtype=self.dtype).copy()
        self.invalidate()

    # ------------------------------------------------------------------
    def forward(self, x, training: bool | None = None) -> np.ndarray:
        """Batch (N, H, W, C) or single (H, W, C) input -> (N, 3) / (3,) in (-1, 1)."""
        training = self.training if training is None else training
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if list(x.shape[1:]) != list(self.arch["input"]):
            raise ShapeMismatch(f"input shape {x.shape[1:]} != {tuple(self.arch['input'])}")
        if training:
            self._plan = None  # batchnorm statistics move
            for layer in self.layers:
                x = layer.forward(x, training)
        else:
            x = self._infer(x)
        return x[0] if single else x

    def _fused_plan(self):
        """Eval-mode ops with batchnorm folded into the preceding conv/linear.

        Cached until ``invalidate`` is called; training forwards, load_state
        and the optimizer do that, code editing ``params`` directly must too.
        """
        if self._plan is not None:
            return self._plan
        plan = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and plan and plan[-1][0] in ("conv", "linear"):
                op, w, b, *rest = plan[-1]
                scale = layer.params["gamma"] / np.sqrt(layer.buffers["var"] + layer.eps)
                plan[-1] = (op, (w * scale).astype(self.dtype), ((b - layer.buffers["mean"]) * scale + layer.params["beta"]).astype(self.dtype), *rest)
            elif isinstance(layer, BatchNorm):
                plan.append(("bn", layer))
            elif isinstance(layer, Conv2d):
                plan.append(("conv", layer.params["w"], layer.params["b"], layer.k, layer.stride, layer.pad))
            elif isinstance(layer, Linear):
                plan.append(("linear", layer.params["w"], layer.params["b"]))
            else:
                plan.append((layer.kind, layer))
        self._plan = plan
        return plan

    def invalidate(self) -> None:
        self._plan = None

    def _infer(self, x):
        for op, *args in self._fused_plan():
            if op == "conv":
                w, b, k, s, p = args
                if x.shape[-1] <= PLANAR_MAX_C:
                    x = conv_planar(x, w, b, k, s, p)
                    continue
                cols, _, ho, wo = im2col(x, k, s, p)
                x = (cols @ w + b).reshape(x.shape[0], ho, wo, w.shape[1])
            elif op == "linear":
                x = x @ args[0] + args[1]
            elif op == "gelu":
                x = gelu(x)
            elif op == "maxpool":
                x = pool_max(x)
            elif op == "gap":
                x = global_avg(x)
            elif op == "tanh":
                x = tanh_open(x)
            else:
                x = args[0].forward(x, False)
        return x

    def backward(self, x, targets, training: bool = True):
        """MSE over the batch and all outputs; returns (loss, grads dict by param name)."""
        targets = np.asarray(targets, dtype=self.dtype)
        y = self.forward(x, training=training)
        if y.shape != targets.shape:
            raise ShapeMismatch(f"targets {targets.shape} != predictions {y.shape}")
        diff = y - targets
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        g = (2.0 / diff.size) * diff
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        grads = {name: layer.grads[k] for name, layer, k, _ in self.named_params()}
        return loss, grads

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        state = self.state()
        with open(path, "wb") as fh:
            fh.write(MAGIC + bytes([FORMAT_VERSION]))
            fh.write(struct.pack("<I", len(state)))
            for name in sorted(state):
                arr = np.ascontiguousarray(state[name], dtype="<f4")
                nb = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nb)) + nb)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
        sidecar = {"format_version": FORMAT_VERSION, "arch": self.arch, "arrays": {k: list(v.shape) for k, v in sorted(state.items())}}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, arch: dict | None = None, dtype=np.float32) -> "StudentNet":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"weights file {path} not found")
        try:
            sidecar = json.loads(path.with_suffix(".json").read_text())
        except (OSError, ValueError) as exc:
            raise WeightsMismatch(f"missing or unreadable sidecar for {path}: {exc}") from exc
        if arch is not None and sidecar["arch"] != arch:
            raise WeightsMismatch("weights were trained for a different architecture")
        state = read_weights(path)
        net = cls(sidecar["arch"], dtype=dtype)
        net.load_state(state)
        return net


def read_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise WeightsMismatch(f"{path}: bad magic")
    if data[5] != FORMAT_VERSION:
        raise WeightsMismatch(f"{path}: unsupported format version {data[5]}")
    pos = 6
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nl].decode("utf-8")
        pos += nl
        ndim = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return out
