"""The two-input Deep-Q network, the supervised baseline, and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Conv3dSpec, Tensor
from .errors import FormatError

CHECKPOINT_VERSION = 1
FC_SIZES = (512, 256, 64)
PREDCORR_NODES = 64


@dataclass(frozen=True)
class ShapeChain:
    input_dims: tuple[int, int, int]
    layer_dims: tuple[tuple[int, int, int], ...]
    out_channels: int

    @property
    def flatten_size(self) -> int:
        return int(np.prod(self.layer_dims[-1])) * self.out_channels


def derive_conv_shapes(input_dims: Sequence[int], specs: Sequence[Conv3dSpec]) -> ShapeChain:
    """Spatial dims after each conv layer, and the flattened trunk size."""
    dims = tuple(int(d) for d in input_dims)
    chain = []
    cur = dims
    for spec in specs:
        cur = spec.output_dims(cur)
        chain.append(cur)
    return ShapeChain(dims, tuple(chain), specs[-1].out_channels)


def trunk_specs(in_channels: int = 1) -> tuple[Conv3dSpec, Conv3dSpec]:
    return Conv3dSpec(in_channels, 32), Conv3dSpec(32, 64)


class _Net:
    """Shared parameter bookkeeping for both networks."""

    activation = "relu"

    def __init__(self, input_dims: Sequence[int], seed: int = 0, dtype=np.float32):
        self.input_dims = tuple(int(d) for d in input_dims)
        self.dtype = np.dtype(dtype)
        self.specs = trunk_specs()
        self.shapes = derive_conv_shapes(self.input_dims, self.specs)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def _conv(self, name: str, spec: Conv3dSpec) -> None:
        k = int(np.prod(spec.kernel))
        self.params[f"{name}.weight"] = ad.glorot_init(
            spec.in_channels * k, spec.out_channels * k, self._rng, spec.weight_shape, self.dtype)
        self.params[f"{name}.bias"] = Tensor(np.zeros(spec.out_channels, self.dtype), requires_grad=True)

    def _dense(self, name: str, n_in: int, n_out: int) -> None:
        self.params[f"{name}.weight"] = ad.glorot_init(n_in, n_out, self._rng, dtype=self.dtype)
        self.params[f"{name}.bias"] = Tensor(np.zeros(n_out, self.dtype), requires_grad=True)

    def _build_trunk(self) -> None:
        self._conv("conv1", self.specs[0])
        self._conv("conv2", self.specs[1])
        sizes = (self.shapes.flatten_size, *FC_SIZES)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
            self._dense(f"fc{i}", a, b)

    def _layer(self, x: Tensor, name: str, act: str) -> Tensor:
        return ad.dense(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], act)

    def _as_batch(self, volumes) -> Tensor:
        arr = np.asarray(volumes.data if isinstance(volumes, Tensor) else volumes)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.shape[1:] != self.input_dims:
            raise ValueError(f"volume dims {arr.shape[1:]} do not match network dims {self.input_dims}")
        if isinstance(volumes, Tensor) and volumes.requires_grad:
            return ad.reshape(volumes, (arr.shape[0], 1, *self.input_dims))
        return Tensor(arr.astype(self.dtype, copy=False)[:, None])

    def _trunk(self, x: Tensor) -> Tensor:
        act = ad.ACTIVATIONS[self.activation]
        p = self.params
        h = act(ad.conv3d(x, self.specs[0], p["conv1.weight"], p["conv1.bias"]))
        h = act(ad.conv3d(h, self.specs[1], p["conv2.weight"], p["conv2.bias"]))
        h = ad.flatten(h)
        for i in range(1, len(FC_SIZES) + 1):
            h = self._layer(h, f"fc{i}", self.activation)
        return h

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=self.dtype)


class DqnNetwork(_Net):
    """Conv trunk + FC chain on the volume, a 64-node branch on pred_corr,
    concatenated into a 128-node layer and mapped to Q(s, 0), Q(s, 1)."""

    magic = b"DQNW"

    def __init__(self, input_dims: Sequence[int], seed: int = 0, dtype=np.float32):
        super().__init__(input_dims, seed, dtype)
        self._build_trunk()
        self._dense("predcorr", 1, PREDCORR_NODES)
        self._dense("head", FC_SIZES[-1] + PREDCORR_NODES, 2)

    def forward(self, volumes, pred_corr) -> Tensor:
        """Q-values, shape (B, 2), for a batch of volumes (B, X, Y, Z) or one (X, Y, Z)."""
        x = self._as_batch(volumes)
        pc = np.asarray(pred_corr, dtype=self.dtype).reshape(-1, 1)
        if pc.shape[0] != x.shape[0]:
            raise ValueError(f"{pc.shape[0]} pred_corr values for {x.shape[0]} volumes")
        img = self._trunk(x)
        branch = self._layer(Tensor(pc), "predcorr", "relu")
        return self._layer(ad.concat([img, branch], axis=1), "head", "identity")

    def q_values(self, volumes, pred_corr) -> np.ndarray:
        with ad.no_grad():
            return self.forward(volumes, pred_corr).data


def dqn_forward(net: DqnNetwork, volume, pred_corr: int) -> tuple[float, float]:
    q = net.q_values(volume, [pred_corr])[0]
    return float(q[0]), float(q[1])


class SdlNetwork(_Net):
    """Same conv trunk and FC chain with ELU, one sigmoid output node."""

    magic = b"SDLW"
    activation = "elu"

    def __init__(self, input_dims: Sequence[int], seed: int = 0, dtype=np.float32):
        super().__init__(input_dims, seed, dtype)
        self._build_trunk()
        self._dense("out", FC_SIZES[-1], 1)

    def forward(self, volumes) -> Tensor:
        """Probabilities of class 1, shape (B,)."""
        h = self._trunk(self._as_batch(volumes))
        p = self._layer(h, "out", "sigmoid")
        return ad.reshape(p, (p.shape[0],))

    def probabilities(self, volumes) -> np.ndarray:
        with ad.no_grad():
            return self.forward(volumes).data


def sdl_forward(net: SdlNetwork, volume) -> float:
    return float(net.probabilities(volume)[0])


def decide(p) -> np.ndarray:
    """Threshold at 0.5; a tie goes to class 1."""
    return (np.asarray(p) >= 0.5).astype(np.int64)


# checkpoint container --------------------------------------------------------
#
# magic (4) | u32 version | u32 group count | per group:
#   u32 name length | utf-8 name | u32 ndim | u32 dims... | float32 data
# all little-endian.

def checkpoint_bytes(params: dict[str, np.ndarray], magic: bytes) -> bytes:
    out = [magic, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.asarray(arr, dtype="<f4").tobytes(order="C"))
    return b"".join(out)


def parse_checkpoint(buf: bytes, magic: bytes) -> dict[str, np.ndarray]:
    def need(pos: int, n: int, what: str):
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)

    need(0, 12, "header")
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, nlen, "name")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        need(pos, 4, "ndim")
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, 4 * ndim, "shape")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        need(pos, 4 * n, f"data of {name}")
        params[name] = np.frombuffer(buf, "<f4", n, pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return params


def save_checkpoint(path: str | Path, net: _Net) -> None:
    Path(path).write_bytes(checkpoint_bytes(net.state_dict(), net.magic))


def load_checkpoint(path: str | Path, net: _Net) -> _Net:
    net.load_state_dict(parse_checkpoint(Path(path).read_bytes(), net.magic))
    return net
