"""Deformation and scene MLPs.

The deformation net maps an interpolated embedding and time to an
embedding offset; the scene net maps the deformed embedding and time to
colour and SDF.  At t == 0 (the canonical state) the deformation net is
bypassed and the offset is exactly zero.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

_MAGIC = b"DSNETS\x00"
_VERSION = 2


def encode_time(t: float, n_freqs: int = 4) -> np.ndarray:
    """[t, sin(2^k pi t), cos(2^k pi t) for k < n_freqs]."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        log.warning("time %g outside [0, 1]; clamping", t)
        t = min(max(t, 0.0), 1.0)
    k = 2.0 ** np.arange(n_freqs) * np.pi * t
    out = np.empty(1 + 2 * n_freqs)
    out[0] = t
    out[1::2] = np.sin(k)
    out[2::2] = np.cos(k)
    return out


def _uniform_layer(rng, n_in, n_out, name, zero=False):
    bound = 1.0 / np.sqrt(n_in)
    if zero:
        w = np.zeros((n_out, n_in))
        b = np.zeros(n_out)
    else:
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
    return ad.Param(w, f"{name}.weight"), ad.Param(b, f"{name}.bias")


class _MLP:
    def _tape_params(self, tape):
        return [(tape.param(w), tape.param(b)) for w, b in self.layers]

    def params(self) -> list[ad.Param]:
        return [p for layer in self.layers for p in layer]


class DeformationNet(_MLP):
    """(e, encode_time(t)) -> 3 ReLU hidden layers -> offset of length embedding_dim."""

    def __init__(self, embedding_dim: int = 16, hidden: int = 128, n_freqs: int = 4, rng=None, n_hidden: int = 3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embedding_dim = embedding_dim
        self.n_freqs = n_freqs
        dims = [embedding_dim + 1 + 2 * n_freqs] + [hidden] * n_hidden
        self.layers = [_uniform_layer(rng, a, b, f"deform.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.layers.append(_uniform_layer(rng, hidden, embedding_dim, "deform.out", zero=True))


class SceneNet(_MLP):
    """(e + offset, encode_time(t)) -> 3 ReLU hidden layers.

    The SDF is a linear read-out of the third hidden layer; colour is a
    linear + sigmoid head on the same activations.  With ``use_time=False``
    the time features are left out and the net is a pure canonical field.
    """

    def __init__(self, embedding_dim: int = 16, hidden: int = 128, n_freqs: int = 4, rng=None, n_hidden: int = 3,
                 use_time: bool = True):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.embedding_dim = embedding_dim
        self.n_freqs = n_freqs
        self.use_time = use_time
        dims = [embedding_dim + (1 + 2 * n_freqs if use_time else 0)] + [hidden] * n_hidden
        self.layers = [_uniform_layer(rng, a, b, f"scene.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.layers.append(_uniform_layer(rng, hidden, 1, "scene.sdf"))
        self.layers.append(_uniform_layer(rng, hidden, 3, "scene.color"))


@dataclass
class FieldOutput:
    color: ad.Var  # (M, 3)
    sdf: ad.Var  # (M,)
    offset: ad.Var  # (M, N)


class NeuralField:
    """The deformation and scene networks together."""

    def __init__(self, embedding_dim: int = 16, hidden: int = 128, n_freqs: int = 4, seed: int = 0,
                 scene_time: bool = True):
        rng = np.random.default_rng(seed)
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.n_freqs = n_freqs
        self.scene_time = scene_time
        self.deform_net = DeformationNet(embedding_dim, hidden, n_freqs, rng)
        self.scene_net = SceneNet(embedding_dim, hidden, n_freqs, rng, use_time=scene_time)

    def params(self) -> list[ad.Param]:
        return self.deform_net.params() + self.scene_net.params()

    def _time_input(self, tape, t, n):
        return tape.const(np.broadcast_to(encode_time(t, self.n_freqs), (n, 1 + 2 * self.n_freqs)))

    def deform(self, tape: ad.Tape, e: ad.Var, t: float) -> ad.Var:
        e = tape.lift(e)
        squeeze = e.value.ndim == 1
        if squeeze:
            e = ad.reshape(e, (1, -1))
        n = e.value.shape[0]
        if e.value.shape[1] != self.embedding_dim:
            raise ValueError(f"embedding has {e.value.shape[1]} entries, expected {self.embedding_dim}")
        if t == 0.0:
            out = tape.const(np.zeros((n, self.embedding_dim)))
        else:
            h = ad.concat([e, self._time_input(tape, t, n)], axis=1)
            layers = self.deform_net._tape_params(tape)
            for w, b in layers[:-1]:
                h = ad.relu(ad.forward_linear(h, w, b))
            out = ad.forward_linear(h, *layers[-1])
        return ad.reshape(out, (self.embedding_dim,)) if squeeze else out

    def scene(self, tape: ad.Tape, e: ad.Var, t: float) -> tuple[ad.Var, ad.Var]:
        n = e.value.shape[0]
        h = ad.concat([e, self._time_input(tape, t, n)], axis=1) if self.scene_time else e
        layers = self.scene_net._tape_params(tape)
        for w, b in layers[:3]:
            h = ad.relu(ad.forward_linear(h, w, b))
        sdf = ad.reshape(ad.forward_linear(h, *layers[3]), (n,))
        color = ad.sigmoid(ad.forward_linear(h, *layers[4]))
        return color, sdf

    def regress(self, tape: ad.Tape, e: ad.Var, t: float) -> FieldOutput:
        e = tape.lift(e)
        offset = self.deform(tape, e, t)
        deformed = e if t == 0.0 else e + offset
        color, sdf = self.scene(tape, deformed, t)
        return FieldOutput(color, sdf, offset)

    def evaluate(self, e: np.ndarray, t: float, chunk: int = 65536):
        """Numpy-only (color, sdf) for a batch of embeddings."""
        colors, sdfs = [], []
        for s in range(0, len(e), chunk):
            tape = ad.Tape()
            out = self.regress(tape, tape.const(e[s : s + chunk]), t)
            colors.append(out.color.value)
            sdfs.append(out.sdf.value)
            tape.clear()
        if not colors:
            return np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(colors), np.concatenate(sdfs)

    # snapshots ---------------------------------------------------------

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(buf, **{p.name: p.value for p in self.params()})
        header = struct.pack("<IIIII", _VERSION, self.embedding_dim, self.hidden, self.n_freqs, int(self.scene_time))
        with open(path, "wb") as fh:
            fh.write(_MAGIC + header + buf.getvalue())

    @classmethod
    def load(cls, path) -> "NeuralField":
        data = open(path, "rb").read()
        if not data.startswith(_MAGIC):
            raise ValueError(f"{path}: not a network snapshot")
        off = len(_MAGIC)
        version, dim, hidden, n_freqs, scene_time = struct.unpack_from("<IIIII", data, off)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        field = cls(dim, hidden, n_freqs, scene_time=bool(scene_time))
        arrays = np.load(io.BytesIO(data[off + struct.calcsize("<IIIII") :]))
        for p in field.params():
            p.value = arrays[p.name].copy()
            p.grad = np.zeros_like(p.value)
            p.moment1 = np.zeros_like(p.value)
            p.moment2 = np.zeros_like(p.value)
        return field
