"""Split multimodal LSTM autoencoder, fusion layer and MLP classifier.

Each modality owns a two-layer LSTM encoder (d -> h1 -> h2) and a two-layer
LSTM decoder (h2 -> h1 -> d). All encoders end at the same width ``h2`` so any
decoder can consume any modality's code (cross-reconstruction).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

MODALITIES = ("A", "B")


@dataclass(frozen=True)
class ArchSpec:
    input_dims: dict[str, int]
    h1: dict[str, int]
    h2: int
    seq_len: int = 10
    names: dict[str, str] = field(default_factory=lambda: {"A": "A", "B": "B"})

    def __post_init__(self):
        if set(self.input_dims) != set(self.h1):
            raise ValueError("input_dims and h1 must cover the same modalities")
        if self.h2 <= 0 or self.seq_len <= 0:
            raise ValueError("h2 and seq_len must be positive")
        for m in self.input_dims:
            if self.input_dims[m] <= 0 or self.h1[m] <= 0:
                raise ValueError(f"non-positive dimension for modality {m}")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.input_dims)

    def layer_widths(self, modality: str) -> tuple[int, int]:
        return self.h1[modality], self.h2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(
            input_dims=dict(d["input_dims"]),
            h1=dict(d["h1"]),
            h2=int(d["h2"]),
            seq_len=int(d.get("seq_len", 10)),
            names=dict(d.get("names", {"A": "A", "B": "B"})),
        )


# Detail-architecture presets. UR-Fall's h1 cell reads "2,4": 2 for the
# low-dimensional sensor stream, 4 for the visual one.
_DIMS = {
    "mhealth": ({"Acce": 9, "Gyro": 6, "Mage": 6}, {"Acce": 4, "Gyro": 4, "Mage": 4}, 24),
    "urfall": ({"Acce": 3, "RGB": 512, "Depth": 8}, {"Acce": 2, "RGB": 4, "Depth": 4}, 32),
    "opp": ({"Acce": 24, "Gyro": 15}, {"Acce": 10, "Gyro": 10}, 24),
}


def preset(dataset: str, mod_a: str, mod_b: str, seq_len: int = 10) -> ArchSpec:
    dims, h1, h2 = _DIMS[dataset.lower()]
    return ArchSpec(
        input_dims={"A": dims[mod_a], "B": dims[mod_b]},
        h1={"A": h1[mod_a], "B": h1[mod_b]},
        h2=h2,
        seq_len=seq_len,
        names={"A": mod_a, "B": mod_b},
    )


def lstm_param_count(d_in: int, hidden: int) -> int:
    return 4 * (d_in + hidden) * hidden + 4 * hidden


# ---------------------------------------------------------------------------


class LstmLayer:
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator | None = None, name: str = "lstm"):
        self.d_in, self.hidden = d_in, hidden
        bound = 1.0 / np.sqrt(d_in + hidden)
        draw = (lambda shape: rng.uniform(-bound, bound, size=shape)) if rng is not None else np.zeros
        self.w_ih = Tensor(draw((d_in, 4 * hidden)), requires_grad=True, name=f"{name}.w_ih")
        self.w_hh = Tensor(draw((hidden, 4 * hidden)), requires_grad=True, name=f"{name}.w_hh")
        self.bias = Tensor(draw((4 * hidden,)), requires_grad=True, name=f"{name}.bias")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_ih", self.w_ih
        yield "w_hh", self.w_hh
        yield "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise ShapeError("lstm input", x.shape, (None, None, self.d_in))
        return ag.lstm(x, self.w_ih, self.w_hh, self.bias)


class _Module:
    """Parameter container with ordered, dotted names."""

    def children(self) -> Iterator[tuple[str, object]]:
        raise NotImplementedError

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for cname, child in self.children():
            for pname, p in child.named_parameters():
                yield f"{cname}.{pname}", p

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(own) ^ set(state))}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"load {n}", p.shape, state[n].shape)
            p.data = np.array(state[n], dtype=ag.DTYPE)


class Encoder(_Module):
    def __init__(self, d_in: int, h1: int, h2: int, rng=None, name: str = "enc"):
        self.lstm1 = LstmLayer(d_in, h1, rng, f"{name}.lstm1")
        self.lstm2 = LstmLayer(h1, h2, rng, f"{name}.lstm2")

    def children(self):
        yield "lstm1", self.lstm1
        yield "lstm2", self.lstm2


class Decoder(_Module):
    def __init__(self, h2: int, h1: int, d_out: int, rng=None, name: str = "dec"):
        self.lstm1 = LstmLayer(h2, h1, rng, f"{name}.lstm1")
        self.lstm2 = LstmLayer(h1, d_out, rng, f"{name}.lstm2")

    def children(self):
        yield "lstm1", self.lstm1
        yield "lstm2", self.lstm2


def encode(encoder: Encoder, x_seq: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(e1, e2, h)``: final hidden states of both layers; ``h`` is ``e2``.

    Accepts a single ``(T, d)`` sequence or a ``(B, T, d)`` batch.
    """
    x = ag.as_tensor(x_seq)
    single = x.ndim == 2
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    s1 = encoder.lstm1(x)
    s2 = encoder.lstm2(s1)
    e1, e2 = s1[:, -1, :], s2[:, -1, :]
    if single:
        e1, e2 = e1[0], e2[0]
    return e1, e2, e2


def decode(decoder: Decoder, h: Tensor, seq_len: int) -> Tensor:
    """Reconstruct a sequence by feeding ``h`` at every decoder step."""
    h = ag.as_tensor(h)
    single = h.ndim == 1
    if single:
        h = ag.reshape(h, (1, h.shape[0]))
    if h.shape[-1] != decoder.lstm1.d_in:
        raise ShapeError("decode", h.shape, (decoder.lstm1.d_in,))
    out = decoder.lstm2(decoder.lstm1(ag.repeat_steps(h, seq_len)))
    return out[0] if single else out


def fuse(*embeddings: Tensor | None) -> Tensor:
    """Concatenate embeddings along the last axis; absent parts are skipped."""
    parts = [ag.as_tensor(e) for e in embeddings if e is not None and np.shape(getattr(e, "data", e))[-1] > 0]
    if not parts:
        raise ValueError("fuse needs at least one non-empty embedding")
    if len(parts) == 1:
        return parts[0]
    return ag.concat(parts)


class SplitAutoencoder(_Module):
    """Per-modality encoder/decoder pairs; unimodal models hold one pair."""

    def __init__(self, arch: ArchSpec, modalities: tuple[str, ...] | None = None, rng=None):
        self.arch = arch
        self.modalities = tuple(m for m in MODALITIES if m in (modalities or arch.modalities))
        self.encoders: dict[str, Encoder] = {}
        self.decoders: dict[str, Decoder] = {}
        for m in self.modalities:
            self.encoders[m] = Encoder(arch.input_dims[m], arch.h1[m], arch.h2, rng, f"enc_{m}")
        for m in self.modalities:
            self.decoders[m] = Decoder(arch.h2, arch.h1[m], arch.input_dims[m], rng, f"dec_{m}")

    def children(self):
        for m in self.modalities:
            yield f"enc_{m}", self.encoders[m]
        for m in self.modalities:
            yield f"dec_{m}", self.decoders[m]

    def modality_parameters(self, modality: str) -> dict[str, Tensor]:
        """Parameters of one modality's autoencoder (its encoder and decoder)."""
        return {n: p for n, p in self.named_parameters() if n.startswith((f"enc_{modality}.", f"dec_{modality}."))}

    def encode(self, modality: str, x: Tensor):
        return encode(self.encoders[modality], x)

    def decode(self, modality: str, h: Tensor) -> Tensor:
        return decode(self.decoders[modality], h, self.arch.seq_len)

    def copy(self) -> SplitAutoencoder:
        other = SplitAutoencoder(self.arch, self.modalities)
        other.load_state_dict(self.state_dict())
        return other

    def restricted(self, modalities: tuple[str, ...]) -> SplitAutoencoder:
        """A copy holding only ``modalities``."""
        other = SplitAutoencoder(self.arch, modalities)
        own = self.state_dict()
        other.load_state_dict({n: own[n] for n in other.parameters()})
        return other


def init_model(arch: ArchSpec, seed: int, modalities: tuple[str, ...] | None = None) -> SplitAutoencoder:
    """Deterministic uniform(+-1/sqrt(fan_in)) initialisation.

    The full two-modality model is always drawn so a unimodal model shares
    its parameters with the multimodal model of the same seed.
    """
    full = SplitAutoencoder(arch, rng=np.random.default_rng(seed))
    return full if modalities is None or tuple(modalities) == full.modalities else full.restricted(tuple(modalities))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng=None, name: str = "fc"):
        bound = 1.0 / np.sqrt(d_in)
        draw = (lambda shape: rng.uniform(-bound, bound, size=shape)) if rng is not None else np.zeros
        self.weight = Tensor(draw((d_in, d_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(draw((d_out,)), requires_grad=True, name=f"{name}.bias")

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


class Classifier(_Module):
    """Two affine layers with ReLU between."""

    def __init__(self, d_in: int, n_classes: int, hidden: int | None = None, rng=None):
        self.d_in, self.n_classes = d_in, n_classes
        self.hidden = hidden or d_in
        self.fc1 = Linear(d_in, self.hidden, rng, "fc1")
        self.fc2 = Linear(self.hidden, n_classes, rng, "fc2")

    def children(self):
        yield "fc1", self.fc1
        yield "fc2", self.fc2

    def __call__(self, h: Tensor) -> Tensor:
        return classify(self, h)


def classify(classifier: Classifier, h: Tensor) -> Tensor:
    h = ag.as_tensor(h)
    if h.shape[-1] != classifier.d_in:
        raise ShapeError("classify", h.shape, (classifier.d_in,))
    return classifier.fc2(ag.relu(classifier.fc1(h)))


def init_classifier(d_in: int, n_classes: int, seed: int, hidden: int | None = None) -> Classifier:
    return Classifier(d_in, n_classes, hidden, rng=np.random.default_rng(seed))


class LinearProbe(_Module):
    def __init__(self, d_in: int, n_classes: int, rng=None):
        self.fc = Linear(d_in, n_classes, rng, "fc")

    def children(self):
        yield "fc", self.fc

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc(h)


# ---------------------------------------------------------------------------
# checkpoints: npz with ordered parameter arrays plus a JSON header


def save_checkpoint(path: str | Path, model: SplitAutoencoder, classifier: Classifier | None = None, **meta) -> None:
    header = {"arch": model.arch.to_dict(), "modalities": list(model.modalities), "meta": meta}
    arrays = {f"ae/{n}": a for n, a in model.state_dict().items()}
    if classifier is not None:
        header["classifier"] = {"d_in": classifier.d_in, "n_classes": classifier.n_classes, "hidden": classifier.hidden}
        arrays.update({f"clf/{n}": a for n, a in classifier.state_dict().items()})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[SplitAutoencoder, Classifier | None, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        arch = ArchSpec.from_dict(header["arch"])
        model = SplitAutoencoder(arch, tuple(header["modalities"]))
        model.load_state_dict({k[3:]: z[k] for k in z.files if k.startswith("ae/")})
        clf = None
        if "classifier" in header:
            c = header["classifier"]
            clf = Classifier(c["d_in"], c["n_classes"], c["hidden"])
            clf.load_state_dict({k[4:]: z[k] for k in z.files if k.startswith("clf/")})
    return model, clf, header.get("meta", {})
