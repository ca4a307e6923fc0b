"""Pre-LN transformer encoder with feature taps.

Architecture: token embedding, a learned position table and a second
("block") position table, an embedding layernorm, ``L`` pre-LN blocks
(multi-head self-attention and a 4d GELU feed-forward layer), a final
layernorm and an output head tied to the token embedding.  The parameter
count is ``V*d + 2*S*d + L*(12*d^2 + 13*d) + 4*d``.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (CheckpointError, InputError, SelectorError, SourceError,
                     StrategyError)
from .rng import Rng

FEATURE_KINDS = ("Emb", "Att", "Q", "K", "V", "HS", "Soft", "Hard")
LAYERED_KINDS = frozenset({"Att", "Q", "K", "V", "HS"})

MASK_ID = 1


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    layers: int
    heads: int
    vocab: int
    max_seq: int
    name: str = ""

    def __post_init__(self):
        for field in ("dim", "layers", "heads", "vocab", "max_seq"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"ModelSpec.{field} must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(spec: ModelSpec) -> int:
    d, L = spec.dim, spec.layers
    return spec.vocab * d + 2 * spec.max_seq * d + L * (12 * d * d + 13 * d) + 4 * d


def _table7(name, d, L, heads, S, V):
    return ModelSpec(dim=d, layers=L, heads=heads, vocab=V, max_seq=S, name=name)


# Standard-structure rows of the model scale table (MobileBERT-style rows excluded).
PRESETS: dict[str, ModelSpec] = {
    s.name: s for s in [
        _table7("22M", 384, 6, 12, 512, 30592),
        _table7("66M", 768, 6, 12, 512, 30592),
        _table7("110M", 768, 12, 12, 512, 30592),
        _table7("340M", 1024, 24, 16, 512, 30592),
        _table7("1B", 1728, 26, 64, 1024, 50304),
        _table7("1.2B", 1792, 28, 64, 1024, 50304),
        _table7("1.5B", 1984, 30, 64, 1024, 50304),
        _table7("2B", 2048, 36, 64, 1024, 50304),
        _table7("5B", 3264, 38, 64, 1024, 50304),
        _table7("6B", 3456, 40, 64, 1024, 50304),
        _table7("7.5B", 3776, 42, 64, 1024, 50304),
        _table7("10B", 4096, 48, 64, 1024, 50304),
        _table7("13B", 4736, 48, 64, 1024, 50304),
        _table7("18B", 5248, 54, 64, 1024, 50304),
        _table7("20B", 5440, 56, 64, 1024, 50304),
        _table7("22B", 5504, 60, 64, 1024, 50304),
        _table7("25B", 5632, 64, 64, 1024, 50304),
        _table7("50B", 8000, 64, 64, 1024, 50304),
        _table7("65B", 9152, 64, 64, 1024, 50304),
        _table7("90B", 10624, 66, 64, 1024, 50304),
        _table7("100B", 11008, 68, 64, 1024, 50304),
        _table7("110B", 11392, 70, 64, 1024, 50304),
        # desk-scale models
        _table7("toy-teacher", 64, 4, 4, 64, 256),
        _table7("toy-teacher2", 64, 4, 4, 64, 256),
        _table7("toy-assistant", 48, 3, 4, 64, 256),
        _table7("toy-assistant2", 40, 3, 4, 64, 256),
        _table7("toy-student", 32, 2, 4, 64, 256),
    ]
}

# Reported totals for the standard rows; used by tests and the ``params`` report.
REPORTED_PARAMS = {
    "22M": 22788864, "66M": 66811392, "110M": 109338624, "340M": 334688256,
    "1B": 1022682240, "1.2B": 1173458944, "1.5B": 1521700224, "2B": 1920122880,
    "5B": 5030587776, "6B": 5915828736, "7.5B": 7385878656, "10B": 9880682496,
    "13B": 13170418176, "18B": 18125342976, "20B": 20175676160, "22B": 22104152064,
    "25B": 24660072448, "50B": 49577504000, "65B": 64813768448, "90B": 89957891328,
    "100B": 99465734144, "110B": 109620044032,
}


def get_spec(name: str) -> ModelSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(f"unknown model spec {name!r}; known: {', '.join(PRESETS)}") from None


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) table; the order fixes RNG draws and checkpoint layout."""
    d, S, V = spec.dim, spec.max_seq, spec.vocab
    out = [("tok_emb", (V, d)), ("pos_emb", (S, d)), ("block_pos_emb", (S, d)),
           ("emb_ln.w", (d,)), ("emb_ln.b", (d,))]
    for i in range(spec.layers):
        p = f"layers.{i}."
        out += [(p + "ln1.w", (d,)), (p + "ln1.b", (d,))]
        for m in "qkvo":
            out += [(p + f"attn.{m}.w", (d, d)), (p + f"attn.{m}.b", (d,))]
        out += [(p + "ln2.w", (d,)), (p + "ln2.b", (d,)),
                (p + "ffn.in.w", (d, 4 * d)), (p + "ffn.in.b", (4 * d,)),
                (p + "ffn.out.w", (4 * d, d)), (p + "ffn.out.b", (d,))]
    out += [("final_ln.w", (d,)), ("final_ln.b", (d,))]
    return out


def _init_value(name: str, shape: tuple, rng: Rng) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    parts = name.split(".")
    if len(parts) > 1 and "ln" in parts[-2]:
        return np.ones(shape)
    return rng.normal(shape, 0.0, 0.02)


class TapBundle(dict):
    """Captured features keyed by ``(kind, layer)``; ``layer`` is None for Emb/Soft/Hard."""

    def get_feature(self, kind: str, layer: int | None = None):
        return self[(kind, layer)]


def _dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    if rng is None or p <= 0:
        return x
    keep = rng.uniform(x.shape) >= p
    return x * (keep / (1.0 - p))


class TransformerModel:
    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], dropout: float = 0.0):
        self.spec = spec
        self.params = params
        self.dropout = dropout
        layout = param_layout(spec)
        if set(params) != {n for n, _ in layout}:
            raise CheckpointError("parameter table does not match the model layout")
        for n, shape in layout:
            if params[n].shape != shape:
                raise CheckpointError(f"parameter {n} has shape {params[n].shape}, expected {shape}")

    @classmethod
    def random(cls, spec: ModelSpec, seed: int, dropout: float = 0.0) -> "TransformerModel":
        rng = Rng(seed)
        params = {n: Tensor(_init_value(n, shape, rng), requires_grad=True) for n, shape in param_layout(spec)}
        return cls(spec, params, dropout)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n, _ in param_layout(self.spec)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, self.params[n]) for n, _ in param_layout(self.spec)]

    def layer_params(self, index: int) -> dict[str, Tensor]:
        """Parameters of block ``index`` (1-based), keyed without the layer prefix."""
        p = f"layers.{index - 1}."
        return {n[len(p):]: t for n, t in self.params.items() if n.startswith(p)}

    def clone(self) -> "TransformerModel":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return TransformerModel(self.spec, params, self.dropout)

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.zero_grad()
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    # -- forward pieces --------------------------------------------------------
    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise InputError("tokens must be a (batch, seq) id array")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab):
            raise InputError(f"token id outside [0, {self.spec.vocab})")
        if tokens.shape[1] > self.spec.max_seq:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq {self.spec.max_seq}")
        return tokens

    def embed(self, tokens: np.ndarray, rng: Rng | None = None) -> Tensor:
        P = self.params
        seq = tokens.shape[1]
        block_pos = (tokens == MASK_ID).astype(np.int64)
        x = (ag.embedding(P["tok_emb"], tokens) + ag.embedding(P["pos_emb"], np.arange(seq))
             + ag.embedding(P["block_pos_emb"], block_pos))
        x = ag.layernorm(x, P["emb_ln.w"], P["emb_ln.b"])
        return _dropout(x, self.dropout, rng)

    def block(self, index: int, x: Tensor, taps: dict | None = None, want=frozenset(),
              rng: Rng | None = None) -> Tensor:
        """Run block ``index`` (1-based).  Features named in ``want`` are stored in ``taps``."""
        P = self.layer_params(index)
        B, S, d = x.shape
        H, dh = self.spec.heads, self.spec.head_dim
        h = ag.layernorm(x, P["ln1.w"], P["ln1.b"])
        q = h @ P["attn.q.w"] + P["attn.q.b"]
        k = h @ P["attn.k.w"] + P["attn.k.b"]
        v = h @ P["attn.v.w"] + P["attn.v.b"]

        def heads(t):
            return ag.transpose(ag.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))

        att = ag.softmax(ag.scaled_dot(heads(q), heads(k)), axis=-1)
        ctx = _dropout(att, self.dropout, rng) @ heads(v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
        x = x + _dropout(ctx @ P["attn.o.w"] + P["attn.o.b"], self.dropout, rng)
        h2 = ag.layernorm(x, P["ln2.w"], P["ln2.b"])
        f = ag.gelu(h2 @ P["ffn.in.w"] + P["ffn.in.b"]) @ P["ffn.out.w"] + P["ffn.out.b"]
        x = x + _dropout(f, self.dropout, rng)
        if taps is not None:
            for kind, t in (("Q", q), ("K", k), ("V", v), ("Att", att), ("HS", x)):
                if (kind, index) in want:
                    taps[(kind, index)] = t
        return x

    def head(self, x: Tensor) -> Tensor:
        P = self.params
        x = ag.layernorm(x, P["final_ln.w"], P["final_ln.b"])
        return x @ ag.transpose(P["tok_emb"], (1, 0))

    def forward(self, tokens, rng: Rng | None = None) -> Tensor:
        logits, _ = forward_with_taps(self, tokens, (), rng=rng)
        return logits


LayerHook = Callable[[int, Tensor], Tensor]


def normalize_request(model: TransformerModel, requested: Iterable) -> frozenset:
    """Expand and validate a feature request into ``(kind, layer)`` pairs."""
    L = model.spec.layers
    out = set()
    for item in requested:
        kind, layer = (item, None) if isinstance(item, str) else tuple(item)
        if kind not in FEATURE_KINDS:
            raise SelectorError(f"unknown feature kind {kind!r}")
        if kind in LAYERED_KINDS:
            if layer == "all":
                out.update((kind, i) for i in range(1, L + 1))
                continue
            if layer == "last":
                layer = L
            if not isinstance(layer, (int, np.integer)) or not 1 <= layer <= L:
                raise SelectorError(f"layer selector {layer!r} outside [1..{L}] for {kind}")
            out.add((kind, int(layer)))
        else:
            out.add((kind, None))
    return frozenset(out)


def forward_with_taps(model: TransformerModel, tokens, requested: Iterable = (), *,
                      rng: Rng | None = None, layer_hook: LayerHook | None = None,
                      active_layers: Iterable[int] | None = None):
    """Forward pass returning ``(logits, TapBundle)`` with only the requested features.

    ``layer_hook(i, h)`` may replace the output of block ``i``; ``active_layers``
    restricts which blocks run (the others are skipped as identity).
    """
    tokens = model.check_tokens(tokens)
    want = normalize_request(model, requested)
    taps = TapBundle()
    x = model.embed(tokens, rng)
    if ("Emb", None) in want:
        taps[("Emb", None)] = x
    active = None if active_layers is None else set(active_layers)
    for i in range(1, model.spec.layers + 1):
        if active is not None and i not in active:
            continue
        x = model.block(i, x, taps, want, rng)
        if layer_hook is not None:
            x = layer_hook(i, x)
    logits = model.head(x)
    if ("Soft", None) in want:
        taps[("Soft", None)] = logits
    if ("Hard", None) in want:
        taps[("Hard", None)] = np.argmax(logits.data, axis=-1)
    return logits, taps


# -- student initialisation ------------------------------------------------------------
INIT_STRATEGIES = ("random", "truncate-teacher", "pretrained-student", "distilled-student")


def truncate_teacher(teacher: TransformerModel, student_spec: ModelSpec,
                     layer_map: str = "first") -> TransformerModel:
    ts = teacher.spec
    if ts.dim != student_spec.dim or ts.layers < student_spec.layers:
        raise StrategyError(
            f"truncation needs equal dim and teacher layers >= student layers "
            f"(teacher d={ts.dim} L={ts.layers}, student d={student_spec.dim} L={student_spec.layers})")
    if (ts.vocab, ts.max_seq, ts.heads) != (student_spec.vocab, student_spec.max_seq, student_spec.heads):
        raise StrategyError("truncation needs matching vocab, max_seq and heads")
    Ls, Lt = student_spec.layers, ts.layers
    if layer_map == "first":
        source_layers = list(range(Ls))
    elif layer_map == "strided":
        source_layers = [-(-(i + 1) * Lt // Ls) - 1 for i in range(Ls)]
    else:
        raise StrategyError(f"unknown layer map {layer_map!r}")
    params = {}
    for name, _ in param_layout(student_spec):
        src = name
        if name.startswith("layers."):
            _, idx, rest = name.split(".", 2)
            src = f"layers.{source_layers[int(idx)]}.{rest}"
        params[name] = Tensor(teacher.params[src].data.copy(), requires_grad=True)
    return TransformerModel(student_spec, params, teacher.dropout)


def init_student(strategy: str, student_spec: ModelSpec, source=None, *, seed: int = 0,
                 dropout: float = 0.0, layer_map: str = "first") -> TransformerModel:
    if strategy == "random":
        return TransformerModel.random(student_spec, seed, dropout)
    if strategy == "truncate-teacher":
        if not isinstance(source, TransformerModel):
            raise SourceError("truncate-teacher needs a teacher model")
        model = truncate_teacher(source, student_spec, layer_map)
        model.dropout = dropout
        return model
    if strategy in ("pretrained-student", "distilled-student"):
        if source is None:
            raise SourceError(f"{strategy} needs a checkpoint")
        model = source.clone() if isinstance(source, TransformerModel) else load_checkpoint(source)
        if model.spec.dim != student_spec.dim or model.spec.layers != student_spec.layers:
            raise StrategyError("checkpoint architecture does not match the student spec")
        for t in model.params.values():
            t.requires_grad = True
        model.dropout = dropout
        return model
    raise StrategyError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")


# -- checkpoint format -----------------------------------------------------------------------
MAGIC = b"GKDCKPT1"


def checkpoint_bytes(model: TransformerModel, extra: dict | None = None) -> bytes:
    """Serialise: magic, u64 manifest length, UTF-8 JSON manifest, little-endian float32 arrays."""
    tensors, offset = [], 0
    for name, shape in param_layout(model.spec):
        n = int(np.prod(shape))
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        offset += n * 4
    manifest = {"spec": model.spec.to_dict(), "dtype": "float32-le", "tensors": tensors}
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(model.params[n].data.astype("<f4").tobytes() for n, _ in param_layout(model.spec))
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(model: TransformerModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


def parse_checkpoint(blob: bytes) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    spec = ModelSpec(**manifest["spec"])
    base = 16 + n
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"]))
        start = base + entry["offset"]
        raw = blob[start:start + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(entry["shape"])
    return spec, arrays, manifest.get("extra", {})


def load_checkpoint(path) -> TransformerModel:
    path = Path(path)
    if not path.exists():
        raise SourceError(f"checkpoint not found: {path}")
    spec, arrays, _ = parse_checkpoint(path.read_bytes())
    return TransformerModel(spec, {n: Tensor(a, requires_grad=True) for n, a in arrays.items()})


def copy_model(model: TransformerModel) -> TransformerModel:
    return copy.deepcopy(model)
