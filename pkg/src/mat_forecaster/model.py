"""The full two-stream forecaster: feature-level attention, embeddings with
sinusoidal positions, an encoder that exchanges queries between the two
modality streams at every depth, and a causally masked decoder that attends
onto both encoder streams and fuses them by summation.

Stream lengths: the inter-modal exchange gives each encoder output the OTHER
modality's length (query length governs), and the two per-axis streams are
re-crossed between layers so the final outputs keep those lengths no matter
how many encoder layers are stacked. With text/series lookbacks (6, 9) the
encoder returns a text-content stream of length 9 and a series-content stream
of length 6; those traced shapes are frozen in the tests.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .attention import (
    FeatureAttentionParams,
    FFNParams,
    LayerNormParams,
    MHAParams,
    apply_ffn,
    feature_level_attention,
    intra_modal_block,
    inter_modal_block,
    masked_self_block,
    target_modal_block,
)
from .errors import (
    CheckpointCensusError,
    CheckpointHeaderError,
    CheckpointTruncationError,
    ConfigError,
    DataError,
    DimensionError,
)
from .numerics import Tensor, no_grad

CHECKPOINT_MAGIC = b"MATF"
CHECKPOINT_VERSION = 1


@dataclass
class MATConfig:
    """Structural hyperparameters of the two-stream forecaster."""

    d_txt: int
    d_ts: int
    d_model: int = 32
    heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    d_ff: int = 64
    lookback_txt: int = 9
    lookback_ts: int = 9
    horizon: int = 1
    dropout: float = 0.1
    # optional per-head width override (otherwise d_model // heads)
    head_dim: int | None = None

    def validate(self):
        if self.d_txt < 1 or self.d_ts < 1:
            raise ConfigError("d_txt and d_ts must be positive")
        if self.d_model < 1:
            raise ConfigError("d_model must be positive")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.head_dim is None and self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.head_dim is not None and self.head_dim < 1:
            raise ConfigError("head_dim must be positive when set")
        if self.n_enc_layers < 0 or self.n_dec_layers < 1:
            raise ConfigError("need n_enc_layers >= 0 and n_dec_layers >= 1")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be positive")
        if self.lookback_txt < 1 or self.lookback_ts < 1:
            raise ConfigError("lookback lengths must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @property
    def per_head_dim(self):
        return self.head_dim if self.head_dim is not None else self.d_model // self.heads

    @property
    def decoder_context(self):
        """How many observed target values seed the decoder."""
        return min(self.lookback_ts, self.horizon)

    @property
    def max_decode_len(self):
        return self.decoder_context + self.horizon - 1

    @property
    def pe_len(self):
        return max(self.lookback_txt, self.lookback_ts, self.max_decode_len)


def sinusoidal_table(length, d_model):
    """Fixed sin/cos position table, one row per timestep."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((length, d_model), dtype=np.float32)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def _feat_entries(prefix, d):
    yield f"{prefix}.kernel", (d, d), "weight"
    yield f"{prefix}.bias", (d,), "bias"


def _mha_entries(prefix, d_model, heads, d_head):
    for p in range(heads):
        yield f"{prefix}.h{p}.wq", (d_model, d_head), "weight"
        yield f"{prefix}.h{p}.wk", (d_model, d_head), "weight"
        yield f"{prefix}.h{p}.wv", (d_model, d_head), "weight"
    yield f"{prefix}.wo", (heads * d_head, d_model), "weight"


def _ln_entries(prefix, d):
    yield f"{prefix}.gain", (d,), "gain"
    yield f"{prefix}.bias", (d,), "bias"


def _ffn_entries(prefix, d, d_ff):
    yield f"{prefix}.w1", (d, d_ff), "weight"
    yield f"{prefix}.b1", (d_ff,), "bias"
    yield f"{prefix}.w2", (d_ff, d), "weight"
    yield f"{prefix}.b2", (d,), "bias"


def mat_layout(config: MATConfig):
    """Ordered (name, shape, init-kind) directory of every tensor in the model.

    This is the single source of truth for the parameter census, parameter
    initialization, and the checkpoint directory order.
    """
    cfg = config
    dm, dh = cfg.d_model, cfg.per_head_dim
    yield from _feat_entries("feat.txt_enc", cfg.d_txt)
    yield from _feat_entries("feat.ts_enc", cfg.d_ts)
    yield from _feat_entries("feat.txt_dec", dm)
    yield from _feat_entries("feat.ts_dec", dm)
    yield "embed.txt.weight", (cfg.d_txt, dm), "weight"
    yield "embed.txt.bias", (dm,), "bias"
    yield "embed.ts.weight", (cfg.d_ts, dm), "weight"
    yield "embed.ts.bias", (dm,), "bias"
    yield "embed.tar.weight", (1, dm), "weight"
    yield "embed.tar.bias", (dm,), "bias"
    yield "pos.table", (cfg.pe_len, dm), "pos"
    for i in range(cfg.n_enc_layers):
        for s in ("txt", "ts"):
            yield from _mha_entries(f"enc{i}.{s}.intra", dm, cfg.heads, dh)
            yield from _ln_entries(f"enc{i}.{s}.ln_intra", dm)
            yield from _mha_entries(f"enc{i}.{s}.inter", dm, cfg.heads, dh)
            yield from _ln_entries(f"enc{i}.{s}.ln_inter", dm)
            yield from _ffn_entries(f"enc{i}.{s}.ffn", dm, cfg.d_ff)
            yield from _ln_entries(f"enc{i}.{s}.ln_ffn", dm)
    for i in range(cfg.n_dec_layers):
        yield from _mha_entries(f"dec{i}.masked", dm, cfg.heads, dh)
        yield from _ln_entries(f"dec{i}.ln_masked", dm)
        yield from _mha_entries(f"dec{i}.tar_txt", dm, cfg.heads, dh)
        yield from _mha_entries(f"dec{i}.tar_ts", dm, cfg.heads, dh)
        yield from _ln_entries(f"dec{i}.ln_fuse", dm)
        yield from _ffn_entries(f"dec{i}.ffn", dm, cfg.d_ff)
        yield from _ln_entries(f"dec{i}.ln_ffn", dm)
    yield "head.weight", (dm, 1), "weight"
    yield "head.bias", (1,), "bias"


def census(layout):
    """[(name, shape)] for a layout iterable; a pure function of the config."""
    return [(name, tuple(shape)) for name, shape, _ in layout]


def init_tensors(layout, seed):
    """Allocate and initialize every tensor in the layout.

    Weights are Glorot-uniform in +-sqrt(6/(fan_in+fan_out)), biases and
    layer-norm offsets zero, layer-norm gains one. The position table is the
    fixed sinusoid and never trains.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in layout:
        if kind == "weight":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[1] if len(shape) > 1 else shape[0]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
        elif kind == "bias":
            tensors[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        elif kind == "gain":
            tensors[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
        elif kind == "pos":
            tensors[name] = Tensor(sinusoidal_table(*shape), requires_grad=False)
        else:
            raise ConfigError(f"unknown init kind {kind!r}")
    return tensors


@dataclass
class EncoderStreamLayer:
    intra: MHAParams
    ln_intra: LayerNormParams
    inter: MHAParams
    ln_inter: LayerNormParams
    ffn: FFNParams
    ln_ffn: LayerNormParams


@dataclass
class DecoderLayer:
    masked: MHAParams
    ln_masked: LayerNormParams
    tar_txt: MHAParams
    tar_ts: MHAParams
    ln_fuse: LayerNormParams
    ffn: FFNParams
    ln_ffn: LayerNormParams


class MATParams:
    """All named tensors of the model, wired into structured views.

    The ordered name->Tensor mapping is authoritative; the structured
    attributes alias the same Tensor objects.
    """

    def __init__(self, config: MATConfig, tensors: dict):
        self.config = config
        expected = census(mat_layout(config))
        for name, shape in expected:
            if name not in tensors:
                raise CheckpointCensusError(f"missing tensor {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise CheckpointCensusError(
                    f"tensor {name!r} has shape {tuple(tensors[name].shape)}, census says {shape}"
                )
        extra = set(tensors) - {n for n, _ in expected}
        if extra:
            raise CheckpointCensusError(f"unexpected tensor {sorted(extra)[0]!r}")
        self._ordered = [(name, tensors[name]) for name, _ in expected]
        t = tensors

        def feat(prefix):
            return FeatureAttentionParams(kernel=t[f"{prefix}.kernel"], bias=t[f"{prefix}.bias"])

        def mha(prefix):
            h = config.heads
            return MHAParams(
                wq=[t[f"{prefix}.h{p}.wq"] for p in range(h)],
                wk=[t[f"{prefix}.h{p}.wk"] for p in range(h)],
                wv=[t[f"{prefix}.h{p}.wv"] for p in range(h)],
                wo=t[f"{prefix}.wo"],
            )

        def ln(prefix):
            return LayerNormParams(gain=t[f"{prefix}.gain"], bias=t[f"{prefix}.bias"])

        def ffn(prefix):
            return FFNParams(w1=t[f"{prefix}.w1"], b1=t[f"{prefix}.b1"],
                             w2=t[f"{prefix}.w2"], b2=t[f"{prefix}.b2"])

        self.feat_txt_enc = feat("feat.txt_enc")
        self.feat_ts_enc = feat("feat.ts_enc")
        self.feat_txt_dec = feat("feat.txt_dec")
        self.feat_ts_dec = feat("feat.ts_dec")
        self.embed_txt = (t["embed.txt.weight"], t["embed.txt.bias"])
        self.embed_ts = (t["embed.ts.weight"], t["embed.ts.bias"])
        self.embed_tar = (t["embed.tar.weight"], t["embed.tar.bias"])
        self.pos = t["pos.table"]
        self.enc_layers = []
        for i in range(config.n_enc_layers):
            layer = {}
            for s in ("txt", "ts"):
                layer[s] = EncoderStreamLayer(
                    intra=mha(f"enc{i}.{s}.intra"),
                    ln_intra=ln(f"enc{i}.{s}.ln_intra"),
                    inter=mha(f"enc{i}.{s}.inter"),
                    ln_inter=ln(f"enc{i}.{s}.ln_inter"),
                    ffn=ffn(f"enc{i}.{s}.ffn"),
                    ln_ffn=ln(f"enc{i}.{s}.ln_ffn"),
                )
            self.enc_layers.append(layer)
        self.dec_layers = [
            DecoderLayer(
                masked=mha(f"dec{i}.masked"),
                ln_masked=ln(f"dec{i}.ln_masked"),
                tar_txt=mha(f"dec{i}.tar_txt"),
                tar_ts=mha(f"dec{i}.tar_ts"),
                ln_fuse=ln(f"dec{i}.ln_fuse"),
                ffn=ffn(f"dec{i}.ffn"),
                ln_ffn=ln(f"dec{i}.ln_ffn"),
            )
            for i in range(config.n_dec_layers)
        ]
        self.head = (t["head.weight"], t["head.bias"])

    @classmethod
    def initialize(cls, config: MATConfig, seed=0):
        config.validate()
        return cls(config, init_tensors(mat_layout(config), seed))

    def named_tensors(self):
        return list(self._ordered)

    def trainable(self):
        return [t for _, t in self._ordered if t.requires_grad]

    def n_parameters(self):
        return sum(t.size for t in self.trainable())

    def clone(self):
        tensors = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self._ordered
        }
        return MATParams(self.config, tensors)

    def load_values(self, other: "MATParams"):
        for (_, mine), (_, theirs) in zip(self._ordered, other._ordered):
            mine.data = theirs.data.copy()

    def to_dtype(self, dtype):
        tensors = {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self._ordered
        }
        return MATParams(self.config, tensors)


@dataclass
class AttentionRecord:
    """One sample's attention, captured during an (unchanged) prediction pass."""

    feature_weights_txt: np.ndarray  # [T_txt x d_txt]
    feature_weights_ts: np.ndarray  # [T_ts x d_ts]
    temporal: dict = field(default_factory=dict)  # (layer, kind, stream) -> [h x L_q x L_kv]
    prediction: np.ndarray | None = None

    def expected_keys(self, config: MATConfig):
        keys = []
        for i in range(config.n_enc_layers):
            for kind in ("intra", "inter"):
                for s in ("txt", "ts"):
                    keys.append((i, kind, s))
        for i in range(config.n_dec_layers):
            keys.append((i, "masked", "tar"))
            keys.append((i, "target-txt", "tar"))
            keys.append((i, "target-ts", "tar"))
        return keys


def _values_of(x):
    """Accept raw arrays, Tensors, or ModalitySequence-likes."""
    if isinstance(x, Tensor):
        return x
    values = getattr(x, "values", x)
    return values if isinstance(values, Tensor) else Tensor(np.asarray(values))


class MATModel:
    """Config + parameters with forward, autoregressive prediction and export."""

    kind = "mat"

    def __init__(self, config: MATConfig, params: MATParams | None = None, seed=0):
        config.validate()
        self.config = config
        self.params = params if params is not None else MATParams.initialize(config, seed)

    # -- embedding ---------------------------------------------------------

    def embed_modality(self, x, which, positions_from=0):
        """Linear map into d_model (scaled by sqrt(d_model), as in the base
        encoder/decoder architecture) plus the sinusoidal position rows."""
        x = _values_of(x)
        widths = {"txt": self.config.d_txt, "ts": self.config.d_ts, "tar": 1}
        if which not in widths:
            raise ConfigError(f"unknown modality tag {which!r}")
        if x.shape[-1] != widths[which]:
            raise ConfigError(
                f"modality {which!r} expects {widths[which]} features, got {x.shape[-1]}"
            )
        weight, bias = {"txt": self.params.embed_txt, "ts": self.params.embed_ts,
                        "tar": self.params.embed_tar}[which]
        t = x.shape[-2]
        if positions_from + t > self.config.pe_len:
            raise DimensionError(
                f"sequence of length {t} exceeds position table ({self.config.pe_len})"
            )
        pos = Tensor(self.params.pos.data[positions_from:positions_from + t])
        return nm.matmul(x, weight) * math.sqrt(self.config.d_model) + bias + pos

    # -- encoder -----------------------------------------------------------

    def encode(self, x_txt, x_ts, rng=None, sink=None):
        """Run both streams; returns (enc_txt, enc_ts).

        enc_txt is the text-content stream (length = ts lookback after the
        first exchange), enc_ts the series-content stream (length = txt
        lookback). With zero encoder layers both are just the embedded,
        feature-weighted inputs.
        """
        cfg = self.config
        rate = cfg.dropout if rng is not None else 0.0
        w_txt, xw_txt = feature_level_attention(_values_of(x_txt), self.params.feat_txt_enc)
        w_ts, xw_ts = feature_level_attention(_values_of(x_ts), self.params.feat_ts_enc)
        if sink is not None:
            sink(("feat", "txt"), w_txt.data)
            sink(("feat", "ts"), w_ts.data)
        axis_txt = self.embed_modality(xw_txt, "txt")
        axis_ts = self.embed_modality(xw_ts, "ts")
        enc_txt, enc_ts = axis_txt, axis_ts
        for i, layer in enumerate(self.params.enc_layers):
            intra_txt = intra_modal_block(
                axis_txt, layer["txt"].intra, layer["txt"].ln_intra, rng, rate,
                sink=sink, key=(i, "intra", "txt"))
            intra_ts = intra_modal_block(
                axis_ts, layer["ts"].intra, layer["ts"].ln_intra, rng, rate,
                sink=sink, key=(i, "intra", "ts"))
            # queries exchanged between the streams: the text-content output is
            # queried at the series axis and vice versa
            enc_txt = inter_modal_block(
                intra_txt, intra_ts, layer["txt"].inter, layer["txt"].ln_inter,
                layer["txt"].ffn, layer["txt"].ln_ffn, rng, rate,
                sink=sink, key=(i, "inter", "txt"))
            enc_ts = inter_modal_block(
                intra_ts, intra_txt, layer["ts"].inter, layer["ts"].ln_inter,
                layer["ts"].ffn, layer["ts"].ln_ffn, rng, rate,
                sink=sink, key=(i, "inter", "ts"))
            # re-cross so each per-axis slot keeps its time axis; the final
            # outputs then keep their lengths however deep the stack is
            axis_txt, axis_ts = enc_ts, enc_txt
        return enc_txt, enc_ts

    # -- decoder -----------------------------------------------------------

    def decode(self, y_hist, enc_txt, enc_ts, rng=None, sink=None):
        """Map an observed/generated target prefix to one value per position."""
        cfg = self.config
        rate = cfg.dropout if rng is not None else 0.0
        y = _values_of(y_hist)
        if y.shape[-1] != 1:
            raise DimensionError(f"decoder input must have one channel, got {y.shape}")
        h = self.embed_modality(y, "tar")
        for i, layer in enumerate(self.params.dec_layers):
            s = masked_self_block(h, layer.masked, layer.ln_masked, rng, rate,
                                  sink=sink, key=(i, "masked", "tar"))
            att_txt = target_modal_block(s, enc_txt, self.params.feat_txt_dec, layer.tar_txt,
                                         rng, rate, sink=sink, key=(i, "target-txt", "tar"))
            att_ts = target_modal_block(s, enc_ts, self.params.feat_ts_dec, layer.tar_ts,
                                        rng, rate, sink=sink, key=(i, "target-ts", "tar"))
            fused = nm.layer_norm(s + att_txt.values + att_ts.values,
                                  layer.ln_fuse.gain, layer.ln_fuse.bias)
            h = nm.layer_norm(fused + apply_ffn(fused, layer.ffn, rng, rate),
                              layer.ln_ffn.gain, layer.ln_ffn.bias)
        w, b = self.params.head
        return nm.matmul(h, w) + b

    # -- sample plumbing ----------------------------------------------------

    def _check_sample(self, x_txt, x_ts, y_hist):
        cfg = self.config
        if x_txt.shape[-2:] != (cfg.lookback_txt, cfg.d_txt):
            raise DataError(
                f"text window {x_txt.shape[-2:]} does not match config "
                f"({cfg.lookback_txt}, {cfg.d_txt})"
            )
        if x_ts.shape[-2:] != (cfg.lookback_ts, cfg.d_ts):
            raise DataError(
                f"series window {x_ts.shape[-2:]} does not match config "
                f"({cfg.lookback_ts}, {cfg.d_ts})"
            )
        if y_hist.shape[-1] < cfg.decoder_context:
            raise DataError(
                f"target history of length {y_hist.shape[-1]} is shorter than the "
                f"decoder context {cfg.decoder_context}"
            )

    @staticmethod
    def _stack(samples):
        x_txt = np.stack([np.asarray(s.x_txt.values, dtype=np.float32) for s in samples])
        x_ts = np.stack([np.asarray(s.x_ts.values, dtype=np.float32) for s in samples])
        y_hist = np.stack([np.asarray(s.y_hist, dtype=np.float32) for s in samples])
        y_future = np.stack([np.asarray(s.y_future, dtype=np.float32) for s in samples])
        return x_txt, x_ts, y_hist, y_future

    def forward(self, sample, teacher_forcing=True, rng=None):
        """One sample -> [horizon x 1] predictions."""
        out = self.forward_batch([sample], teacher_forcing=teacher_forcing, rng=rng)
        return nm.narrow(out, 0, 0, 1).reshape((self.config.horizon, 1))

    def forward_batch(self, samples, teacher_forcing=True, rng=None):
        """Samples -> [B x horizon x 1]; teacher forcing uses the shifted truth."""
        if not teacher_forcing:
            return self.unroll_batch(samples, rng=rng)
        cfg = self.config
        x_txt, x_ts, y_hist, y_future = self._stack(samples)
        self._check_sample(x_txt, x_ts, y_hist)
        if y_future.shape[-1] != cfg.horizon:
            raise DataError(f"future targets {y_future.shape[-1]} != horizon {cfg.horizon}")
        enc_txt, enc_ts = self.encode(Tensor(x_txt), Tensor(x_ts), rng=rng)
        c = cfg.decoder_context
        dec_in = np.concatenate([y_hist[:, y_hist.shape[1] - c:], y_future[:, : cfg.horizon - 1]],
                                axis=1)[..., None]
        out = self.decode(Tensor(dec_in), enc_txt, enc_ts, rng=rng)
        return nm.narrow(out, -2, c - 1, cfg.horizon)

    def predict_autoregressive(self, sample):
        """Seed with observed targets, then feed each prediction back, T' times."""
        return Tensor(self.predict_batch([sample])[0][:, None])

    def unroll_batch(self, samples, rng=None):
        """Autoregressive decoding kept on the tape, for non-teacher-forced
        training; numerically identical to predict_batch when rng is None."""
        cfg = self.config
        x_txt, x_ts, y_hist, _ = self._stack(samples)
        self._check_sample(x_txt, x_ts, y_hist)
        enc_txt, enc_ts = self.encode(Tensor(x_txt), Tensor(x_ts), rng=rng)
        c = cfg.decoder_context
        seq = Tensor(y_hist[:, y_hist.shape[1] - c:][..., None])
        steps = []
        for step in range(cfg.horizon):
            out = self.decode(seq, enc_txt, enc_ts, rng=rng)
            nxt = nm.narrow(out, -2, out.shape[-2] - 1, 1)
            steps.append(nxt)
            if step < cfg.horizon - 1:
                seq = nm.concat([seq, nxt], axis=-2)
        return nm.concat(steps, axis=-2)

    def predict_batch(self, samples, sink=None):
        cfg = self.config
        x_txt, x_ts, y_hist, _ = self._stack(samples)
        self._check_sample(x_txt, x_ts, y_hist)
        with no_grad():
            enc_txt, enc_ts = self.encode(Tensor(x_txt), Tensor(x_ts), sink=sink)
            c = cfg.decoder_context
            seq = y_hist[:, y_hist.shape[1] - c:].astype(np.float32)[..., None]
            preds = []
            for step in range(cfg.horizon):
                last = step == cfg.horizon - 1
                out = self.decode(Tensor(seq), enc_txt, enc_ts,
                                  sink=sink if last else None)
                nxt = out.data[:, -1, :]
                preds.append(nxt[:, 0])
                if not last:
                    seq = np.concatenate([seq, nxt[:, None, :]], axis=1)
        return np.stack(preds, axis=1)

    def export_attention(self, sample):
        """Capture feature weights and every temporal matrix for one sample.

        The capturing pass computes exactly the same prediction as the plain
        autoregressive pass; matrices from the final (full-length) decode step
        are recorded.
        """
        captured = {}

        def sink(key, value):
            captured[key] = value.copy()

        preds = self.predict_batch([sample], sink=sink)
        record = AttentionRecord(
            feature_weights_txt=captured.pop(("feat", "txt"))[0],
            feature_weights_ts=captured.pop(("feat", "ts"))[0],
            temporal={k: v[0] for k, v in captured.items()},
            prediction=preds[0],
        )
        return record


# -- checkpoints -------------------------------------------------------------


def write_checkpoint(path, model_kind, config_dict, named_arrays):
    """Self-describing binary: magic, version, JSON header with the ordered
    tensor directory, then little-endian float32 payloads in directory order.
    """
    directory = []
    offset = 0
    payload = io.BytesIO()
    for name, arr in named_arrays:
        arr32 = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        directory.append({"name": name, "shape": list(arr32.shape), "offset": offset})
        raw = arr32.astype("<f4", copy=False).tobytes()
        payload.write(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model_kind,
        "config": config_dict,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload.getvalue())


def read_checkpoint(path):
    """Returns (header dict, {name: float32 array}); validates structure only."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointHeaderError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointHeaderError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointHeaderError(f"{path}: header truncated")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointHeaderError(f"{path}: corrupt header ({e})") from e
    if not isinstance(header, dict) or "tensors" not in header or "config" not in header:
        raise CheckpointHeaderError(f"{path}: header missing required fields")
    payload = blob[16 + header_len:]
    expected_bytes = sum(
        int(np.prod(t["shape"])) * 4 if t["shape"] else 4 for t in header["tensors"]
    )
    if len(payload) != expected_bytes:
        raise CheckpointTruncationError(
            f"{path}: payload holds {len(payload)} bytes, directory needs {expected_bytes}"
        )
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return header, arrays


def save_checkpoint(path, config: MATConfig, params: MATParams, model_kind="mat"):
    write_checkpoint(path, model_kind, asdict(config),
                     [(name, t.data) for name, t in params.named_tensors()])


def load_checkpoint(path, expected_config: MATConfig | None = None):
    """Load a MAT checkpoint, re-validating the census before wiring tensors."""
    header, arrays = read_checkpoint(path)
    if header.get("model_kind") != "mat":
        raise CheckpointHeaderError(
            f"{path}: model kind {header.get('model_kind')!r}, expected 'mat'"
        )
    try:
        config = MATConfig(**header["config"]).validate()
    except (TypeError, ConfigError) as e:
        raise CheckpointHeaderError(f"{path}: bad config in header ({e})") from e
    check_against = expected_config if expected_config is not None else config
    expected = census(mat_layout(check_against))
    stored = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    for i in range(max(len(expected), len(stored))):
        if i >= len(stored):
            raise CheckpointCensusError(f"{path}: missing tensor {expected[i][0]!r}")
        if i >= len(expected):
            raise CheckpointCensusError(f"{path}: unexpected tensor {stored[i][0]!r}")
        if expected[i] != stored[i]:
            raise CheckpointCensusError(
                f"{path}: tensor {stored[i][0]!r} has shape {stored[i][1]}, "
                f"census expects {expected[i][0]!r} with shape {expected[i][1]}"
            )
    tensors = {
        name: Tensor(arrays[name], requires_grad=(kind != "pos"))
        for name, _, kind in mat_layout(check_against)
    }
    return MATParams(check_against, tensors), check_against
