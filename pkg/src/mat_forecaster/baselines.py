"""Comparison models run through the same harness as the main forecaster:
an early-concatenation vanilla transformer (both modalities merged into one
stream per timestep) and ElasticNet linear regression fit by coordinate
descent, one independent model per horizon step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .attention import (
    FFNParams,
    LayerNormParams,
    MHAParams,
    apply_ffn,
    masked_self_block,
    multi_head,
)
from .errors import (
    CheckpointCensusError,
    CheckpointHeaderError,
    ConfigError,
    DataError,
    DimensionError,
)
from .model import (
    MATConfig,
    _ffn_entries,
    _ln_entries,
    _mha_entries,
    census,
    init_tensors,
    read_checkpoint,
    write_checkpoint,
)
from .numerics import Tensor, no_grad


# -- vanilla transformer -------------------------------------------------------


@dataclass
class VanillaConfig:
    """Single-stream encoder/decoder over the concatenated feature vector."""

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
    head_dim: int | None = None

    def validate(self):
        proxy = MATConfig(**self.__dict__)
        proxy.validate()
        return self

    @property
    def d_in(self):
        return self.d_txt + self.d_ts

    @property
    def lookback(self):
        """Both windows are truncated to the shorter one before concatenation."""
        return min(self.lookback_txt, self.lookback_ts)

    @property
    def per_head_dim(self):
        return self.head_dim if self.head_dim is not None else self.d_model // self.heads

    @property
    def decoder_context(self):
        return min(self.lookback_ts, self.horizon)

    @property
    def pe_len(self):
        return max(self.lookback, self.decoder_context + self.horizon - 1)


def vanilla_layout(cfg: VanillaConfig):
    dm, dh = cfg.d_model, cfg.per_head_dim
    yield "embed.in.weight", (cfg.d_in, dm), "weight"
    yield "embed.in.bias", (dm,), "bias"
    yield "embed.tar.weight", (1, dm), "weight"
    yield "embed.tar.bias", (dm,), "bias"
    yield "pos.table", (cfg.pe_len, dm), "pos"
    for i in range(cfg.n_enc_layers):
        yield from _mha_entries(f"enc{i}.self", dm, cfg.heads, dh)
        yield from _ln_entries(f"enc{i}.ln_self", dm)
        yield from _ffn_entries(f"enc{i}.ffn", dm, cfg.d_ff)
        yield from _ln_entries(f"enc{i}.ln_ffn", dm)
    for i in range(cfg.n_dec_layers):
        yield from _mha_entries(f"dec{i}.masked", dm, cfg.heads, dh)
        yield from _ln_entries(f"dec{i}.ln_masked", dm)
        yield from _mha_entries(f"dec{i}.cross", dm, cfg.heads, dh)
        yield from _ln_entries(f"dec{i}.ln_cross", dm)
        yield from _ffn_entries(f"dec{i}.ffn", dm, cfg.d_ff)
        yield from _ln_entries(f"dec{i}.ln_ffn", dm)
    yield "head.weight", (dm, 1), "weight"
    yield "head.bias", (1,), "bias"


class VanillaParams:
    def __init__(self, config: VanillaConfig, tensors: dict):
        self.config = config
        expected = census(vanilla_layout(config))
        for name, shape in expected:
            if name not in tensors:
                raise CheckpointCensusError(f"missing tensor {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise CheckpointCensusError(
                    f"tensor {name!r} has shape {tuple(tensors[name].shape)}, census says {shape}"
                )
        self._ordered = [(name, tensors[name]) for name, _ in expected]
        t = tensors

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

        self.embed_in = (t["embed.in.weight"], t["embed.in.bias"])
        self.embed_tar = (t["embed.tar.weight"], t["embed.tar.bias"])
        self.pos = t["pos.table"]
        self.enc_layers = [
            {"self": mha(f"enc{i}.self"), "ln_self": ln(f"enc{i}.ln_self"),
             "ffn": ffn(f"enc{i}.ffn"), "ln_ffn": ln(f"enc{i}.ln_ffn")}
            for i in range(config.n_enc_layers)
        ]
        self.dec_layers = [
            {"masked": mha(f"dec{i}.masked"), "ln_masked": ln(f"dec{i}.ln_masked"),
             "cross": mha(f"dec{i}.cross"), "ln_cross": ln(f"dec{i}.ln_cross"),
             "ffn": ffn(f"dec{i}.ffn"), "ln_ffn": ln(f"dec{i}.ln_ffn")}
            for i in range(config.n_dec_layers)
        ]
        self.head = (t["head.weight"], t["head.bias"])

    @classmethod
    def initialize(cls, config, seed=0):
        config.validate()
        return cls(config, init_tensors(vanilla_layout(config), seed))

    def named_tensors(self):
        return list(self._ordered)

    def trainable(self):
        return [t for _, t in self._ordered if t.requires_grad]

    def clone(self):
        return VanillaParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self._ordered
        })

    def load_values(self, other):
        for (_, mine), (_, theirs) in zip(self._ordered, other._ordered):
            mine.data = theirs.data.copy()


class VanillaModel:
    """Early-concatenation transformer with the same head and training harness."""

    kind = "vanilla"

    def __init__(self, config: VanillaConfig, params: VanillaParams | None = None, seed=0):
        config.validate()
        self.config = config
        self.params = params if params is not None else VanillaParams.initialize(config, seed)

    def _embed(self, x, weight, bias, t):
        pos = Tensor(self.params.pos.data[:t])
        return nm.matmul(x, weight) * math.sqrt(self.config.d_model) + bias + pos

    def _merge(self, x_txt, x_ts):
        cfg = self.config
        t = cfg.lookback
        txt = x_txt[..., x_txt.shape[-2] - t:, :]
        ts = x_ts[..., x_ts.shape[-2] - t:, :]
        return np.concatenate([txt, ts], axis=-1)

    def encode(self, merged, rng=None):
        cfg = self.config
        rate = cfg.dropout if rng is not None else 0.0
        w, b = self.params.embed_in
        h = self._embed(merged, w, b, merged.shape[-2])
        for layer in self.params.enc_layers:
            att = multi_head(h, h, h, layer["self"], dropout_rng=rng, dropout_rate=rate)
            z = nm.layer_norm(h + att.values, layer["ln_self"].gain, layer["ln_self"].bias)
            h = nm.layer_norm(z + apply_ffn(z, layer["ffn"], rng, rate),
                              layer["ln_ffn"].gain, layer["ln_ffn"].bias)
        return h

    def decode(self, y, memory, rng=None):
        cfg = self.config
        rate = cfg.dropout if rng is not None else 0.0
        w, b = self.params.embed_tar
        h = self._embed(y, w, b, y.shape[-2])
        for layer in self.params.dec_layers:
            s = masked_self_block(h, layer["masked"], layer["ln_masked"], rng, rate)
            att = multi_head(s, memory, memory, layer["cross"], dropout_rng=rng,
                             dropout_rate=rate)
            c = nm.layer_norm(s + att.values, layer["ln_cross"].gain, layer["ln_cross"].bias)
            h = nm.layer_norm(c + apply_ffn(c, layer["ffn"], rng, rate),
                              layer["ln_ffn"].gain, layer["ln_ffn"].bias)
        hw, hb = self.params.head
        return nm.matmul(h, hw) + hb

    @staticmethod
    def _stack(samples):
        x_txt = np.stack([np.asarray(s.x_txt.values, dtype=np.float32) for s in samples])
        x_ts = np.stack([np.asarray(s.x_ts.values, dtype=np.float32) for s in samples])
        y_hist = np.stack([np.asarray(s.y_hist, dtype=np.float32) for s in samples])
        y_future = np.stack([np.asarray(s.y_future, dtype=np.float32) for s in samples])
        return x_txt, x_ts, y_hist, y_future

    def forward_batch(self, samples, teacher_forcing=True, rng=None):
        cfg = self.config
        x_txt, x_ts, y_hist, y_future = self._stack(samples)
        merged = self._merge(x_txt, x_ts)
        if merged.shape[-1] != cfg.d_in:
            raise DataError(f"merged width {merged.shape[-1]} != configured {cfg.d_in}")
        if not teacher_forcing:
            return self._unroll(merged, y_hist, rng)
        memory = self.encode(Tensor(merged), rng=rng)
        c = cfg.decoder_context
        dec_in = np.concatenate(
            [y_hist[:, y_hist.shape[1] - c:], y_future[:, : cfg.horizon - 1]], axis=1
        )[..., None]
        out = self.decode(Tensor(dec_in), memory, rng=rng)
        return nm.narrow(out, -2, c - 1, cfg.horizon)

    def forward(self, sample, teacher_forcing=True, rng=None):
        out = self.forward_batch([sample], teacher_forcing=teacher_forcing, rng=rng)
        return nm.narrow(out, 0, 0, 1).reshape((self.config.horizon, 1))

    def _unroll(self, merged, y_hist, rng=None):
        cfg = self.config
        memory = self.encode(Tensor(merged), rng=rng)
        c = cfg.decoder_context
        seq = Tensor(y_hist[:, y_hist.shape[1] - c:][..., None])
        steps = []
        for step in range(cfg.horizon):
            out = self.decode(seq, memory, rng=rng)
            nxt = nm.narrow(out, -2, out.shape[-2] - 1, 1)
            steps.append(nxt)
            if step < cfg.horizon - 1:
                seq = nm.concat([seq, nxt], axis=-2)
        return nm.concat(steps, axis=-2)

    def predict_batch(self, samples, sink=None):
        x_txt, x_ts, y_hist, _ = self._stack(samples)
        with no_grad():
            out = self._unroll(self._merge(x_txt, x_ts), y_hist)
        return out.data[..., 0]

    def predict_autoregressive(self, sample):
        return Tensor(self.predict_batch([sample])[0][:, None])


def save_vanilla_checkpoint(path, config: VanillaConfig, params: VanillaParams):
    write_checkpoint(path, "vanilla", asdict(config),
                     [(name, t.data) for name, t in params.named_tensors()])


def load_vanilla_checkpoint(path, expected_config: VanillaConfig | None = None):
    header, arrays = read_checkpoint(path)
    if header.get("model_kind") != "vanilla":
        raise CheckpointHeaderError(
            f"{path}: model kind {header.get('model_kind')!r}, expected 'vanilla'"
        )
    try:
        config = VanillaConfig(**header["config"]).validate()
    except (TypeError, ConfigError) as e:
        raise CheckpointHeaderError(f"{path}: bad config in header ({e})") from e
    check = expected_config if expected_config is not None else config
    expected = census(vanilla_layout(check))
    stored = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    for i in range(max(len(expected), len(stored))):
        if i >= len(stored) or i >= len(expected) or expected[i] != stored[i]:
            offender = stored[i][0] if i < len(stored) else expected[i][0]
            raise CheckpointCensusError(f"{path}: census mismatch at tensor {offender!r}")
    tensors = {
        name: Tensor(arrays[name], requires_grad=(kind != "pos"))
        for name, _, kind in vanilla_layout(check)
    }
    return VanillaParams(check, tensors), check


# -- ElasticNet ------------------------------------------------------------------


@dataclass
class ElasticNetParams:
    weights: np.ndarray
    intercept: float
    alpha: float
    l1_ratio: float


def soft_threshold(rho, threshold):
    return np.sign(rho) * max(abs(rho) - threshold, 0.0)


def elastic_net_objective(X, y, weights, intercept, alpha, l1_ratio):
    r = y - X @ weights - intercept
    penalty = alpha * (l1_ratio * np.abs(weights).sum()
                       + 0.5 * (1.0 - l1_ratio) * (weights**2).sum())
    return float(0.5 * np.mean(r**2) + penalty)


def elastic_net_fit(X, y, alpha, l1_ratio, max_sweeps=1000, tol=1e-6, trace=None):
    """Cyclic coordinate descent on
        (1/2n)||y - Xw - b||^2 + alpha * (l1_ratio ||w||_1 + (1-l1_ratio)/2 ||w||^2)
    with an unpenalized intercept, stopping when the largest coordinate update
    falls below `tol` or after `max_sweeps` full sweeps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DimensionError(f"bad problem shapes X{X.shape}, y{y.shape}")
    if X.shape[0] < 1:
        raise DataError("need at least one sample")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataError("non-finite values in the regression problem")
    if not (0.0 <= l1_ratio <= 1.0):
        raise ConfigError("l1_ratio must lie in [0, 1]")
    n, p = X.shape
    w = np.zeros(p)
    b = float(y.mean())
    r = y - b  # residual y - Xw - b, maintained incrementally
    z = (X * X).mean(axis=0)
    l1 = alpha * l1_ratio
    l2 = alpha * (1.0 - l1_ratio)
    for _ in range(max_sweeps):
        max_delta = 0.0
        shift = float(r.mean())
        if shift != 0.0:
            b += shift
            r -= shift
            max_delta = abs(shift)
        for j in range(p):
            if z[j] == 0.0 and l2 == 0.0:
                continue
            rho = float(X[:, j] @ r) / n + z[j] * w[j]
            w_new = soft_threshold(rho, l1) / (z[j] + l2)
            delta = w_new - w[j]
            if delta != 0.0:
                r -= delta * X[:, j]
                w[j] = w_new
                max_delta = max(max_delta, abs(delta))
        if trace is not None:
            trace.append(elastic_net_objective(X, y, w, b, alpha, l1_ratio))
        if max_delta < tol:
            break
    return ElasticNetParams(weights=w, intercept=b, alpha=alpha, l1_ratio=l1_ratio)


def elastic_net_predict(params: ElasticNetParams, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != params.weights.shape[0]:
        raise DimensionError(
            f"design width {X.shape[-1]} != weight count {params.weights.shape[0]}"
        )
    return X @ params.weights + params.intercept


def flatten_sample(sample):
    """Both modality windows flattened into one feature vector (the series
    window already carries the target history as its last column)."""
    return np.concatenate([
        np.asarray(sample.x_txt.values, dtype=np.float64).reshape(-1),
        np.asarray(sample.x_ts.values, dtype=np.float64).reshape(-1),
    ])


def design_matrix(samples):
    return np.stack([flatten_sample(s) for s in samples])


ALPHA_GRID = (1e-3, 1e-2, 1e-1, 1.0)


class ElasticNetForecaster:
    """One independent ElasticNet per horizon step; alpha picked per step on
    the validation split from a fixed grid, l1_ratio fixed at 0.5."""

    kind = "elasticnet"

    def __init__(self, horizon, alphas=ALPHA_GRID, l1_ratio=0.5):
        self.horizon = horizon
        self.alphas = tuple(alphas)
        self.l1_ratio = l1_ratio
        self.models: list[ElasticNetParams] = []

    def fit(self, train_samples, val_samples):
        if not train_samples or not val_samples:
            raise DataError("ElasticNet needs non-empty train and validation splits")
        X_train = design_matrix(train_samples)
        X_val = design_matrix(val_samples)
        y_train = np.stack([s.y_future for s in train_samples])
        y_val = np.stack([s.y_future for s in val_samples])
        self.models = []
        for step in range(self.horizon):
            best = None
            best_mse = float("inf")
            for alpha in self.alphas:
                params = elastic_net_fit(X_train, y_train[:, step], alpha, self.l1_ratio)
                mse = float(np.mean((elastic_net_predict(params, X_val) - y_val[:, step]) ** 2))
                if mse < best_mse:
                    best, best_mse = params, mse
            self.models.append(best)
        return self

    def predict_batch(self, samples, sink=None):
        if len(self.models) != self.horizon:
            raise DataError("ElasticNet forecaster is not fitted")
        X = design_matrix(samples)
        return np.stack([elastic_net_predict(m, X) for m in self.models], axis=1)

    def predict_autoregressive(self, sample):
        return Tensor(self.predict_batch([sample])[0][:, None])


def save_elasticnet_checkpoint(path, forecaster: ElasticNetForecaster, feature_width):
    config = {
        "horizon": forecaster.horizon,
        "l1_ratio": forecaster.l1_ratio,
        "feature_width": feature_width,
        "alphas": list(forecaster.alphas),
        "chosen_alphas": [m.alpha for m in forecaster.models],
    }
    arrays = []
    for step, m in enumerate(forecaster.models):
        arrays.append((f"step{step}.weights", m.weights))
        arrays.append((f"step{step}.intercept", np.array([m.intercept])))
    write_checkpoint(path, "elasticnet", config, arrays)


def load_elasticnet_checkpoint(path):
    header, arrays = read_checkpoint(path)
    if header.get("model_kind") != "elasticnet":
        raise CheckpointHeaderError(
            f"{path}: model kind {header.get('model_kind')!r}, expected 'elasticnet'"
        )
    cfg = header["config"]
    fc = ElasticNetForecaster(horizon=cfg["horizon"], alphas=cfg["alphas"],
                              l1_ratio=cfg["l1_ratio"])
    chosen = cfg["chosen_alphas"]
    for step in range(fc.horizon):
        name = f"step{step}.weights"
        if name not in arrays:
            raise CheckpointCensusError(f"{path}: missing tensor {name!r}")
        fc.models.append(ElasticNetParams(
            weights=arrays[name].astype(np.float64),
            intercept=float(arrays[f"step{step}.intercept"][0]),
            alpha=chosen[step], l1_ratio=cfg["l1_ratio"]))
    return fc, cfg
