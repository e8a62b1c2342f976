from types import SimpleNamespace

import numpy as np
import pytest

from mat_forecaster import numerics as nm
from mat_forecaster.attention import feature_level_attention, masked_self_block, target_modal_block
from mat_forecaster.errors import (
    CheckpointCensusError,
    CheckpointHeaderError,
    CheckpointTruncationError,
    ConfigError,
    DataError,
)
from mat_forecaster.model import (
    AttentionRecord,
    MATConfig,
    MATModel,
    MATParams,
    census,
    load_checkpoint,
    mat_layout,
    save_checkpoint,
    sinusoidal_table,
)
from mat_forecaster.numerics import Tensor

from fdcheck import central_differences


def tiny_config(**overrides):
    base = dict(d_txt=3, d_ts=4, d_model=8, heads=2, n_enc_layers=1, n_dec_layers=1,
                d_ff=12, lookback_txt=4, lookback_ts=5, horizon=3, dropout=0.0)
    base.update(overrides)
    return MATConfig(**base).validate()


def make_sample(config, seed=0):
    rng = np.random.default_rng(seed)
    return SimpleNamespace(
        x_txt=SimpleNamespace(values=rng.normal(size=(config.lookback_txt, config.d_txt)).astype(np.float32)),
        x_ts=SimpleNamespace(values=rng.normal(size=(config.lookback_ts, config.d_ts)).astype(np.float32)),
        y_hist=rng.normal(size=config.lookback_ts).astype(np.float32),
        y_future=rng.normal(size=config.horizon).astype(np.float32),
    )


class TestEmbed:
    def test_zero_input_keeps_only_positions(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=1)
        t = 4
        out = model.embed_modality(Tensor(np.zeros((t, cfg.d_txt), dtype=np.float32)), "txt")
        assert np.allclose(out.data, model.params.pos.data[:t], atol=1e-7)

    def test_shift_changes_only_positional_component(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=2)
        x = Tensor(np.random.default_rng(3).normal(size=(3, cfg.d_txt)).astype(np.float32))
        base = model.embed_modality(x, "txt", positions_from=0)
        shifted = model.embed_modality(x, "txt", positions_from=2)
        want = model.params.pos.data[2:5] - model.params.pos.data[0:3]
        assert np.allclose(shifted.data - base.data, want, atol=1e-6)

    @pytest.mark.parametrize("t", [1, 2, 5])
    def test_output_shape(self, t):
        cfg = tiny_config()
        model = MATModel(cfg, seed=4)
        out = model.embed_modality(Tensor(np.zeros((t, cfg.d_ts), dtype=np.float32)), "ts")
        assert out.shape == (t, cfg.d_model)

    def test_tag_mismatch_is_config_error(self):
        model = MATModel(tiny_config(), seed=5)
        with pytest.raises(ConfigError):
            model.embed_modality(Tensor(np.zeros((2, 99), dtype=np.float32)), "txt")
        with pytest.raises(ConfigError):
            model.embed_modality(Tensor(np.zeros((2, 3), dtype=np.float32)), "bogus")

    def test_sinusoid_table_values(self):
        table = sinusoidal_table(4, 6)
        assert table[0, 0] == 0.0 and table[0, 1] == 1.0
        assert table[2, 0] == pytest.approx(np.sin(2.0), abs=1e-6)
        assert table[2, 1] == pytest.approx(np.cos(2.0), abs=1e-6)


class TestEncode:
    @pytest.mark.parametrize("n_layers", [1, 2, 3])
    def test_shape_trace_is_stable_after_first_exchange(self, n_layers):
        # frozen trace: with lookbacks (6, 9) the text-content output is length
        # 9 and the series-content output length 6, for any stack depth >= 1
        cfg = tiny_config(lookback_txt=6, lookback_ts=9, n_enc_layers=n_layers)
        model = MATModel(cfg, seed=6)
        s = make_sample(cfg, seed=7)
        enc_txt, enc_ts = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        assert enc_txt.shape == (9, cfg.d_model)
        assert enc_ts.shape == (6, cfg.d_model)

    def test_zero_layers_degenerates_to_embedded_weighted_inputs(self):
        cfg = tiny_config(n_enc_layers=0)
        model = MATModel(cfg, seed=8)
        s = make_sample(cfg, seed=9)
        enc_txt, enc_ts = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        _, xw = feature_level_attention(Tensor(s.x_txt.values), model.params.feat_txt_enc)
        want = model.embed_modality(xw, "txt")
        assert np.allclose(enc_txt.data, want.data, atol=1e-6)
        assert enc_ts.shape == (cfg.lookback_ts, cfg.d_model)

    def test_identical_streams_with_identical_parameters(self):
        cfg = tiny_config(d_txt=3, d_ts=3, lookback_txt=5, lookback_ts=5, n_enc_layers=2)
        model = MATModel(cfg, seed=10)
        # mirror every ts-stream tensor from the txt stream
        tensors = dict(model.params.named_tensors())
        for name, t in list(tensors.items()):
            if ".ts." in name or name.startswith("feat.ts_") or name.startswith("embed.ts"):
                twin = name.replace(".ts.", ".txt.").replace("feat.ts_", "feat.txt_").replace(
                    "embed.ts", "embed.txt")
                t.data = tensors[twin].data.copy()
        x = np.random.default_rng(11).normal(size=(5, 3)).astype(np.float32)
        enc_txt, enc_ts = model.encode(Tensor(x), Tensor(x))
        assert np.allclose(enc_txt.data, enc_ts.data, atol=1e-6)


class TestDecode:
    def test_first_position_ignores_later_history(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=12)
        s = make_sample(cfg, seed=13)
        enc = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        y = np.zeros((4, 1), dtype=np.float32)
        base = model.decode(Tensor(y), *enc)
        y2 = y.copy()
        y2[1:] += 1.5
        moved = model.decode(Tensor(y2), *enc)
        assert np.allclose(base.data[0], moved.data[0], atol=1e-6)
        assert not np.allclose(base.data[1:], moved.data[1:], atol=1e-6)

    def test_single_step_decode(self):
        cfg = tiny_config(horizon=1)
        model = MATModel(cfg, seed=14)
        s = make_sample(cfg, seed=15)
        enc = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        out = model.decode(Tensor(np.array([[0.3]], dtype=np.float32)), *enc)
        assert out.shape == (1, 1)

    def test_matches_step_by_step_composition(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=16)
        p = model.params
        s = make_sample(cfg, seed=17)
        enc_txt, enc_ts = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        y = np.random.default_rng(18).normal(size=(3, 1)).astype(np.float32)
        got = model.decode(Tensor(y), enc_txt, enc_ts)

        h = model.embed_modality(Tensor(y), "tar")
        layer = p.dec_layers[0]
        st = masked_self_block(h, layer.masked, layer.ln_masked)
        a_txt = target_modal_block(st, enc_txt, p.feat_txt_dec, layer.tar_txt)
        a_ts = target_modal_block(st, enc_ts, p.feat_ts_dec, layer.tar_ts)
        fused = nm.layer_norm(st + a_txt.values + a_ts.values, layer.ln_fuse.gain, layer.ln_fuse.bias)
        hidden = nm.relu(nm.matmul(fused, layer.ffn.w1) + layer.ffn.b1)
        ff = nm.matmul(hidden, layer.ffn.w2) + layer.ffn.b2
        hh = nm.layer_norm(fused + ff, layer.ln_ffn.gain, layer.ln_ffn.bias)
        want = nm.matmul(hh, p.head[0]) + p.head[1]
        assert np.allclose(got.data, want.data, atol=1e-5)


class TestForward:
    def test_output_length(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=19)
        out = model.forward(make_sample(cfg, seed=20))
        assert out.shape == (cfg.horizon, 1)

    def test_teacher_forcing_is_causal_in_future_targets(self):
        cfg = tiny_config(horizon=4, lookback_ts=6)
        model = MATModel(cfg, seed=21)
        s = make_sample(cfg, seed=22)
        base = model.forward(s).data
        for j in range(cfg.horizon):
            s2 = make_sample(cfg, seed=22)
            s2.y_future = s2.y_future.copy()
            s2.y_future[j] += 2.0
            moved = model.forward(s2).data
            assert np.allclose(moved[: j + 1], base[: j + 1], atol=1e-6)

    def test_teacher_forced_and_autoregressive_agree_at_step_one(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=23)
        s = make_sample(cfg, seed=24)
        tf = model.forward(s, teacher_forcing=True).data
        ar = model.predict_autoregressive(s).data
        assert tf[0, 0] == pytest.approx(ar[0, 0], abs=1e-6)

    def test_window_mismatch_is_data_error(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=25)
        s = make_sample(cfg, seed=26)
        s.x_ts = SimpleNamespace(values=s.x_ts.values[:-1])
        with pytest.raises(DataError):
            model.forward(s)


class TestPredictAutoregressive:
    def test_horizon_one_equals_single_decode(self):
        cfg = tiny_config(horizon=1)
        model = MATModel(cfg, seed=27)
        s = make_sample(cfg, seed=28)
        pred = model.predict_autoregressive(s).data
        enc = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        want = model.decode(Tensor(s.y_hist[-1:].reshape(1, 1)), *enc).data
        assert pred[0, 0] == pytest.approx(want[0, 0], abs=1e-7)

    def test_bitwise_deterministic(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=29)
        s = make_sample(cfg, seed=30)
        a = model.predict_autoregressive(s).data
        b = model.predict_autoregressive(s).data
        assert np.array_equal(a, b)

    def test_matches_manual_unroll(self):
        cfg = tiny_config(horizon=3)
        model = MATModel(cfg, seed=31)
        s = make_sample(cfg, seed=32)
        pred = model.predict_autoregressive(s).data[:, 0]

        enc_txt, enc_ts = model.encode(Tensor(s.x_txt.values), Tensor(s.x_ts.values))
        c = cfg.decoder_context
        seq = list(s.y_hist[-c:])
        manual = []
        for _ in range(3):
            out = model.decode(Tensor(np.array(seq, dtype=np.float32).reshape(-1, 1)),
                               enc_txt, enc_ts)
            nxt = float(out.data[-1, 0])
            manual.append(nxt)
            seq.append(nxt)
        assert np.allclose(pred, manual, atol=1e-6)


class TestExportAttention:
    def test_rows_normalized_and_census_complete(self):
        cfg = tiny_config(n_enc_layers=2, horizon=2)
        model = MATModel(cfg, seed=33)
        rec = model.export_attention(make_sample(cfg, seed=34))
        assert sorted(rec.temporal) == sorted(rec.expected_keys(cfg))
        assert np.allclose(rec.feature_weights_txt.sum(axis=-1), 1.0, atol=1e-6)
        assert np.allclose(rec.feature_weights_ts.sum(axis=-1), 1.0, atol=1e-6)
        for key, mat in rec.temporal.items():
            assert mat.ndim == 3
            assert np.allclose(mat.sum(axis=-1), 1.0, atol=1e-6), key

    def test_masked_rows_have_exact_zero_above_diagonal(self):
        cfg = tiny_config(horizon=3)
        model = MATModel(cfg, seed=35)
        rec = model.export_attention(make_sample(cfg, seed=36))
        masked = rec.temporal[(0, "masked", "tar")]
        L = masked.shape[-1]
        upper = np.triu(np.ones((L, L), dtype=bool), k=1)
        assert np.all(masked[:, upper] == 0.0)

    def test_capturing_pass_matches_plain_prediction_bitwise(self):
        cfg = tiny_config()
        model = MATModel(cfg, seed=37)
        s = make_sample(cfg, seed=38)
        plain = model.predict_autoregressive(s).data[:, 0]
        rec = model.export_attention(s)
        assert np.array_equal(plain, rec.prediction)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config()
        model = MATModel(cfg, seed=39)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, model.params)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        for (name_a, a), (name_b, b) in zip(model.params.named_tensors(), loaded.named_tensors()):
            assert name_a == name_b
            assert np.array_equal(a.data, b.data), name_a

    def test_truncated_file(self, tmp_path):
        cfg = tiny_config()
        model = MATModel(cfg, seed=40)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, model.params)
        blob = path.read_bytes()
        path.write_bytes(blob[:-64])
        with pytest.raises(CheckpointTruncationError):
            load_checkpoint(path)

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(CheckpointHeaderError):
            load_checkpoint(path)

    def test_census_mismatch_names_first_offender(self, tmp_path):
        cfg_a = tiny_config(d_model=8)
        cfg_b = tiny_config(d_model=12, heads=2)
        model = MATModel(cfg_a, seed=41)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg_a, model.params)
        with pytest.raises(CheckpointCensusError) as e:
            load_checkpoint(path, expected_config=cfg_b)
        assert "feat.txt_dec.kernel" in str(e.value)


class TestInvariants:
    def test_end_to_end_causality_by_finite_differences(self):
        cfg = tiny_config(horizon=3, lookback_ts=6, d_model=8)
        model = MATModel(cfg, seed=42)
        s = make_sample(cfg, seed=43)
        y_future = Tensor(s.y_future.astype(np.float64))
        s.y_future = y_future.data  # in-place perturbation target

        for k in range(cfg.horizon):
            mark = np.zeros(cfg.horizon)
            mark[k] = 1.0
            [fd] = central_differences(
                lambda: float((model.forward(s).data[:, 0] * mark).sum()), [y_future]
            )
            assert np.allclose(fd[k:], 0.0, atol=1e-8), k

    @pytest.mark.parametrize("lb_txt", [3, 6, 9])
    @pytest.mark.parametrize("lb_ts", [3, 6, 9])
    def test_asynchronous_lookbacks_all_run(self, lb_txt, lb_ts):
        cfg = tiny_config(lookback_txt=lb_txt, lookback_ts=lb_ts, horizon=2)
        model = MATModel(cfg, seed=44)
        out = model.forward(make_sample(cfg, seed=45))
        assert out.shape == (2, 1)
        pred = model.predict_autoregressive(make_sample(cfg, seed=46))
        assert pred.shape == (2, 1)

    def test_census_is_pure_function_of_config(self):
        cfg = tiny_config()
        assert census(mat_layout(cfg)) == census(mat_layout(tiny_config()))
        a = MATParams.initialize(cfg, seed=1)
        b = MATParams.initialize(cfg, seed=2)
        assert [n for n, _ in a.named_tensors()] == [n for n, _ in b.named_tensors()]

    def test_param_count_matches_hand_arithmetic(self):
        cfg = tiny_config(d_txt=2, d_ts=3, d_model=4, heads=2, n_enc_layers=1,
                          n_dec_layers=1, d_ff=6)
        dm, dh, dff = 4, 2, 6
        feat = (2 * 2 + 2) + (3 * 3 + 3) + 2 * (dm * dm + dm)
        embed = (2 * dm + dm) + (3 * dm + dm) + (1 * dm + dm)
        mha = 3 * 2 * (dm * dh) + (2 * dh) * dm
        ln = 2 * dm
        ffn_n = dm * dff + dff + dff * dm + dm
        enc = 2 * (2 * mha + 3 * ln + ffn_n)
        dec = 3 * mha + 3 * ln + ffn_n
        head = dm + 1
        expected = feat + embed + enc + dec + head
        assert MATParams.initialize(cfg, seed=0).n_parameters() == expected
