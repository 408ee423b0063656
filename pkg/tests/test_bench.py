import csv
import struct

import numpy as np
import pytest

from moeshard.bench import cli
from moeshard.bench.config import ExperimentConfig, default_k_r, load_config, parse_config_text
from moeshard.bench.experiment import (
    CSV_COLUMNS,
    append_rows,
    emit_ecdf,
    format_rows,
    run_experiment,
    run_sweep,
)
from moeshard.bench.weights import (
    decode_weights,
    encode_weights,
    generate_tokens,
    generate_weights,
    load_weights,
    save_weights,
)
from moeshard.errors import ConfigError, FormatError

SMALL = dict(b=4, s=3, h=8, d_ff=16, num_experts=8, num_devices=2, num_layers=2, seed=11)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert (c.b, c.s, c.num_experts, c.alpha_r, c.skewed_experts) == (250, 120, 128, 0.6, 13)
        assert c.tokens_per_device == 30_000
        assert c.capacity.factor(128) == 50

    @pytest.mark.parametrize("E, k", [(8, 1), (16, 2), (32, 3), (64, 6), (128, 13), (256, 26), (5, 1)])
    def test_default_k_r(self, E, k):
        assert default_k_r(E) == k

    def test_parse(self):
        text = "# comment\nb = 10  # trailing\n\nrouter = linear\ncf = 1.5\nk_r = none\nseed = 0x10\n"
        assert parse_config_text(text) == {"b": 10, "router": "linear", "cf": 1.5, "k_r": None, "seed": 16}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config_text("bogus = 1")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("b = 1\nnonsense")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("b = ten")

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("b = 10\ns = 7\n")
        c = load_config(path, b=20, s=None)
        assert (c.b, c.s) == (20, 7)

    @pytest.mark.parametrize("changes", [
        dict(b=0), dict(num_devices=0), dict(engine="tp"), dict(fusion="fast"),
        dict(alpha_r=-0.1), dict(k_r=200), dict(d_ff=3070),
        dict(engine="ep", num_experts=126), dict(router="linear", mode="trace"),
        dict(cf=-1.0), dict(launch_overhead=-1.0),
    ])
    def test_validation(self, changes):
        with pytest.raises(ConfigError):
            ExperimentConfig(**changes).validate()

    def test_divisibility_message_is_verbatim(self):
        with pytest.raises(ConfigError, match="d_ff=3070 is not divisible by 4 devices"):
            ExperimentConfig(d_ff=3070).validate()


class TestWeights:
    def test_round_trip_bit_exact(self, tmp_path):
        w = generate_weights(4, 8, 3, 2, seed=9)
        save_weights(w, tmp_path / "w.bin")
        back = load_weights(tmp_path / "w.bin")
        assert (back.h, back.d_ff, back.num_experts, back.num_layers) == (4, 8, 3, 2)
        for a, b in zip(w.layers, back.layers):
            assert a.gate.tobytes() == b.gate.tobytes()
            for ea, eb in zip(a.experts, b.experts):
                assert ea.W_i.tobytes() == eb.W_i.tobytes()
                assert ea.W_o.tobytes() == eb.W_o.tobytes()
        assert encode_weights(back) == encode_weights(w)

    def test_layout(self):
        w = generate_weights(2, 4, 2, 1, seed=1)
        data = encode_weights(w)
        assert struct.unpack_from("<4s5I", data) == (b"MOEW", 1, 2, 4, 2, 1)
        assert len(data) == 24 + 4 * (2 * 2 + 2 * (2 * 4 + 4 * 2))
        gate = np.frombuffer(data, "<f4", 4, offset=24).reshape(2, 2)
        np.testing.assert_array_equal(gate, w.layers[0].gate)
        w_i = np.frombuffer(data, "<f4", 8, offset=24 + 16).reshape(2, 4)
        np.testing.assert_array_equal(w_i, w.layers[0].experts[0].W_i)

    def test_seeded_scale(self):
        w = generate_weights(64, 256, 1, 1, seed=2)
        e = w.layers[0].experts[0]
        assert e.W_i.dtype == np.float32
        assert e.W_i.std() == pytest.approx(1 / 8, rel=0.05)
        assert e.W_o.std() == pytest.approx(1 / 16, rel=0.05)
        assert generate_weights(64, 256, 1, 1, seed=2).layers[0].gate.tobytes() == w.layers[0].gate.tobytes()

    def test_bad_magic(self):
        data = bytearray(encode_weights(generate_weights(2, 2, 1, 1, seed=0)))
        data[:4] = b"MOEX"
        with pytest.raises(FormatError) as info:
            decode_weights(bytes(data))
        assert info.value.offset == 0

    def test_bad_version(self):
        data = bytearray(encode_weights(generate_weights(2, 2, 1, 1, seed=0)))
        data[4] = 2
        with pytest.raises(FormatError) as info:
            decode_weights(bytes(data))
        assert info.value.offset == 4

    def test_truncated(self):
        data = encode_weights(generate_weights(2, 2, 1, 1, seed=0))
        with pytest.raises(FormatError, match="offset"):
            decode_weights(data[:-1])
        with pytest.raises(FormatError):
            decode_weights(data[:10])

    def test_header_disagrees_with_payload(self):
        data = bytearray(encode_weights(generate_weights(2, 2, 1, 1, seed=0)))
        struct.pack_into("<I", data, 20, 2)  # claims two layers
        with pytest.raises(FormatError):
            decode_weights(bytes(data))
        with pytest.raises(FormatError):
            decode_weights(encode_weights(generate_weights(2, 2, 1, 1, seed=0)) + b"\0")

    def test_tokens_per_rank(self):
        a, b = generate_tokens(5, 4, 0, 0), generate_tokens(5, 4, 0, 1)
        assert a.shape == (5, 4) and a.dtype == np.float32
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, generate_tokens(5, 4, 0, 0))


class TestExperiment:
    def test_row_columns(self):
        row = run_experiment(ExperimentConfig(**SMALL, mode="execute")).row()
        assert tuple(row) == CSV_COLUMNS
        assert row["cf"] == "none" and row["drops"] == 0
        assert row["k_r"] == 1

    def test_ep_row(self):
        row = run_experiment(ExperimentConfig(**SMALL, engine="ep", mode="execute", router="linear")).row()
        assert row["cf"] == "8" and row["alpha_r"] == "none"

    def test_execute_and_trace_rows_agree(self):
        for engine in ("sharded", "ep"):
            rows = [run_experiment(ExperimentConfig(**SMALL, engine=engine, mode=m)).row() for m in ("execute", "trace")]
            assert rows[0] == rows[1]

    def test_bytes_column(self):
        row = run_experiment(ExperimentConfig(**SMALL)).row()
        # Scatter and gather each move one copy per peer; plus the metadata counts.
        per_layer = 2 * 12 * 8 * 4 + 8 * 8
        assert float(row["bytes_sent_per_dev"]) == 2 * per_layer

    def test_needs_seed(self):
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig(**{**SMALL, "seed": None}))

    def test_csv_deterministic(self, tmp_path):
        c = ExperimentConfig(**SMALL, mode="execute")
        for name in ("a.csv", "b.csv"):
            append_rows(tmp_path / name, [run_experiment(c).row()])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_append_writes_one_header(self, tmp_path):
        row = run_experiment(ExperimentConfig(**SMALL)).row()
        append_rows(tmp_path / "m.csv", [row])
        append_rows(tmp_path / "m.csv", [row])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3

    def test_expert_sweep_rows(self):
        base = ExperimentConfig(num_layers=1, seed=0)
        results = run_sweep(base, experts=[8, 16, 32, 64, 128, 256], engines=["sharded", "ep"])
        rows = [r.row() for r in results]
        for engine in ("sharded", "ep"):
            assert [r["experts"] for r in rows if r["engine"] == engine] == [8, 16, 32, 64, 128, 256]

    def test_speedup_rises_with_batch(self):
        base = ExperimentConfig(num_layers=2, seed=1)
        results = run_sweep(base, batches=[10, 100, 250, 450], engines=["sharded", "ep"])
        ttft = {(r.config.engine, r.config.b): r.metrics.simulated_ttft for r in results}
        speedups = [ttft["ep", b] / ttft["sharded", b] for b in (10, 100, 250, 450)]
        assert speedups == sorted(speedups)
        assert speedups[0] > 1

    def test_emit_ecdf(self, tmp_path):
        result = run_experiment(ExperimentConfig(**{**SMALL, "num_layers": 12}))
        paths = emit_ecdf(result.metrics, tmp_path / "e.csv")
        assert [p.name for p in paths] == ["e_layer0.csv", "e_layer11.csv"]
        for p in paths:
            with p.open() as f:
                rows = list(csv.DictReader(f))
            assert list(rows[0]) == ["expert_id", "token_count", "cumulative_fraction"]
            assert len(rows) == 8
            assert rows[-1]["cumulative_fraction"] == "1.000000"
            assert sum(int(r["token_count"]) for r in rows) == 24

    def test_emit_ecdf_single_layer(self, tmp_path):
        result = run_experiment(ExperimentConfig(**{**SMALL, "num_layers": 1}))
        assert [p.name for p in emit_ecdf(result.metrics, tmp_path / "e.csv")] == ["e_layer0.csv"]

    def test_format_rows_header(self):
        assert format_rows([]).strip() == ",".join(CSV_COLUMNS)


class TestCli:
    ARGS = ["--batch", "4", "--seq-len", "3", "--hidden", "8", "--d-ff", "16",
            "--experts", "8", "--devices", "2", "--layers", "2", "--seed", "3"]

    def test_run_stdout(self, capsys):
        assert cli.main(["run", *self.ARGS]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2

    def test_run_appends(self, tmp_path):
        out = tmp_path / "m.csv"
        for _ in range(2):
            assert cli.main(["run", *self.ARGS, "--output", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 3

    def test_seed_required(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["run", "--batch", "4"])
        assert info.value.code != 0

    def test_config_error_exit(self, capsys):
        assert cli.main(["run", *self.ARGS, "--d-ff", "15"]) == 2
        assert "not divisible" in capsys.readouterr().err

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("b = 4\ns = 3\nh = 8\nd_ff = 16\nnum_experts = 8\nnum_devices = 2\nnum_layers = 1\n")
        assert cli.main(["run", "--config", str(cfg), "--seed", "1", "--engine", "ep"]) == 0
        row = next(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert row["engine"] == "ep" and row["layers"] == "1"

    def test_sweep(self, capsys):
        assert cli.main(["sweep", *self.ARGS, "--sweep-experts", "4", "8", "--engines", "sharded", "ep",
                         "--fusions", "grouped_gemm", "fused_per_expert"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert len(rows) == 2 * (2 + 1)

    def test_gen_weights_then_execute(self, tmp_path, capsys):
        w = tmp_path / "w.bin"
        assert cli.main(["gen-weights", *self.ARGS, "--output", str(w)]) == 0
        assert load_weights(w).num_layers == 2
        assert cli.main(["run", *self.ARGS, "--mode", "execute", "--weights", str(w)]) == 0
        assert cli.main(["run", *self.ARGS, "--mode", "execute"]) == 0
        a, b = capsys.readouterr().out.splitlines()[1::2]
        assert a == b

    def test_ecdf(self, tmp_path, capsys):
        assert cli.main(["ecdf", *self.ARGS, "--output", str(tmp_path / "x.csv")]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x_layer0.csv", "x_layer1.csv"]
        assert cli.main(["ecdf", *self.ARGS, "--layer", "1", "--output", str(tmp_path / "y.csv")]) == 0
        assert (tmp_path / "y_layer1.csv").exists() and not (tmp_path / "y_layer0.csv").exists()
