"""Command-line contract tests: config validation, exit codes, CSV dialect,
determinism, and fault-injection self-tests."""

import json

import numpy as np
import pytest

import hot.attention
from hot.cli import ConfigError, load_config, main


def run_cli(args):
    return main(args)


class TestConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        assert run_cli(["equiv", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_malformed_json_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{nope")
        assert run_cli(["equiv", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_known_key_override(self, tmp_path):
        cfg = tmp_path / "ok.json"
        cfg.write_text(json.dumps({"seeds": [7], "shapes": [[2, 2]]}))
        out = tmp_path / "o"
        assert run_cli(["equiv", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "equiv.csv").read_text().splitlines()
        assert any(",7," in r for r in rows)

    def test_seed_flag_overrides(self):
        cfg = load_config("equiv", None, {"seeds": [42]})
        assert cfg["seeds"] == [42]

    def test_defaults_complete(self):
        for command in ("equiv", "gradcheck", "kronrank", "bench", "ablate", "train"):
            cfg = load_config(command, None, {})
            assert isinstance(cfg, dict) and cfg

    def test_config_must_be_object(self, tmp_path):
        cfg = tmp_path / "list.json"
        cfg.write_text("[1,2]")
        with pytest.raises(ConfigError):
            load_config("equiv", str(cfg), {})


@pytest.fixture
def small_equiv_config(tmp_path):
    cfg = tmp_path / "equiv.json"
    cfg.write_text(json.dumps({"shapes": [[2, 3], [4]], "heads": [2], "seeds": [0]}))
    return cfg


class TestEquivCommand:
    def test_passes_and_writes_reports(self, tmp_path, small_equiv_config):
        out = tmp_path / "out"
        assert run_cli(["equiv", "--config", str(small_equiv_config), "--out", str(out)]) == 0
        summary = json.loads((out / "equiv_summary.json").read_text())
        assert summary["passed"] is True
        assert summary["command"] == "equiv"
        text = (out / "equiv.csv").read_text(encoding="utf-8")
        assert "\r" not in text
        header = text.splitlines()[0].split(",")
        assert header == ["check", "shape", "heads", "seed", "max_abs_err", "tolerance", "status"]

    def test_csv_floats_round_trip(self, tmp_path, small_equiv_config):
        out = tmp_path / "out"
        run_cli(["equiv", "--config", str(small_equiv_config), "--out", str(out)])
        for line in (out / "equiv.csv").read_text().splitlines()[1:]:
            err = line.split(",")[4]
            assert float(err) == float(f"{float(err):.17g}")

    def test_rerun_is_byte_identical(self, tmp_path, small_equiv_config):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        run_cli(["equiv", "--config", str(small_equiv_config), "--out", str(out1)])
        run_cli(["equiv", "--config", str(small_equiv_config), "--out", str(out2)])
        assert (out1 / "equiv.csv").read_bytes() == (out2 / "equiv.csv").read_bytes()
        assert (out1 / "equiv_summary.json").read_bytes() == (out2 / "equiv_summary.json").read_bytes()

    def test_injected_scaling_bug_fails_suite(self, tmp_path, small_equiv_config, monkeypatch):
        # drop the 1/sqrt(d) scaling: the materialized oracle must catch it
        import hot.cli as cli

        real = hot.attention.mode_attention_matrix

        def buggy(q, k, mode, pooling="sum"):
            from hot.attention import softmax_rows
            from hot.tensor import pool_sum_except

            return softmax_rows(pool_sum_except(q, mode) @ pool_sum_except(k, mode).T)

        monkeypatch.setattr(cli, "factorized_attention_softmax",
                            lambda x, w, **kw: _buggy_factorized(x, w, buggy))
        out = tmp_path / "out"
        assert run_cli(["equiv", "--config", str(small_equiv_config), "--out", str(out)]) == 1
        summary = json.loads((out / "equiv_summary.json").read_text())
        assert summary["passed"] is False
        assert real is hot.attention.mode_attention_matrix


def _buggy_factorized(x, w, matrix_fn):
    from hot.tensor import mode_product

    out = np.zeros_like(x)
    for h in range(w.heads):
        q = x @ w.wq[h]
        kt = x @ w.wk[h]
        p = x @ w.wv[h]
        for i in range(x.ndim - 1):
            p = mode_product(p, matrix_fn(q, kt, i), i)
        out += p @ w.wo[h]
    return out


class TestKronrankCommand:
    def test_small_run_passes(self, tmp_path):
        cfg = tmp_path / "kr.json"
        cfg.write_text(json.dumps({"dims_list": [[2, 2]], "seeds": [0]}))
        out = tmp_path / "out"
        assert run_cli(["kronrank", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "kronrank.csv").read_text().splitlines()
        assert lines[0] == "kind,dims,seed,rank,rel_error"
        # bound for (2,2) is 4, two kinds plus one planted row
        assert len(lines) == 1 + 4 + 4 + 1

    def test_rerun_byte_identical(self, tmp_path):
        cfg = tmp_path / "kr.json"
        cfg.write_text(json.dumps({"dims_list": [[2, 2]], "seeds": [1]}))
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli(["kronrank", "--config", str(cfg), "--out", str(a)])
        run_cli(["kronrank", "--config", str(cfg), "--out", str(b)])
        assert (a / "kronrank.csv").read_bytes() == (b / "kronrank.csv").read_bytes()


class TestGradcheckCommand:
    def test_single_seed_passes(self, tmp_path):
        cfg = tmp_path / "gc.json"
        cfg.write_text(json.dumps({"seeds": [0], "min_coords": 6}))
        out = tmp_path / "out"
        assert run_cli(["gradcheck", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "gradcheck.csv").read_text().splitlines()
        cases = {line.split(",")[0] for line in lines[1:]}
        for expected in ("mode_product", "softmax_rows", "kernelized_mode_apply",
                         "layer_norm", "gelu", "affine", "factored-softmax",
                         "full-linear", "hot-block", "quadratic-self-test",
                         "fault-injection"):
            assert expected in cases


class TestBenchCommand:
    def test_tiny_grid_writes_records(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({
            "variants": ["factored-linear", "full-softmax"],
            "grids": {"factored-linear": [[4, 4], [8, 8]], "full-softmax": [[4, 4], [8, 8]]},
            "reps": 3,
            "warmups": 1,
            "slope_windows": {},
            "track_memory": True,
        }))
        out = tmp_path / "out"
        assert run_cli(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "bench.csv").read_text().splitlines()
        assert lines[0] == "variant,shape,order,tokens,wall_ns_median,peak_bytes,seed"
        assert len(lines) == 5
        samples = (out / "bench_samples.csv").read_text().splitlines()
        assert len(samples) == 1 + 2 * 2 * 3  # raw samples retained

    def test_non_timing_columns_deterministic(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({
            "variants": ["factored-linear"],
            "grids": {"factored-linear": [[4, 4], [8, 8]]},
            "reps": 3,
            "warmups": 1,
            "slope_windows": {},
            "track_memory": False,
        }))
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli(["bench", "--config", str(cfg), "--out", str(a)])
        run_cli(["bench", "--config", str(cfg), "--out", str(b)])

        def non_timing(path):
            rows = (path / "bench.csv").read_text().splitlines()
            return [",".join(np.array(r.split(","))[[0, 1, 2, 3, 6]]) for r in rows]

        assert non_timing(a) == non_timing(b)


class TestTrainAblateCommands:
    def test_train_writes_log_and_checkpoint(self, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "t_len": 16, "n_series": 4, "horizon": 4, "n_train": 24, "n_val": 8,
            "steps": 12, "batch_size": 8, "d_model": 8, "ffn_dim": 16,
        }))
        out = tmp_path / "out"
        assert run_cli(["train", "--config", str(cfg), "--out", str(out)]) == 0
        log = (out / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,train_loss,val_mse,val_mae,seconds"
        assert len(log) > 1
        from hot.model import HOTModel

        model = HOTModel.load(out / "checkpoint")
        assert model.parameter_count() > 0

    def test_micro_ablate_grid(self, tmp_path):
        cfg = tmp_path / "ablate.json"
        cfg.write_text(json.dumps({
            "t_len": 16, "n_series": 4, "horizon": 4, "n_train": 24, "n_val": 8,
            "steps": 6, "batch_size": 8, "d_model": 8, "ffn_dim": 16,
            "seeds": [0], "masks": [[True, True], [False, False]],
            "assert_ordering": False, "include_linear_baseline": True,
        }))
        out = tmp_path / "out"
        assert run_cli(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "ablate.csv").read_text().splitlines()
        assert rows[0].startswith("variant,heads,mask,seed,train_mse")
        summary = json.loads((out / "ablate_summary.json").read_text())
        names = [a["name"] for a in summary["assertions"]]
        assert "parameter count identical across grid" in names
