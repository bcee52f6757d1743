"""Verification and benchmark command line.

    hot <equiv|gradcheck|kronrank|bench|ablate|train> [--config FILE]
        [--seed N] [--out DIR] [--cap N]

Each command reads one JSON config document (unknown keys are rejected),
writes CSV reports plus a ``<command>_summary.json`` with per-assertion
pass/fail, and exits 0 when every assertion holds, 1 on a tolerance breach,
and 2 on a config error.  All randomness is seeded, so reruns with the same
config reproduce every non-timing output byte for byte.

CSV dialect: comma separated, header row, UTF-8, LF line endings, floats with
17 significant digits.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffops as ops
from .attention import (
    factorized_attention_linear,
    factorized_attention_softmax,
    full_attention_linear,
    full_high_order_attention,
    mode_attention_matrix,
    random_attention_weights,
    softmax_rows,
    standard_attention,
)
from .autodiff import Tape
from .features import FeatureMapSpec, projection_matrix
from .kron import kron_chain, kron_decompose, kron_rank_bound, reconstruction_error
from .model import (
    HeadConfig,
    HOTBlockConfig,
    HOTModel,
    ModelConfig,
    PatchEmbedConfig,
    RotaryConfig,
)
from .train import (
    SyntheticTaskSpec,
    collect_grads,
    finite_diff_check,
    gen_synthetic,
    model_loss,
    train_linear_readout,
    train_model,
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


DEFAULTS = {
    "equiv": {
        "shapes": [[6], [2, 3], [4, 5], [8, 8], [2, 3, 4], [2, 2, 2, 2]],
        "heads": [1, 2],
        "d_model": 8,
        "seeds": [0, 1, 2],
        "tolerance": 1e-10,
        "reduction_tolerance": 1e-12,
        "oracle_cap": 4096,
        "feature_count": 64,
    },
    "gradcheck": {
        "shape": [3, 4],
        "d_model": 8,
        "heads": 2,
        "seeds": [0, 1, 2, 3, 4],
        "eps": 1e-5,
        "tolerance": 1e-5,
        "min_coords": 64,
        "feature_count": 8,
        "quadratic_tolerance": 1e-9,
        "fault_threshold": 1e-2,
    },
    "kronrank": {
        "dims_list": [[3, 3], [2, 3]],
        "seeds": [0, 1, 2],
        "exact_tolerance": 1e-8,
        "planted_tolerance": 1e-10,
        "attention_d_model": 8,
        "attention_heads": 2,
    },
    "bench": {
        "variants": ["factored-linear", "full-softmax", "factored-softmax", "full-linear"],
        "grids": {
            "factored-linear": [[16, 16], [32, 32], [64, 64], [128, 128]],
            "factored-softmax": [[16, 16], [32, 32], [64, 64], [128, 128]],
            "full-softmax": [[8, 8], [16, 16], [24, 24], [32, 32]],
            "full-linear": [[16, 16], [32, 32], [64, 64], [128, 128]],
        },
        "d_model": 48,
        "heads": 4,
        "feature_count": 96,
        "reps": 5,
        "warmups": 2,
        "seed": 0,
        "oracle_cap": 4096,
        "slope_windows": {"factored-linear": [0.8, 1.3], "full-softmax": [1.7, 2.3]},
        "memory_ratio": 1.3,
        "track_memory": True,
    },
    "ablate": {
        "task": "separable-spatiotemporal-forecast",
        "t_len": 32,
        "n_series": 8,
        "horizon": 4,
        "n_train": 768,
        "n_val": 64,
        "noise": 0.05,
        "interaction_gain": 0.0,
        "seeds": [0, 1, 2, 3, 4],
        "steps": 500,
        "batch_size": 64,
        "lr": 8e-3,
        "d_model": 32,
        "heads": [4],
        "ffn_dim": 64,
        "variants": ["factored-softmax"],
        "masks": [[True, True], [True, False], [False, True], [False, False]],
        "feature_count": 16,
        "pooling_head": "mean",
        "rotary_modes": [0, 1],
        "assert_ordering": True,
        "include_linear_baseline": True,
        "baseline_seeds": [0, 1],
        "baseline_interaction_gain": 0.6,
    },
    "train": {
        "task": "separable-spatiotemporal-forecast",
        "t_len": 32,
        "n_series": 8,
        "horizon": 4,
        "volume": [8, 8, 8],
        "num_classes": 2,
        "n_train": 512,
        "n_val": 64,
        "noise": 0.05,
        "interaction_gain": 0.6,
        "task_seed": 0,
        "seed": 0,
        "steps": 500,
        "batch_size": 32,
        "lr": 5e-3,
        "d_model": 16,
        "heads": 2,
        "ffn_dim": 32,
        "variant": "factored-softmax",
        "mask": None,
        "feature_count": 16,
        "pooling_head": "flatten",
        "rotary_modes": [0],
        "checkpoint": True,
    },
}


def load_config(command: str, path: str | None, overrides: dict) -> dict:
    config = {k: (json.loads(json.dumps(v))) for k, v in DEFAULTS[command].items()}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(config)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        config.update(user)
    config.update({k: v for k, v in overrides.items() if v is not None and k in config})
    return config


# ---------------------------------------------------------------------------
# report plumbing


def fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


class Report:
    """Collects assertion outcomes and writes the summary JSON."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out_dir = out_dir
        self.assertions = []

    def check(self, name: str, passed: bool, value=None, threshold=None) -> None:
        self.assertions.append(
            {"name": name, "passed": bool(passed), "value": value, "threshold": threshold}
        )

    def finish(self, extra: dict | None = None) -> int:
        passed = all(a["passed"] for a in self.assertions)
        summary = {"command": self.command, "passed": passed, "assertions": self.assertions}
        if extra:
            summary.update(extra)
        path = self.out_dir / f"{self.command}_summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for a in self.assertions:
            status = "PASS" if a["passed"] else "FAIL"
            print(f"[{status}] {self.command}: {a['name']}")
        return 0 if passed else 1


# ---------------------------------------------------------------------------
# equiv


def _materialized_reference(x, w):
    k = x.ndim - 1
    tokens = math.prod(x.shape[:-1])
    out = np.zeros_like(x)
    for h in range(w.heads):
        q = x @ w.wq[h]
        kt = x @ w.wk[h]
        v = x @ w.wv[h]
        s = np.eye(1)
        for i in range(k):
            s = np.kron(s, mode_attention_matrix(q, kt, i))
        out += (s @ v.reshape(tokens, w.d_head)).reshape(v.shape) @ w.wo[h]
    return out


def cmd_equiv(config: dict, out_dir: Path) -> int:
    report = Report("equiv", out_dir)
    tol = float(config["tolerance"])
    red_tol = float(config["reduction_tolerance"])
    rows = []
    worst = 0.0
    for shape in config["shapes"]:
        shape = tuple(shape)
        for heads in config["heads"]:
            d_model = int(config["d_model"])
            if d_model % heads:
                raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
            for seed in config["seeds"]:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal(shape + (d_model,))
                w = random_attention_weights(d_model, heads, seed=seed + 1000)
                out = factorized_attention_softmax(x, w)
                ref = _materialized_reference(x, w)
                err = float(np.abs(out - ref).max())
                rows.append(["factored-vs-materialized", str(shape), heads, seed, err, tol,
                             "PASS" if err <= tol else "FAIL"])
                worst = max(worst, err)

                # implied per-head attention matrix row sums
                q = x @ w.wq[0]
                kt = x @ w.wk[0]
                s = np.eye(1)
                for i in range(len(shape)):
                    s = np.kron(s, mode_attention_matrix(q, kt, i))
                row_err = float(np.abs(s.sum(axis=1) - 1.0).max())
                rows.append(["row-stochastic", str(shape), heads, seed, row_err, tol,
                             "PASS" if row_err <= tol else "FAIL"])

                # permutation equivariance along the first mode
                perm = rng.permutation(shape[0])
                a = factorized_attention_softmax(x[perm], w)
                b = factorized_attention_softmax(x, w)[perm]
                perm_err = float(np.abs(a - b).max())
                rows.append(["permutation-equivariance", str(shape), heads, seed, perm_err, tol,
                             "PASS" if perm_err <= tol else "FAIL"])
                worst = max(worst, perm_err, row_err)

    # one-mode reductions collapse to standard attention
    for seed in config["seeds"]:
        rng = np.random.default_rng(seed)
        d_model = int(config["d_model"])
        x = rng.standard_normal((7, d_model))
        for heads in config["heads"]:
            w = random_attention_weights(d_model, heads, seed=seed + 2000)
            ref = standard_attention(x, w)
            spec = FeatureMapSpec(int(config["feature_count"]), d_model // heads, seed=seed)
            for name, out in (
                ("reduction-factored-softmax", factorized_attention_softmax(x, w)),
                ("reduction-full-softmax",
                 full_high_order_attention(x, w, oracle_cap=int(config["oracle_cap"]))),
            ):
                err = float(np.abs(out - ref).max())
                rows.append([name, "(7,)", heads, seed, err, red_tol,
                             "PASS" if err <= red_tol else "FAIL"])
            lin_err = float(np.abs(
                factorized_attention_linear(x, w, spec) - full_attention_linear(x, w, spec)
            ).max())
            rows.append(["reduction-linear-grid", "(7,)", heads, seed, lin_err, red_tol,
                         "PASS" if lin_err <= red_tol else "FAIL"])

    # softmax score shift invariance
    for seed in config["seeds"]:
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((6, 6))
        err = float(np.abs(softmax_rows(logits) - softmax_rows(logits + 11.0)).max())
        rows.append(["softmax-shift-invariance", "(6,6)", 1, seed, err, red_tol,
                     "PASS" if err <= red_tol else "FAIL"])

    write_csv(out_dir / "equiv.csv",
              ["check", "shape", "heads", "seed", "max_abs_err", "tolerance", "status"], rows)
    for row in rows:
        report.check(f"{row[0]} shape={row[1]} heads={row[2]} seed={row[3]}",
                     row[6] == "PASS", row[4], row[5])
    return report.finish({"worst_abs_err": worst})


# ---------------------------------------------------------------------------
# gradcheck


def _loss_of(out: ad.Var) -> ad.Var:
    return ad.mean_all(ad.mul(out, out))


def _op_cases(config):
    """Named differentiable ops: (name, case(vars) -> loss Var, param arrays)."""
    rng = np.random.default_rng(12345)
    shape = (3, 4, 4)
    t0 = rng.standard_normal(shape)
    a0 = rng.standard_normal((5, 4))
    spec = FeatureMapSpec(int(config["feature_count"]), 4, seed=3)
    omega = projection_matrix(spec)

    cases = [
        ("mode_product",
         lambda v: _loss_of(ops.mode_product_v(v["t"], v["a"], 1)),
         {"t": t0, "a": a0}),
        ("matricize_fold",
         lambda v: _loss_of(ops.fold_v(ops.matricize_v(v["t"], 1), 1, shape)),
         {"t": t0}),
        ("pooling",
         lambda v: _loss_of(ops.sum_except_v(v["t"], (1, 2))),
         {"t": rng.standard_normal((2, 3, 4, 4))}),
        ("softmax_rows",
         lambda v: _loss_of(ops.softmax_rows_v(v["m"])),
         {"m": rng.standard_normal((5, 6))}),
        ("feature_map",
         lambda v: _loss_of(ops.feature_map_v(v["m"], spec, omega)),
         {"m": rng.standard_normal((5, 4)) * 0.5}),
        ("kernelized_mode_apply",
         lambda v: _loss_of(ops.kernelized_mode_apply_v(v["v"], v["qt"], v["kt"], 1, spec, omega)),
         {"v": rng.standard_normal((2, 3, 4, 4)),
          "qt": rng.standard_normal((2, 3, 4)) * 0.5,
          "kt": rng.standard_normal((2, 3, 4)) * 0.5}),
        ("layer_norm",
         lambda v: _loss_of(ops.layer_norm_v(v["t"], v["g"], v["b"])),
         {"t": t0, "g": 1.0 + 0.1 * rng.standard_normal(4), "b": 0.1 * rng.standard_normal(4)}),
        ("gelu", lambda v: _loss_of(ops.gelu_v(v["t"])), {"t": t0}),
        ("affine",
         lambda v: _loss_of(ops.affine_v(v["t"], v["w"], v["b"])),
         {"t": t0, "w": rng.standard_normal((4, 6)), "b": rng.standard_normal(6)}),
    ]
    return cases


def _gradcheck_model(variant, config, seed):
    shape = tuple(config["shape"])
    d_model = int(config["d_model"])
    spec = FeatureMapSpec(int(config["feature_count"]), d_model // int(config["heads"]),
                          seed=7) if "linear" in variant else None
    cfg = ModelConfig(
        raw_dims=shape,
        patch=PatchEmbedConfig((1,) * len(shape)),
        rotary=RotaryConfig(modes=(0,)),
        block=HOTBlockConfig(dims=shape, d_model=d_model, heads=int(config["heads"]),
                             variant=variant, feature_spec=spec),
        num_blocks=1,
        head=HeadConfig(task="forecast", pooling="mean", horizon=2, n_series=2),
    )
    model = HOTModel.initialize(cfg, seed=seed)
    rng = np.random.default_rng(seed + 500)
    x = rng.standard_normal((2,) + shape)
    y = rng.standard_normal((2, 2, 2))

    tape = Tape()
    loss, pv = model_loss(model, x, y, tape)
    tape.backward(loss)
    grads = collect_grads(pv)

    def f(params):
        t = Tape()
        l, _ = model_loss(HOTModel(model.config, params), x, y, t)
        return float(l.value)

    return f, model.params, grads


def cmd_gradcheck(config: dict, out_dir: Path) -> int:
    report = Report("gradcheck", out_dir)
    tol = float(config["tolerance"])
    eps = float(config["eps"])
    min_coords = int(config["min_coords"])
    rows = []

    for seed in config["seeds"]:
        rng = np.random.default_rng(seed)
        for name, case, params in _op_cases(config):
            tape = Tape()
            handles = {k: tape.var(v) for k, v in params.items()}
            tape.backward(case(handles))
            grads = collect_grads(handles)

            def f(p, case=case):
                return float(case({k: ad.constant(v) for k, v in p.items()}).value)

            err = finite_diff_check(f, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()},
                                    grads, eps=eps, rng=rng, min_coords=min_coords)
            rows.append([name, "op", seed, err, tol, "PASS" if err <= tol else "FAIL"])

        for variant in ("factored-softmax", "factored-linear", "full-softmax", "full-linear"):
            f, params, grads = _gradcheck_model(variant, config, seed)
            err = finite_diff_check(f, params, grads, eps=eps, rng=rng, min_coords=min_coords)
            rows.append([variant, "attention-variant", seed, err, tol,
                         "PASS" if err <= tol else "FAIL"])

        f, params, grads = _gradcheck_model("factored-softmax", config, seed)
        err = finite_diff_check(f, params, grads, eps=eps, rng=rng, min_coords=min_coords)
        rows.append(["hot-block", "block", seed, err, tol, "PASS" if err <= tol else "FAIL"])

    # quadratic self-test: central differences are exact up to roundoff
    rng = np.random.default_rng(0)
    q0 = rng.standard_normal(10)

    def quad(p):
        return float(np.sum(p["x"] ** 2) / 2.0)

    err = finite_diff_check(quad, {"x": q0}, {"x": q0}, eps=eps, rng=rng)
    qtol = float(config["quadratic_tolerance"])
    rows.append(["quadratic-self-test", "self-test", 0, err, qtol,
                 "PASS" if err <= qtol else "FAIL"])

    # fault injection: a corrupted adjoint must be reported as wrong
    bad = {"x": q0 * 1.5 + 0.1}
    err_bad = finite_diff_check(quad, {"x": q0}, bad, eps=eps, rng=rng)
    thr = float(config["fault_threshold"])
    rows.append(["fault-injection", "self-test", 0, err_bad, thr,
                 "PASS" if err_bad > thr else "FAIL"])

    write_csv(out_dir / "gradcheck.csv",
              ["case", "kind", "seed", "max_rel_err", "tolerance", "status"], rows)
    for row in rows:
        report.check(f"{row[0]} seed={row[2]}", row[5] == "PASS", row[3], row[4])
    return report.finish()


# ---------------------------------------------------------------------------
# kronrank


def _empirical_attention_matrix(dims, d_model, heads, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(tuple(dims) + (d_model,))
    w = random_attention_weights(d_model, heads, seed=seed + 1)
    flat = x.reshape(-1, d_model)
    q = flat @ w.wq[0]
    k = flat @ w.wk[0]
    return softmax_rows(q @ k.T / math.sqrt(w.d_head))


def cmd_kronrank(config: dict, out_dir: Path) -> int:
    report = Report("kronrank", out_dir)
    rows = []
    exact_tol = float(config["exact_tolerance"])
    planted_tol = float(config["planted_tolerance"])
    for dims in config["dims_list"]:
        dims = tuple(int(d) for d in dims)
        bound = kron_rank_bound(dims)
        for seed in config["seeds"]:
            rng = np.random.default_rng(seed)
            side = math.prod(dims)
            cases = {
                "random-row-stochastic": softmax_rows(rng.standard_normal((side, side))),
                "empirical-attention": _empirical_attention_matrix(
                    dims, int(config["attention_d_model"]), int(config["attention_heads"]), seed),
            }
            for kind, s in cases.items():
                errs = []
                for rank in range(1, bound + 1):
                    err = reconstruction_error(kron_decompose(s, dims, rank), s)
                    errs.append(err)
                    rows.append([kind, str(dims), seed, rank, err])
                report.check(f"{kind} dims={dims} seed={seed} exact at R={bound}",
                             errs[-1] <= exact_tol, errs[-1], exact_tol)
                monotone = all(lo <= hi + 1e-12 for lo, hi in zip(errs[1:], errs[:-1]))
                report.check(f"{kind} dims={dims} seed={seed} monotone", monotone)

            planted = kron_chain([rng.standard_normal((d, d)) for d in dims])
            err = reconstruction_error(kron_decompose(planted, dims, 1), planted)
            rows.append(["planted-single-term", str(dims), seed, 1, err])
            report.check(f"planted dims={dims} seed={seed} exact at R=1",
                         err <= planted_tol, err, planted_tol)

    write_csv(out_dir / "kronrank.csv", ["kind", "dims", "seed", "rank", "rel_error"], rows)
    return report.finish()


# ---------------------------------------------------------------------------
# bench


def _bench_forward(variant, x, w, spec, oracle_cap):
    if variant == "factored-softmax":
        return factorized_attention_softmax(x, w)
    if variant == "factored-linear":
        return factorized_attention_linear(x, w, spec)
    if variant == "full-softmax":
        return full_high_order_attention(x, w, oracle_cap=oracle_cap)
    if variant == "full-linear":
        return full_attention_linear(x, w, spec)
    raise ConfigError(f"unknown variant {variant!r}")


def _fit_slope(tokens, values):
    logt = np.log(np.asarray(tokens, dtype=np.float64))
    logv = np.log(np.asarray(values, dtype=np.float64))
    slope, _ = np.polyfit(logt, logv, 1)
    return float(slope)


def cmd_bench(config: dict, out_dir: Path) -> int:
    report = Report("bench", out_dir)
    d_model = int(config["d_model"])
    heads = int(config["heads"])
    reps = max(3, int(config["reps"]))
    warmups = int(config["warmups"])
    seed = int(config["seed"])
    cap = int(config["oracle_cap"])
    rows = []
    sample_rows = []
    slopes = {}
    memories = {}
    for variant in config["variants"]:
        grid = config["grids"][variant]
        token_counts = []
        medians = []
        peaks = []
        for dims in grid:
            dims = tuple(int(d) for d in dims)
            tokens = math.prod(dims)
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(dims + (d_model,))
            w = random_attention_weights(d_model, heads, seed=seed + 1)
            spec = FeatureMapSpec(int(config["feature_count"]), d_model // heads, seed=seed)
            run_cap = max(cap, tokens) if variant == "full-softmax" else cap
            for _ in range(warmups):
                _bench_forward(variant, x, w, spec, run_cap)
            samples = []
            for rep in range(reps):
                t0 = time.perf_counter_ns()
                _bench_forward(variant, x, w, spec, run_cap)
                samples.append(time.perf_counter_ns() - t0)
                sample_rows.append([variant, str(dims), tokens, rep, samples[-1]])
            median_ns = int(np.median(samples))
            peak = 0
            if config["track_memory"]:
                tracemalloc.start()
                _bench_forward(variant, x, w, spec, run_cap)
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
            rows.append([variant, str(dims), len(dims), tokens, median_ns, peak, seed])
            token_counts.append(tokens)
            medians.append(median_ns)
            peaks.append(peak)
        slopes[variant] = _fit_slope(token_counts, medians)
        memories[variant] = (token_counts, peaks)

    write_csv(out_dir / "bench.csv",
              ["variant", "shape", "order", "tokens", "wall_ns_median", "peak_bytes", "seed"],
              rows)
    write_csv(out_dir / "bench_samples.csv",
              ["variant", "shape", "tokens", "rep", "wall_ns"], sample_rows)

    for variant, window in config["slope_windows"].items():
        if variant in slopes:
            lo, hi = float(window[0]), float(window[1])
            s = slopes[variant]
            report.check(f"{variant} time slope in [{lo}, {hi}]", lo <= s <= hi, s, [lo, hi])

    if config["track_memory"] and "factored-linear" in memories:
        tokens, peaks = memories["factored-linear"]
        a = np.vstack([np.asarray(tokens, dtype=np.float64), np.ones(len(tokens))]).T
        coef, *_ = np.linalg.lstsq(a, np.asarray(peaks, dtype=np.float64), rcond=None)
        fit = a @ coef
        ratio = float(max(max(p / f, f / p) for p, f in zip(peaks, fit) if f > 0))
        limit = float(config["memory_ratio"])
        report.check(f"factored-linear peak memory within {limit}x of linear fit",
                     ratio <= limit, ratio, limit)

    # token-count exponents on square grids; factored softmax is quadratic
    # per mode, i.e. tokens^1.5 overall
    theory = {"full-softmax": 2.0, "full-linear": 1.0,
              "factored-softmax": 1.5, "factored-linear": 1.0}
    return report.finish({
        "slopes": slopes,
        "theory_exponents": {v: theory[v] for v in slopes if v in theory},
    })


# ---------------------------------------------------------------------------
# ablate / train


def _build_model_config(config: dict, mask, variant, heads,
                        pooling_head: str | None = None) -> ModelConfig:
    t_len = int(config["t_len"])
    n_series = int(config["n_series"])
    d_model = int(config["d_model"])
    token_dims = (t_len // 4, n_series)
    spec = None
    if "linear" in variant:
        spec = FeatureMapSpec(int(config["feature_count"]), d_model // heads, seed=11)
    return ModelConfig(
        raw_dims=(t_len, n_series),
        patch=PatchEmbedConfig((4, 1)),
        rotary=RotaryConfig(modes=tuple(config["rotary_modes"])),
        block=HOTBlockConfig(
            dims=token_dims, d_model=d_model, heads=heads, variant=variant,
            ffn_dim=int(config["ffn_dim"]), mode_mask=tuple(mask) if mask else (),
            feature_spec=spec),
        num_blocks=1,
        head=HeadConfig(task="forecast", pooling=pooling_head or config["pooling_head"],
                        horizon=int(config["horizon"]), n_series=n_series),
    )


def _task_spec(config: dict, seed: int, gain_key: str = "interaction_gain") -> SyntheticTaskSpec:
    kind = config["task"]
    kwargs = dict(
        kind=kind, n_train=int(config["n_train"]), n_val=int(config["n_val"]),
        seed=seed, noise=float(config["noise"]),
    )
    if kind == "separable-spatiotemporal-forecast":
        kwargs.update(t_len=int(config["t_len"]), n_series=int(config["n_series"]),
                      horizon=int(config["horizon"]),
                      interaction_gain=float(config[gain_key]))
    else:
        kwargs.update(volume=tuple(config.get("volume", (8, 8, 8))),
                      num_classes=int(config.get("num_classes", 2)))
    return SyntheticTaskSpec(**kwargs)


def _mask_str(mask) -> str:
    """Comma-free mask label for CSV rows, e.g. (True, False) -> 'TF'."""
    return "".join("T" if b else "F" for b in mask) or "-"


def cmd_ablate(config: dict, out_dir: Path) -> int:
    """Attention-order grid (task and model seeded together per seed) plus a
    nonlinear-task baseline pair: flatten-head two-mode model vs linear readout."""
    report = Report("ablate", out_dir)
    rows = []
    cell_means = {}
    param_counts = set()
    datasets = {seed: gen_synthetic(_task_spec(config, int(seed)))
                for seed in config["seeds"]}
    for variant in config["variants"]:
        for heads in config["heads"]:
            for mask in config["masks"]:
                mses = []
                for seed in config["seeds"]:
                    mcfg = _build_model_config(config, mask, variant, int(heads))
                    model = HOTModel.initialize(mcfg, seed=seed)
                    param_counts.add(model.parameter_count())
                    t0 = time.perf_counter()
                    res = train_model(model, datasets[seed], steps=int(config["steps"]),
                                      batch_size=int(config["batch_size"]),
                                      lr=float(config["lr"]), seed=seed,
                                      eval_every=int(config["steps"]))
                    seconds = time.perf_counter() - t0
                    rows.append([variant, heads, _mask_str(mask), seed,
                                 res.final_train_mse, res.final_val_mse, res.final_val_mae,
                                 res.best_val_mae_step, res.best_val_mse_step,
                                 model.parameter_count(), seconds])
                    mses.append(res.final_train_mse)
                cell_means[(variant, int(heads), tuple(bool(b) for b in mask))] = float(np.mean(mses))

    baseline_mse = None
    flat_mse = None
    if config["include_linear_baseline"]:
        flat, base = [], []
        for seed in config["baseline_seeds"]:
            data = gen_synthetic(_task_spec(config, int(seed), "baseline_interaction_gain"))
            mcfg = _build_model_config(config, [True, True], config["variants"][0],
                                       int(config["heads"][0]), pooling_head="flatten")
            model = HOTModel.initialize(mcfg, seed=int(seed))
            res = train_model(model, data, steps=int(config["steps"]),
                              batch_size=int(config["batch_size"]),
                              lr=float(config["lr"]), seed=int(seed),
                              eval_every=int(config["steps"]))
            flat.append(res.final_train_mse)
            base.append(train_linear_readout(data, int(config["steps"]),
                                             batch_size=int(config["batch_size"]),
                                             lr=float(config["lr"]), seed=int(seed)))
            rows.append(["flatten-both", config["heads"][0], _mask_str([True, True]), seed,
                         flat[-1], math.nan, math.nan, 0, 0, model.parameter_count(), 0.0])
            rows.append(["linear-readout", 0, "-", seed, base[-1], math.nan, math.nan,
                         0, 0, 0, 0.0])
        flat_mse = float(np.mean(flat))
        baseline_mse = float(np.mean(base))

    write_csv(out_dir / "ablate.csv",
              ["variant", "heads", "mask", "seed", "train_mse", "val_mse", "val_mae",
               "best_val_mae_step", "best_val_mse_step", "param_count", "seconds"], rows)

    report.check("parameter count identical across grid", len(param_counts) == 1,
                 sorted(param_counts))
    if config["assert_ordering"]:
        variant = config["variants"][0]
        heads = int(config["heads"][0])
        both = cell_means.get((variant, heads, (True, True)))
        time_only = cell_means.get((variant, heads, (True, False)))
        var_only = cell_means.get((variant, heads, (False, True)))
        none = cell_means.get((variant, heads, (False, False)))
        if None not in (both, time_only, var_only, none):
            report.check("both-modes beats each single mode",
                         both < time_only and both < var_only,
                         {"both": both, "time": time_only, "var": var_only})
            report.check("each single mode beats no attention",
                         time_only < none and var_only < none,
                         {"time": time_only, "var": var_only, "none": none})
    if baseline_mse is not None and flat_mse is not None:
        report.check("2-mode model beats linear readout on the nonlinear task",
                     flat_mse < baseline_mse,
                     {"hot-flatten": flat_mse, "linear": baseline_mse})
    return report.finish({"cell_means": {str(k): v for k, v in cell_means.items()}})


def cmd_train(config: dict, out_dir: Path) -> int:
    report = Report("train", out_dir)
    data = gen_synthetic(_task_spec(config, int(config["task_seed"])))
    mask = config["mask"] if config["mask"] else []
    if config["task"] == "separable-spatiotemporal-forecast":
        mcfg = _build_model_config(config, mask, config["variant"], int(config["heads"]))
    else:
        volume = tuple(config["volume"])
        spec = None
        if "linear" in config["variant"]:
            spec = FeatureMapSpec(int(config["feature_count"]),
                                  int(config["d_model"]) // int(config["heads"]), seed=11)
        token_dims = tuple(v // 2 for v in volume)
        mcfg = ModelConfig(
            raw_dims=volume,
            patch=PatchEmbedConfig((2, 2, 2)),
            rotary=RotaryConfig(modes=(0, 1, 2)),
            block=HOTBlockConfig(dims=token_dims, d_model=int(config["d_model"]),
                                 heads=int(config["heads"]), variant=config["variant"],
                                 ffn_dim=int(config["ffn_dim"]),
                                 mode_mask=tuple(mask) if mask else (),
                                 feature_spec=spec),
            num_blocks=1,
            head=HeadConfig(task="classify", pooling=config["pooling_head"],
                            num_classes=int(config["num_classes"])),
        )
    model = HOTModel.initialize(mcfg, seed=int(config["seed"]))
    log_rows = []
    res = train_model(model, data, steps=int(config["steps"]),
                      batch_size=int(config["batch_size"]), lr=float(config["lr"]),
                      seed=int(config["seed"]), eval_every=25, log_rows=log_rows)
    write_csv(out_dir / "train_log.csv",
              ["step", "train_loss", "val_mse", "val_mae", "seconds"],
              [list(r) for r in log_rows])
    if config["checkpoint"]:
        model.save(out_dir / "checkpoint")
    report.check("training ran to completion", True, res.final_train_mse)
    report.check("final loss finite", bool(np.isfinite(res.final_train_mse)))
    return report.finish({
        "final_train_mse": res.final_train_mse,
        "final_val_mse": res.final_val_mse,
        "best_val_mae_step": res.best_val_mae_step,
        "best_val_mse_step": res.best_val_mse_step,
    })


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "equiv": cmd_equiv,
    "gradcheck": cmd_gradcheck,
    "kronrank": cmd_kronrank,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "train": cmd_train,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hot", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed(s)")
    parser.add_argument("--out", default="hot-out", help="output directory")
    parser.add_argument("--cap", type=int, default=None, help="override the oracle cap")
    args = parser.parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["seeds"] = [args.seed]
        overrides["task_seed"] = args.seed
    if args.cap is not None:
        overrides["oracle_cap"] = args.cap

    try:
        config = load_config(args.command, args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](config, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
