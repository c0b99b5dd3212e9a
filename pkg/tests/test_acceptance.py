"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import time
from pathlib import Path

import numpy as np

from loft import cli, data
from loft.model import ModelConfig, build_model, forward
from loft.tiling import TileSpec, tiled_inference
from loft.verify import run_dct, run_grad, run_prop1, run_prop2

README = Path(__file__).resolve().parent.parent / "README.md"


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def test_flops_table(report, capsys):
    code, seconds = timed(cli.main, ["flops", "--report", "json"])
    rows = {r["variant"]: r for r in json.loads(capsys.readouterr().out)}
    expected = {"Spa-LS": 268_435_456, "Spa-GC": 134_217_728, "Freq-GC": 201_326_592,
                "Freq-LC": 201_326_592}
    exact = all(rows[k]["flops"] == v for k, v in expected.items())
    rounded = [rows[k]["mflops"] for k in ("Spa-LS", "Spa-GC", "Freq-GC", "Freq-LC")]
    passed = code == 0 and exact and rounded == [268, 134, 201, 201] and seconds < 1
    report("flops table", passed, f"M = {rounded}, {seconds:.3f} s (limit 1 s)")


def test_prop1_oracle(report):
    res, seconds = timed(run_prop1, seeds=100, dims=(16, 16, 8))
    passed = res["passed"] and res["max_deviation"] < 1e-6 and seconds < 10
    report("spatial/frequency global attention equivalence", passed,
           f"max deviation {res['max_deviation']:.2e} over 100 seeds (tol 1e-6), "
           f"negative control {res['negative_control_deviation']:.2e}, {seconds:.2f} s (limit 10 s)")


def test_prop2_oracle(report):
    res, seconds = timed(run_prop2, seeds=100, dims=(8, 8, 4), windows=(2, 4))
    passed = res["passed"] and res["max_deviation"] < 1e-9 and seconds < 10
    report("windowed attention = sum of zero-padded global attentions", passed,
           f"max deviation {res['max_deviation']:.2e} over 100 seeds, b in {{2, 4}} (tol 1e-9), "
           f"{seconds:.2f} s (limit 10 s)")


def test_dct_algebra(report):
    res, seconds = timed(run_dct)
    passed = (res["passed"] and res["max_round_trip_error"] < 1e-9 and res["max_parseval_error"] < 1e-9
              and res["max_orthonormality_error"] < 1e-10 and res["max_direct_error"] < 1e-8
              and res["extents"] == [2, 4, 7, 8, 16] and seconds < 10)
    report("DCT algebra", passed,
           f"round trip {res['max_round_trip_error']:.1e}, Parseval {res['max_parseval_error']:.1e}, "
           f"orthonormality {res['max_orthonormality_error']:.1e}, direct sum {res['max_direct_error']:.1e}, "
           f"{seconds:.2f} s (limit 10 s)")


def test_block_gradients(report):
    res, seconds = timed(run_grad, seed=0, samples=200)
    passed = res["passed"] and res["checked"] >= 200 and res["max_relative_error"] < 1e-3 and seconds < 60
    report("block gradients vs finite differences", passed,
           f"{res['checked']} samples, max relative error {res['max_relative_error']:.2e} (tol 1e-3), "
           f"{seconds:.2f} s (limit 60 s)")


def test_toy_training(report, capsys, tmp_path):
    traces = []
    seconds = []
    for i in range(2):
        trace = tmp_path / f"trace{i}.csv"
        code, s = timed(cli.main, ["train-toy", "--seed", "0", "--trace", str(trace)])
        out = json.loads(capsys.readouterr().out)
        assert code == 0
        traces.append(trace.read_text())
        seconds.append(s)
    entries = len(traces[0].splitlines()) - 1  # initial loss plus one per step
    passed = (out["ratio"] <= 0.5 and out["steps"] == 200 and entries == 201
              and traces[0] == traces[1] and max(seconds) < 300)
    report("toy training", passed,
           f"loss {out['initial_loss']:.4f} -> {out['final_loss']:.4f} (ratio {out['ratio']:.3f}, "
           f"limit 0.5), identical traces: {traces[0] == traces[1]}, {max(seconds):.1f} s (limit 300 s)")


def test_tiled_inference(report, rng):
    model = build_model(ModelConfig.preset("tiny"), seed=0)

    def restore(img):
        return forward(model, img).data

    small = rng.random((96, 128, 3)).astype(np.float32)
    single = np.array_equal(tiled_inference(restore, small), restore(small))

    identity = build_model(ModelConfig.preset("tiny"), seed=0).zero_head()
    blurred, _ = data.load_pair()
    out = tiled_inference(lambda img: forward(identity, img).data, blurred, TileSpec(384, 352))
    err = float(np.abs(out - blurred).max())
    report("tiled inference consistency", single and err < 1e-5,
           f"single tile bit-identical: {single}; identity model on 512x512 with 384/352 tiles, "
           f"max error {err:.1e} (tol 1e-5)")


def test_scope_statement_and_large_preset(report):
    text = README.read_text()
    statement = "34.09 dB" in text and "not reproducible at desk scale" in text
    cfg = ModelConfig.preset("L")
    model = build_model(cfg)
    structure = (cfg.depths == (2, 4, 12, 18) and cfg.refine == 2 and cfg.base_channels == 48
                 and cfg.heads == (1, 2, 4, 8)
                 and [len(model.blocks[s]) for s in ("enc1", "enc2", "enc3", "latent", "refine")]
                 == [2, 4, 12, 18, 2])
    report("scope statement and preset L structure", statement and structure,
           f"README statement present: {statement}; L = depths {list(cfg.depths)}, refine {cfg.refine}, "
           f"C {cfg.base_channels}, heads {list(cfg.heads)}, {model.parameter_count():,} parameters")
