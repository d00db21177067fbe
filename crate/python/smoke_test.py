"""Smoke test of the ahbn_py extension: run with `python3 python/smoke_test.py`."""

import math
import random
import tempfile

import ahbn_py as ah

TINY = """
[synth]
num_items = 6
renders_per_item = 2
queries_per_item = 1
[arch]
num_classes = 6
[train]
max_epochs = 1
pretrain_attribute_epochs = 1
pretrain_landmark_epochs = 1
"""


def close(a, b, tol=1e-10):
    return len(a) == len(b) and all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    rng = random.Random(0)
    x1 = [rng.uniform(-1, 1) for _ in range(8)]
    x2 = [rng.uniform(-1, 1) for _ in range(5)]
    p1, p2 = ah.SketchParams(8, 16, 1), ah.SketchParams(5, 16, 2)
    assert close(ah.cbp_vector(x1, x2, p1, p2), ah.outer_sketch_oracle(x1, x2, p1, p2))
    assert len(p1.hashes) == 8 and set(p1.signs) <= {-1, 1}

    re, im = ah.dft(x1)
    assert close(ah.idft_real(re, im), x1)
    naive = [sum(x1[i] * x1[(k - i) % 8] for i in range(8)) for k in range(8)]
    assert close(ah.circular_convolve(x1, x1), naive)

    va = [rng.uniform(-1, 1) for _ in range(8 * 2 * 2)]
    vl = [rng.uniform(-1, 1) for _ in range(5 * 2 * 2)]
    shape, fused = ah.spatial_cbp([8, 2, 2], va, [5, 2, 2], vl, p1, p2)
    assert shape == [16, 2, 2] and len(fused) == 64
    pooled = ah.finalize_pre_fc(shape, fused)
    assert abs(math.sqrt(sum(v * v for v in pooled)) - 1.0) < 1e-9

    assert abs(ah.cross_entropy([0.0] * 10, 3) - math.log(10)) < 1e-12
    assert abs(ah.attribute_bce([0.5], [True]) - math.log(2)) < 1e-12

    gallery = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]
    ranked = ah.rank_queries([[0.9, 0.0]], gallery)
    assert ranked == [[1, 0, 2]]
    topk = ah.topk_accuracy(ranked, [0], [0, 1, 2], [1, 2])
    assert topk["acc_at_k"] == {"1": 0.0, "2": 1.0}
    ap = ah.attribute_map([[0.9], [0.1], [0.5]], [[True], [False], [True]])
    assert ap["map"] == 1.0

    row = ah.sketch_bench_row(16, 32, 400, seed=3)
    assert row["within_3se"]

    cfg = ah.Config(TINY, seed=5)
    assert cfg.seed == 5 and len(cfg.config_hash()) == 64
    assert ah.Config(cfg.to_toml()).config_hash() == cfg.config_hash()
    try:
        ah.Config("[synth]\nnum_items = 7\n")
    except ValueError:
        pass
    else:
        raise AssertionError("inconsistent config accepted")

    ds = ah.Dataset(cfg)
    rec = ds.record("gallery", 0)
    assert rec["shape"] == [3, 64, 64] and len(rec["image"]) == 3 * 64 * 64

    model, log = ah.ToyModel.train(cfg, ds)
    assert log and math.isfinite(log[-1]["loss"]["total"])
    out = model.embed(rec["image"])
    assert len(out["embedding"]) == 128 and "alpha_a" in out
    report = model.evaluate(cfg, ds)
    assert 0.0 <= report["acc_at_k"]["1"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = ah.ToyModel.load(d).embed(rec["image"])
        assert again["embedding"] == out["embedding"]

    gc = ah.gradcheck(ah.Config())
    assert gc["report"]["passed"], gc["report"]["max_rel_error"]
    print("python smoke test passed: top-1 %.3f, grad check max rel err %.2e"
          % (report["acc_at_k"]["1"], gc["report"]["max_rel_error"]))


if __name__ == "__main__":
    main()
