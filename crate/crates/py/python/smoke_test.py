"""Smoke test of the Python bindings.

Build and install first:  maturin develop --release -m crates/py/Cargo.toml
"""

import math
import os
import tempfile

import jambatalk as jt

TINY = [
    "model.decoder.d_model=16",
    "data.synth.n_sentences=2",
    "data.synth.frames=8",
    "data.synth.vertex_count=24",
    "data.synth.feature_dim=6",
    "data.synth.test_sentences=1",
    "train.max_steps=20",
    "train.lr=1e-3",
]


def main():
    cfg = jt.RunConfig(overrides=TINY, seed=3)
    data = cfg.load_data()
    assert len(data) == 4 and data.vertex_count == 24
    assert data.subjects == ["S0", "S1"]

    model = jt.Model(cfg)
    assert model.arrangement == "MoE-MoE"
    assert 0 < model.active_params() < model.num_params()
    assert "decoder.head.weight" in model.param_names()

    report = jt.train(model, data, cfg)
    assert report["steps"] == 20
    assert report["final_train_loss"] < report["initial_train_loss"]

    ev = jt.evaluate(model, data, split="test")
    assert len(ev["sequences"]) == 2 and ev["lve_units"] == "x1e-3 mm"
    per_seq = [s["metrics"]["lve"] for s in ev["sequences"]]
    assert math.isclose(ev["mean"]["lve"], sum(per_seq) / len(per_seq), rel_tol=1e-12)

    feats = [[math.sin(0.3 * t + d) for d in range(6)] for t in range(12)]
    motion = model.generate(feats, subject=1)
    assert len(motion) == 12 and len(motion[0]) == 24 * 3

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        again = jt.Model.load(path)
        assert again.generate(feats, subject=1) == motion
        data.save(os.path.join(tmp, "data"))
        assert os.path.exists(os.path.join(tmp, "data", "manifest.tsv"))

    gt = data.motion(0)
    same = jt.metrics(gt, gt, lip=[0, 1], upper=[2, 3])
    assert same["lve"] == 0.0 and same["fdd"] == 0.0

    abar, bbar = jt.discretize(-1.0, 1.0, math.log(2.0))
    assert abs(abar - 0.5) < 1e-12 and abs(bbar - 0.5) < 1e-12
    x = [0.3, -1.2, 0.5, 2.0]
    assert jt.rope(x, 0) == x
    r = jt.rope(x, 7)
    assert abs(sum(v * v for v in r) - sum(v * v for v in x)) < 1e-12

    bench = jt.benchmark(model, [4, 8])
    assert bench["rows"][0]["ssm_bytes"] == bench["rows"][1]["ssm_bytes"]
    assert bench["kv_bytes_per_token"] == bench["kv_bytes_per_token_expected"]

    grads = jt.gradient_suite(coords=2)
    assert {g["block"] for g in grads} == {"mamba", "moe", "transformer", "audio_frontend", "decoder"}
    assert all(g["max_rel_err"] < 1e-4 for g in grads)

    try:
        jt.RunConfig(overrides=["train.nope=1"])
    except ValueError as e:
        assert "config error" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
