"""Smoke test for the pytimemil extension.

Run after `maturin develop -m crates/py/Cargo.toml --release`, or with the
library built by `cargo build --release -p pytimemil` (it is then loaded
from target/release).
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import pytimemil

        return pytimemil
    except ImportError:
        pass
    for name in ("libpytimemil.so", "libpytimemil.dylib", "pytimemil.dll"):
        lib = os.path.join(ROOT, "target", "release", name)
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            ext = ".pyd" if name.endswith(".dll") else ".so"
            dst = os.path.join(tmp, "pytimemil" + ext)
            shutil.copy(lib, dst)
            found = importlib.util.spec_from_file_location("pytimemil", dst)
            mod = importlib.util.module_from_spec(found)
            found.loader.exec_module(mod)
            return mod
    sys.exit("pytimemil not found; build it first")


def main():
    tm = load()

    ordered, permuted = tm.prop2_example()
    assert abs(ordered - 0.70) <= 0.005 and abs(permuted - 1.16) <= 0.005

    report = tm.theorem3_check(seed=0, trials=200)
    assert report["violations"] == 0

    assert tm.block_entropy("abab", 1) == 1.0
    text = open(os.path.join(ROOT, "data", "sonnets.txt")).read()
    assert tm.shuffled_block_entropy(text, 1.0) > tm.block_entropy(text)

    checks = tm.run_gradcheck("loss", 0)
    assert checks and all(c["passed"] for c in checks)

    bags = tm.synthetic_bags(4, 4, seed=3)
    assert len(bags) == 8 and sum(b["label"] for b in bags) == 4
    for b in bags:
        assert len(b["values"]) == 120
        if b["label"]:
            start, end = b["pulse_window"]
            assert end - start == 20 and sum(b["instance_labels"]) == 21

    with tempfile.TemporaryDirectory() as tmp:
        ts = os.path.join(tmp, "train.ts")
        with open(ts, "w") as f:
            f.write("@problemName tiny\n@univariate true\n@equalLength true\n")
            f.write("@seriesLength 12\n@classLabel true a b\n@data\n")
            for b in bags:
                f.write(",".join(repr(v) for v in b["values"][50:62]))
                f.write(":" + ("b" if b["label"] else "a") + "\n")
        data = tm.read_ts(ts)
        assert data["class_labels"] == ["a", "b"] and len(data["bags"]) == 8

        cfg = os.path.join(ROOT, "configs", "synthetic.json")
        ckpt = os.path.join(tmp, "ckpt")
        losses = tm.train(ts, ckpt, config=cfg, seed=0, epochs=2)
        assert len(losses) == 2 and all(math.isfinite(v) for v in losses)

        model = tm.Model.load(ckpt)
        assert model.class_labels == ["a", "b"] and model.num_parameters > 0
        series = data["bags"][0]["values"]
        assert len(model.logits(series)) == 2
        assert model.predict(series) in (0, 1)
        imp = model.importance(series)
        assert len(imp) == 12 and abs(sum(imp) - 1.0) < 1e-6
        metrics = model.evaluate(ts)
        assert 0.0 <= metrics["accuracy"] <= 1.0

    print("pytimemil smoke test passed")


if __name__ == "__main__":
    main()
