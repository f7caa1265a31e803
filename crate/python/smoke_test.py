"""Smoke test for the edgepop extension module: build with maturin, then run."""
import os
import tempfile

import edgepop

CONFIG = """
algorithm = "edge_popup"
k = 0.5
epochs = 3
seed = 3
[arch]
name = "mlp"
width_multiplier = "1/8"
[init]
kind = "signed_constant"
[optimizer]
lr = 0.1
momentum = 0.9
weight_decay = 1e-4
[dataset]
name = "blobs"
batch_size = 32
classes = 4
dim = 16
per_class = 50
spread = 2.0
"""


def main():
    mask = edgepop.get_subnet([0.3, -2.0, 0.1, 1.5], 0.5)
    assert mask == [False, True, False, True], mask
    assert edgepop.keep_count(10, 0.9) == 10

    cfg = edgepop.Config.from_toml(CONFIG)
    assert cfg.k == 0.5 and cfg.algorithm == "edge_popup"
    try:
        edgepop.Config.from_toml(CONFIG + "colour = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    run = edgepop.Run(cfg)
    hashes = run.weight_hashes()
    before = run.masks()
    rows = run.train()
    assert len(rows) == 3 and run.epochs_done == 3
    assert run.weight_hashes() == hashes, "weights moved"
    assert run.masks() != before, "no edge changed"
    kept, total = run.edges()
    assert kept == sum(edgepop.keep_count(len(m), 0.5) for m in before) and kept < total

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "checkpoint.bin")
        run.save(path)
        meta = edgepop.load_checkpoint(path)
        assert meta["epoch"] == 3 and meta["metrics"][-1]["test_acc"] == rows[-1]["test_acc"]

    checks = edgepop.run_verify("topk")
    assert checks and all(ok for _, ok, _ in checks), checks
    print(f"smoke test ok: test accuracy {rows[-1]['test_acc']:.3f}, {kept} of {total} edges")


if __name__ == "__main__":
    main()
