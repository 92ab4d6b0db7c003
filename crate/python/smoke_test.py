"""Smoke test for the fedchain_py extension.

Uses an installed fedchain_py if there is one, otherwise the library built
by `cargo build -p fedchain-py --release` (or $FEDCHAIN_PY_LIB).
"""

import importlib.util
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import fedchain_py

        return fedchain_py
    except ImportError:
        pass
    candidates = [os.environ.get("FEDCHAIN_PY_LIB")] + [
        str(ROOT / "target" / profile / "libfedchain_py.so") for profile in ("release", "debug")
    ]
    for c in candidates:
        if c and Path(c).exists():
            tmp = Path(tempfile.mkdtemp())
            so = tmp / "fedchain_py.so"
            shutil.copy(c, so)
            spec = importlib.util.spec_from_file_location("fedchain_py", so)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("fedchain_py not found; run `cargo build -p fedchain-py --release` first")


def main():
    fc = load()

    inputs = [[1.5, -2.0, 3.25, 0.5, 7.0], [0.5, 2.0, -1.25, 1.0, 1.0], [4.0, 0.0, 0.0, -0.5, 2.0]]
    ring = fc.ring_all_reduce(inputs, noise_seed=3)
    assert ring.sum == [6.0, 0.0, 2.0, 1.0, 10.0], ring.sum
    assert all(o == ring.sum for o in ring.outputs)
    assert ring.messages == 3 * 5
    assert all(ring.leakage_passed(j) for j in range(3))
    exposed = fc.ring_all_reduce(inputs, zero_noise=True)
    assert not all(exposed.leakage_passed(j) for j in range(3))

    lat = fc.clustered_topology(12, seed=4, clusters=3)
    pools = fc.assign_pools(lat, 3, seed=4)
    assert sorted(n for p in pools for n in p) == list(range(12))
    assert all(len({n % 3 for n in p}) == 1 for p in pools), pools

    assert abs(fc.kl_divergence([0.5, 0.5], [0.25, 0.75]) - 0.2075187496394219) < 1e-5
    w = fc.kl_weights([0.2, 0.4, 0.8], [1, 1, 1])
    assert all(abs(a - b) < 1e-12 for a, b in zip(w, [0.5, 0.375, 0.125])), w
    assert fc.fedavg_weights([10, 30]) == [0.25, 0.75]

    data = fc.Dataset.synthetic(n_samples=600, n_features=8, n_classes=4, seed=1)
    train, held_out = data.split(0.5, 1)
    assert len(train) + len(held_out) == 600
    model = fc.Model(8, 4, seed=1)
    for epoch in range(5):
        model = model.train(train, learning_rate=0.2, seed=epoch)
    assert model.evaluate(held_out) > 0.5
    assert model.gradient_check(held_out) < 1e-4
    restored = fc.Model.from_bytes(model.to_bytes())
    assert restored.to_bytes() == model.to_bytes()

    com, accepted, acc = fc.commit_prove_verify(model, held_out, 100, seed=2)
    assert accepted and len(com) == 64 and 0.0 <= acc <= 1.0
    assert not fc.commit_prove_verify(model, held_out, 100, seed=2, tamper=True)[1]

    exp = fc.Experiment("n_nodes = [6]\nn_pools = [2]\nruns = 1\nchallenge_k = 200\n[synthetic]\nn_samples = 1200\n")
    with tempfile.TemporaryDirectory() as out:
        written = exp.single_round(out, n_nodes=6, n_pools=2, seed=3)
        names = {Path(p).name for p in written}
        assert {"ledger.jsonl", "trace.csv", "pools.csv", "transcript.csv", "model.bin"} <= names, names
        ledger = (Path(out) / "ledger.jsonl").read_text()
        assert fc.validate_chain(ledger) == []
        assert fc.validate_chain(ledger.replace('"reward":1000', '"reward":1001', 1)) != []

    csv, trends = exp.latency_grid()
    assert csv.startswith("mode,n_nodes,n_pools,round,winner_pool,latency_ms,accuracy\n")
    assert all(len(t) == 3 for t in trends)
    print("fedchain_py smoke test passed")


if __name__ == "__main__":
    main()
