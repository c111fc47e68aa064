"""Smoke test for the fedmesh Python extension.

Build the extension first, either with maturin:

    cd crates/python && maturin develop --release

or with plain cargo, in which case this script loads the library from
target/release:

    cargo build --release -p fedmesh-python --features extension-module
    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_fedmesh():
    try:
        import fedmesh  # installed by maturin

        return fedmesh
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libfedmesh_py.so", "libfedmesh_py.dylib", "fedmesh_py.dll"):
            lib = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(lib):
                tmp = tempfile.mkdtemp()
                ext = ".pyd" if name.endswith(".dll") else ".so"
                dst = os.path.join(tmp, "fedmesh" + ext)
                shutil.copy(lib, dst)
                spec = importlib.util.spec_from_file_location("fedmesh", dst)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("fedmesh extension not found; build it first (see the module docstring)")


def main():
    fm = load_fedmesh()

    assert fm.fedavg_aggregate([(0, 1, [0.0, 2.0]), (1, 3, [4.0, 2.0])]) == [3.0, 2.0]
    assert fm.gcml_merge([0.0], [4.0], 1.0, 3.0) == [3.0]
    assert fm.gcml_merge([0.0], [4.0], 1.0, 3.0, mode="inverse") == [1.0]
    loss, grad = fm.fedprox_objective(1.0, [0.0, 0.0], [1.0, 2.0], [0.0, 0.0], 0.5)
    assert math.isclose(loss, 1.0 + 0.25 * 5.0) and grad == [0.5, 1.0]

    v = fm.ParameterVector([1.5, -0.0, 5e-324])
    assert fm.ParameterVector.decode(v.encode()) == v and len(v) == 3
    try:
        fm.ParameterVector([float("nan")])
        raise AssertionError("non-finite parameters accepted")
    except ValueError:
        pass

    f, p = fm.anova_one_way([[1, 2, 3, 4], [5, 6, 7, 8]])
    assert math.isclose(f, 19.2) and 0.004 < p < 0.005

    frame = fm.encode_global_model(3, [1.0, 2.0])
    assert fm.decode_frame(frame) == ("GLOBAL_MODEL", 5)
    try:
        fm.decode_frame(b"XXXX" + frame[4:])
        raise AssertionError("bad magic accepted")
    except ValueError:
        pass

    cfg = fm.FederationConfig.load(os.path.join(ROOT, "configs", "minimal.toml"))
    a = fm.run_in_process(cfg)
    b = fm.run_socket_threads(cfg)
    assert a.global_model == b.global_model, "socket mode differs from in-process mode"
    rows = a.history()
    assert max(r["round"] for r in rows) == cfg.rounds
    print(f"minimal federation: test loss {a.final_test_loss:.4f}, accuracy {a.final_test_accuracy:.3f}")

    g = fm.FederationConfig.load(os.path.join(ROOT, "configs", "gcml5.toml"))
    g.rounds = 20
    out = fm.run_in_process(g)
    assert out.global_model is None and len(out.site_models) == 5
    assert set(fm.run_socket_threads(g).server_inbox) <= {1, 2}
    rows, f, p = fm.dropout_study(g, reps=3)
    assert len(rows) == 5 and 0.0 <= p <= 1.0
    print(f"dropout study (3 reps, 20 rounds): F = {f:.3f}, p = {p:.3f}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
