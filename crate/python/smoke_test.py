"""Smoke test for the qdiffpy extension.

Build the extension first, either with `maturin develop -m crates/py/Cargo.toml`
or with `cargo build --release -p qdiff-py`. In the second case this script
loads target/release/libqdiffpy.so directly.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
REFERENCE = ROOT / "crates" / "core" / "tests" / "data" / "reference.qdck"


def load_extension():
    try:
        import qdiffpy

        return qdiffpy
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libqdiffpy.so", "libqdiffpy.dylib", "qdiffpy.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("qdiffpy", str(path))
                spec = importlib.util.spec_from_file_location("qdiffpy", path, loader=loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("qdiffpy not found; build it with cargo build --release -p qdiff-py")


def main():
    q = load_extension()

    cfg = q.Config()
    assert cfg.calibration_size == 5120, cfg.calibration_size
    assert q.Config({"T_sample": 50, "calib.c": 2}).calibration_size == 6400
    try:
        q.Config({"calib.N": 10})
    except ValueError as e:
        print("rejected derived key:", e)
    else:
        raise AssertionError("calib.N accepted")

    out = q.quantize_dequantize([0.34, 5.0, -0.26], 0.1, 4)
    assert all(abs(a - b) < 1e-6 for a, b in zip(out, [0.3, 0.7, -0.3])), out

    steps = q.sampler_steps(1000, 100)
    assert steps[0] == 1000 and steps[-1] == 1 and len(steps) == 100

    assert q.checkpoint_kind(str(REFERENCE)) == "model"
    fp = q.Model.load(str(REFERENCE))
    print("reference model:", fp.param_count, "parameters,", len(fp.layer_names), "layers")

    small = q.Config({"sample.count": 256, "calib.n": 8, "calib.iters": 20})
    ref = q.reference_points(small, 0)
    samples = fp.sample(small, 0)
    ed = q.energy_distance(samples, ref)
    cov = q.mode_coverage(samples, small)
    print(f"fp32: energy distance {ed:.4f}, min mode coverage {min(cov):.3f}")
    assert ed < 0.1 and math.isclose(sum(cov), 1.0)

    # Weights only: with so few calibration trajectories, 8-bit activation
    # ranges are too narrow for the quantized sampler and a few samples run off.
    w4 = q.Config({"sample.count": 256, "calib.n": 8, "calib.iters": 20, "bits_a": 32})
    qm = q.QuantizedModel.calibrate(fp, w4, 0)
    t, mse = qm.error_curve(fp, w4, 0)
    assert len(t) == len(mse) == 100
    print(f"W4A32: final closed-loop mse {mse[-1]:.4f}, "
          f"spearman with step {q.spearman(list(range(len(mse))), mse):.3f}")

    with tempfile.TemporaryDirectory() as d:
        path = str(pathlib.Path(d) / "quantized.qdck")
        qm.save(path)
        assert q.checkpoint_kind(path) == "quantized"
        back = q.QuantizedModel.load(path)
        assert back.sample(small, 1) == qm.sample(small, 1)

    print("ok")


if __name__ == "__main__":
    main()
