"""Smoke test of the `egopath` extension module.

Build and install it first, e.g. `pip install --no-build-isolation ./crates/python`.
"""

import math
import tempfile
from pathlib import Path

import egopath


def close(a, b, tol=1e-12):
    assert abs(a - b) <= tol, (a, b)


def main():
    close(egopath.smooth_l1(0.01, 0.005), 0.0075)
    close(egopath.trajectory_loss([0.26, 0.76], [0.25], [0.75], 1.0, w_max=20.0), 0.03)
    close(egopath.cross_entropy([0.0] * 129, [7], 129), math.log(129))
    close(egopath.dice_loss([1.0, 0.0], [True, False]), 0.0, 1e-9)
    assert egopath.anchor_validity(0.5, 4) == [True, True, False, False]
    assert egopath.select_checkpoint([5.0, 4.0, 3.0, 2.5, 2.6, 2.4, 2.45, 2.5, 2.7, 2.8], 10) == 10
    assert egopath.one_cycle_lr(0, 1000, 1e-4) < 1e-6

    crop = (0.0, 0.0, 100.0, 100.0)
    vec = [0.4] * 8 + [0.6] * 8 + [1.0]
    pred = egopath.decode_regression(vec, crop)
    assert pred.paradigm == "regression" and len(pred.left) == 8
    close(pred.iou(pred, 100, 100), 1.0)

    state = egopath.CropState(400, 300)
    assert state.crop == (0.0, 0.0, 400.0, 300.0)
    for _ in range(60):
        state.update(egopath.decode_regression([0.45] * 4 + [0.55] * 4 + [0.6], (0.0, 0.0, 400.0, 300.0)))
    left, top, right, bottom = state.crop
    assert right - left >= 80 and bottom - top >= 60

    with tempfile.TemporaryDirectory() as d:
        ids = egopath.write_synthetic_set(d, 2, seed=1, width=160, height=120)
        assert len(ids) == 2
        model = egopath.Model("regression", "resnet18", input_size=64)
        assert model.parameter_count() > 1_000_000
        p = model.predict(str(Path(d) / "images" / f"{ids[0]}.png"))
        assert p.paradigm == "regression"
        ckpt = str(Path(d) / "m.safetensors")
        model.save(ckpt)
        again = egopath.Model.load(ckpt)
        assert again.parameter_count() == model.parameter_count()
        report = model.benchmark(iterations=3, warmup=1)
        assert report["iterations"] == 3 and report["mean_ms"] > 0

    try:
        egopath.Model("regression", "vgg16")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown backbone accepted")

    print("egopath smoke test passed")


if __name__ == "__main__":
    main()
