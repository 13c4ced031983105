#!/usr/bin/env python3
"""Smoke test for the modgan_py extension module.

Builds the extension with cargo, loads it, and runs a miniature end-to-end
pipeline: synthesize a tiny dataset, train for zero epochs (initialization
checkpoint only), and execute a reconstruction plan.

Usage: python3 python/smoke_test.py
"""

import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(["cargo", "build", "-p", "modgan-py"], cwd=ROOT, check=True)
    debug = ROOT / "target" / "debug"
    built = next(
        p
        for p in [debug / "libmodgan_py.so", debug / "libmodgan_py.dylib", debug / "modgan_py.dll"]
        if p.exists()
    )
    staged = debug / "modgan_py.so"
    if not staged.exists() or staged.stat().st_mtime < built.stat().st_mtime:
        shutil.copy2(built, staged)
    sys.path.insert(0, str(debug))
    import modgan_py

    return modgan_py


def main():
    m = build_and_import()

    schema = dict(m.colormnist_schema())
    assert schema["color"] == ["red", "blue", "green", "purple", "brown"], schema
    assert set(schema) == {"digit", "color", "style", "bgcolor"}, schema

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        train_root, test_root = m.synth_colormnist(30, 64, 0, str(tmp / "data"))
        assert pathlib.Path(train_root, "manifest.csv").exists()
        assert pathlib.Path(test_root, "manifest.csv").exists()

        ckpts = m.train(
            train_root,
            str(tmp / "run"),
            ["epochs_flat=0", "epochs_decay=0", "width=2", "z_dim=8"],
        )
        ckpt = pathlib.Path(ckpts) / "epoch_000"
        assert (ckpt / "manifest.json").exists()

        image = next(pathlib.Path(train_root, "images").glob("*.png"))
        shape, pixels = m.run_plan(
            str(ckpt),
            f"img:{image} -> color=red -> out",
            0,
            str(tmp / "out.png"),
        )
        assert shape == (3, 64, 64), shape
        assert len(pixels) == 3 * 64 * 64
        assert all(-1.0 <= v <= 1.0 for v in pixels)
        assert (tmp / "out.png").exists()

        # invalid plans surface as ValueError, not panics
        try:
            m.run_plan(str(ckpt), "img:x.png -> nope=1 -> out", 0, None)
        except ValueError as e:
            assert "nope" in str(e)
        else:
            raise AssertionError("expected ValueError for unknown attribute")

    print("modgan_py smoke test passed")


if __name__ == "__main__":
    main()
