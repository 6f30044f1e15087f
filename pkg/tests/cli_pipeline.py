"""Run every CLI subcommand once in the current directory and collect outputs."""

import contextlib
import io
import os
from pathlib import Path

from rangepdm.cli import main

SENSOR = ["--height", "16", "--width", "256", "--virtual-width", "272"]


def run(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(argv)
    return code, out.getvalue()


def run_pipeline(threads: int, steps: int = 8) -> dict:
    """Return {name: bytes} for every file and stdout produced, in a fixed order."""
    t = ["--threads", str(threads)]
    cmds = [
        ("synth_a", ["synth", "--out", "scan_a", "--collision-boost", "2", "--wall-radius", "20",
                     "--noise", "0.01", "--two-class"]),
        ("synth_b", ["synth", "--out", "scan_b", "--seed", "7", "--wall-radius", "20", "--two-class"]),
        ("project", ["project", "scan_a.bin", "--out", "scan_a.rimg", "--png", "scan_a.png"]),
        ("upper", ["upper-bound", "scan_a.bin", "scan_b.bin", "--out", "upper.json"]),
        ("augment", ["augment", "--target", "scan_a.bin", "--donor", "scan_b.bin", "--out", "aug",
                     "--rare-classes", "2", "--paste-count", "2"]),
        ("train", ["train-pdm", "scan_a.bin", "aug.bin", "--out", "model.ckpt", "--trace", "trace.csv",
                   "--steps", str(steps), "--feature-dim", "8", "--hidden-dim", "8"]),
        ("infer", ["infer-pdm", "scan_a.bin", "--checkpoint", "model.ckpt", "--out", "pred.label"]),
        ("knn", ["postprocess", "knn", "scan_a.bin", "--pred", "pred.label", "--out", "knn.label"]),
        ("nla", ["postprocess", "nla", "scan_a.bin", "--pred", "pred.label", "--out", "nla.label"]),
        ("eval", ["eval", "scan_a.bin", "--pred", "knn.label", "--out", "eval.json"]),
    ]
    outputs = {}
    for name, argv in cmds:
        code, stdout = run(argv + SENSOR + t)
        if code != 0:
            raise AssertionError(f"{name} exited {code}")
        outputs[f"stdout:{name}"] = stdout.encode()
    for p in sorted(Path(".").iterdir()):
        if p.is_file():
            outputs[p.name] = p.read_bytes()
    return outputs


@contextlib.contextmanager
def inside(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)
