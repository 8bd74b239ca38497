import numpy as np
import pytest

from keystroke_asca.nn.tensor import Tensor


def check_gradients(loss_fn, tensors, n_coords=20, h=1e-3, seed=0):
    """Compare analytic gradients to central differences at random coordinates.

    ``loss_fn()`` must rebuild the graph from the current tensor values and
    return a scalar Tensor.  Returns the worst relative error observed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for n in range(n_coords):
        which = n % len(tensors)
        t = tensors[which]
        idx = tuple(int(rng.integers(s)) for s in t.data.shape)
        old = t.data[idx]
        t.data[idx] = old + h
        up = float(loss_fn().data)
        t.data[idx] = old - h
        down = float(loss_fn().data)
        t.data[idx] = old
        numeric = (up - down) / (2 * h)
        a = float(analytic[which][idx])
        diff = abs(a - numeric)
        if diff > 1e-9:  # both effectively zero otherwise
            worst = max(worst, diff / max(abs(a), abs(numeric)))
    return worst


def param(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def projected(out, seed=99):
    """Scalar sum(out * R) with a fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r, dtype=out.dtype)).sum()


@pytest.fixture
def gradcheck():
    return check_gradients


SMALL_CONFIG = """\
Epochs = 5
Keys = 4
Presses Per Key = 6
Seed = 7
"""


def run_cli_pipeline(workdir, config_text=SMALL_CONFIG):
    """synth -> isolate -> featurize -> train -> eval -> report inside ``workdir``; returns exit codes."""
    from keystroke_asca.cli import run

    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "exp.cfg"
    cfg.write_text(config_text)
    c = ["--config", str(cfg)]
    w = str(workdir)
    steps = [
        ["synth", *c, "--out", f"{w}/corpus"],
        ["isolate", *c, "--input", f"{w}/corpus", "--out", f"{w}/segments"],
        ["featurize", *c, "--input", f"{w}/segments", "--out", f"{w}/specs"],
        ["train", *c, "--data", f"{w}/segments", "--out", f"{w}/run"],
        ["eval", *c, "--data", f"{w}/specs", "--checkpoint", f"{w}/run/best.ckpt", "--split", f"{w}/run/split.json",
         "--out", f"{w}/eval"],
        ["report", *c, "--eval", f"{w}/eval", "--history", f"{w}/run/history.csv", "--out", f"{w}/report.txt"],
    ]
    return [run(s) for s in steps]


PIPELINE_OUTPUTS = [
    "segments.f32", "segments.json", "specs.f32", "specs.json", "run/best.ckpt", "run/final.ckpt",
    "run/history.csv", "run/split.json", "run/train.json", "eval/confusion.csv", "eval/confusion.png",
    "eval/classification_report.txt", "eval/metrics.json", "eval/predictions.csv", "report.txt",
]


ACCEPTANCE_LINES = {}


def record(criterion, ok, detail):
    """Store the PASS/FAIL line for an acceptance criterion, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for c in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[c])
