import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from chunkserve import (ClusterSpec, gpu_preset, model_preset,  # noqa: E402
                        validate_deployment)
from chunkserve.sched import CapacityModel  # noqa: E402


@pytest.fixture(scope="session")
def llama13b():
    return model_preset("llama-13b")


@pytest.fixture(scope="session")
def a6000():
    return gpu_preset("a6000")


@pytest.fixture(scope="session")
def single_gpu(llama13b, a6000):
    return validate_deployment(llama13b, ClusterSpec(a6000))


@pytest.fixture(scope="session")
def capacity_1k(single_gpu):
    return CapacityModel.for_deployment(single_gpu, 1024)


# Published per-token prefill and decode breakdown (LLaMA-13B, A6000), in ms.
# Linear time is split 3:1:4:4 over preproj, postproj, ffn_ln1, ffn_ln2 (their
# FLOP shares for this model); the table itself only reports the linear sum.
REFERENCE_BREAKDOWN_ROWS = [
    # op, phase, tokens, context, ms
    ("preproj", "prefill", 1024, 0, 56.2),
    ("postproj", "prefill", 1024, 0, 18.74),
    ("ffn_ln1", "prefill", 1024, 0, 74.93),
    ("ffn_ln2", "prefill", 1024, 0, 74.93),
    ("attn", "prefill", 1024, 1024, 10.0),
    ("preproj", "decode", 4, 0, 11.07),
    ("postproj", "decode", 4, 0, 3.69),
    ("ffn_ln1", "decode", 4, 0, 14.76),
    ("ffn_ln2", "decode", 4, 0, 14.76),
    ("attn", "decode", 4, 1024, 5.68),
    ("preproj", "mixed", 1024, 0, 55.8),
    ("postproj", "mixed", 1024, 0, 18.6),
    ("ffn_ln1", "mixed", 1024, 0, 74.4),
    ("ffn_ln2", "mixed", 1024, 0, 74.4),
    ("attn", "mixed", 1024, 1023, 15.2),
]


def reference_breakdown_csv():
    lines = ["# per-token breakdown table, times in microseconds",
             "op,phase,tokens,context,time_us"]
    for op, phase, tokens, ctx, ms in REFERENCE_BREAKDOWN_ROWS:
        lines.append(f"{op},{phase},{tokens},{ctx},{round(ms * 1000, 6)!r}")
    return "\n".join(lines) + "\n"


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
