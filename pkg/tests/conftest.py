import pytest
from hypothesis import settings

from driftlab.transformer_block import BlockConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TOY = BlockConfig(d_model=64, n_heads=4, d_ff=256, vocab_size=500, seq_len=32, n_sequences=4)


@pytest.fixture
def toy():
    return TOY


# one line per acceptance criterion, echoed after the run even when output is captured
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
