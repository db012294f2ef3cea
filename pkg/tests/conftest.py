import pytest

from maanet.synth import GenConfig, generate_dataset

# a model small enough for multi-epoch tests in a second or two
TINY = dict(input_size=32, tap_stride=8, stem_channels=4, stage_channels=(4, 8), stream_width=4)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    return generate_dataset(GenConfig(seed=9, image_size=32), 40, tmp_path_factory.mktemp("tiny"))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}" + \
        (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
