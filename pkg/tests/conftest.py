import pytest

_CRITERIA: dict[tuple[int, str], tuple[bool, str]] = {}


class Criterion:
    """Tags a test as an acceptance criterion and carries a one-line measurement."""

    def __init__(self, props: list):
        self.props = props

    def __call__(self, number: int, title: str) -> None:
        self.props.append(("criterion", (number, title)))

    def note(self, text: str) -> None:
        self.props.append(("detail", text))


@pytest.fixture
def criterion(request):
    return Criterion(request.node.user_properties)


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or report.failed):
        _CRITERIA[props["criterion"]] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, detail) in sorted(_CRITERIA.items()):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
