from helpers import ACCEPTANCE, ACCEPTANCE_IDS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in ACCEPTANCE_IDS:
        if ac in ACCEPTANCE:
            ok, detail = ACCEPTANCE[ac]
            terminalreporter.write_line(f"{ac} {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{ac} FAIL  not run or errored before reporting")
