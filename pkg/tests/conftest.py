# Central differences at eps=1e-5 carry about 1e-11 of absolute round-off, so
# composed-model checks add this floor to |fd| in the relative-error denominator.
FD_FLOOR = 1e-6

# one "CRITERION n PASS|FAIL ..." line per acceptance criterion, echoed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
