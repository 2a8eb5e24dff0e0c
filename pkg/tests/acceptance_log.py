"""Shared record of acceptance verdicts, printed once at the end of the session."""

LINES: dict = {}


def record(number: int, passed: bool, title: str, detail: str) -> str:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}"
    LINES[number] = line
    print(line)
    return line
