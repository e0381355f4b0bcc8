"""Collects one pass/fail line per acceptance criterion."""

LINES: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> bool:
    text = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES[number] = text
    print(text)
    return passed
