"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (bool(passed), detail)


def lines() -> list[str]:
    return [f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]
