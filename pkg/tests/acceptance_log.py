"""Shared record of acceptance outcomes, printed by the terminal-summary hook."""

from contextlib import contextmanager

RESULTS = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one criterion; ``notes`` collects measured values."""
    notes = []
    try:
        yield notes
    except BaseException:
        RESULTS[number] = ("FAIL", title, "; ".join(notes))
        raise
    RESULTS[number] = ("PASS", title, "; ".join(notes))


def lines():
    return [f"criterion {n}: {status} {title}" + (f" ({detail})" if detail else "")
            for n, (status, title, detail) in sorted(RESULTS.items())]
