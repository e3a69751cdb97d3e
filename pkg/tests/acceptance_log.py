"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = []


def report(criterion, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion} {title}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    return passed
