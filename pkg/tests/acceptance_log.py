"""Collects one result line per acceptance criterion for the terminal summary."""

import sys

LINES = []


def report(number, name, passed, detail, seconds):
    line = f"ACCEPTANCE {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail} ({seconds:.1f}s)"
    LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)
    return line
