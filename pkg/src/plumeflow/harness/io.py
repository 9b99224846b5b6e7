"""CSV emission/parsing with lossless float round-trips.

Floats are written via repr (shortest round-trip form) so a rewritten file is
byte-identical and a re-read value is bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError


def format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # plain shortest-roundtrip decimal
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def parse_cell(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"row width {len(row)} != header width {len(header)}")
        lines.append(",".join(format_cell(v) for v in row))
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], list[list]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        if not ln:
            continue
        cells = ln.split(",")
        if len(cells) != len(header):
            raise FormatError(f"{path}: row width {len(cells)} != header {len(header)}")
        rows.append([parse_cell(c) for c in cells])
    return header, rows
