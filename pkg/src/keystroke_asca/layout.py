"""Key classes and their positions on an ANSI QWERTY grid."""
from __future__ import annotations

import math

KEYS = "0123456789abcdefghijklmnopqrstuvwxyz"

_ROWS = ("1234567890", "qwertyuiop", "asdfghjkl", "zxcvbnm")
_ROW_OFFSETS = (0.0, 0.5, 0.75, 1.25)


def _half_unit(x):
    # round half up onto the 0.5 grid (0.75 -> 1.0, 1.25 -> 1.5)
    return math.floor(x * 2.0 + 0.5) / 2.0


class KeyboardLayout:
    """Maps class indices to (row, column) grid coordinates."""

    def __init__(self, keys=KEYS):
        self.keys = keys
        pos = {}
        for r, (row, offset) in enumerate(zip(_ROWS, _ROW_OFFSETS)):
            for c, ch in enumerate(row):
                pos[ch] = (float(r), _half_unit(offset + c))
        missing = [k for k in keys if k not in pos]
        if missing:
            raise ValueError(f"layout has no position for keys {missing}")
        self.positions = {i: pos[k] for i, k in enumerate(keys)}

    def distance(self, a, b):
        """Chebyshev distance in key units between classes ``a`` and ``b``."""
        (ra, ca), (rb, cb) = self.positions[a], self.positions[b]
        return max(abs(ra - rb), abs(ca - cb))


QWERTY = KeyboardLayout()
