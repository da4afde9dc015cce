"""Offline dynamic time warping over the same frame distance and step pattern the online follower uses."""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .oltw import jaccard_distance

VERTICAL = 0
DIAGONAL = 1
HORIZONTAL = 2


@dataclass(frozen=True)
class DtwResult:
    cost: float
    path: List[Tuple[int, int]]
    n_query: int

    def positions(self) -> np.ndarray:
        """Furthest reference frame the path reaches for each query frame."""
        positions = np.zeros(self.n_query, dtype=int)
        for i, j in self.path:
            positions[i] = max(positions[i], j)
        return positions


def full_dtw(query: np.ndarray, reference: np.ndarray) -> DtwResult:
    """
    Globally optimal path from (0, 0) to the last frame of both sequences. Rows are filled with the
    same running-minimum recursion as the online follower; only step directions are kept for backtracking.
    Distance rows are computed once per distinct query frame.
    """
    n, m = len(query), len(reference)
    directions = np.full((n, m), HORIZONTAL, dtype=np.int8)

    rows: Dict[bytes, np.ndarray] = {}

    def distances(frame: np.ndarray) -> np.ndarray:
        key = frame.tobytes()
        if key not in rows:
            rows[key] = jaccard_distance(frame, reference)
        return rows[key]

    row = np.cumsum(distances(query[0]))
    directions[0, 0] = DIAGONAL
    for i in range(1, n):
        costs = distances(query[i])
        diagonal = np.concatenate(([np.inf], row[:-1]))
        from_diagonal = diagonal <= row
        tmp = costs + np.minimum(row, diagonal)
        cumulative = np.cumsum(costs)
        new_row = cumulative + np.minimum.accumulate(tmp - cumulative)
        directions[i] = np.where(new_row < tmp - 1e-12, HORIZONTAL, np.where(from_diagonal, DIAGONAL, VERTICAL))
        row = new_row

    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while i > 0 or j > 0:
        direction = directions[i, j]
        if i == 0 or (direction == HORIZONTAL and j > 0):
            j -= 1
        elif direction == DIAGONAL and j > 0:
            i, j = i - 1, j - 1
        else:
            i -= 1
        path.append((i, j))
    path.reverse()
    return DtwResult(float(row[-1]), path, n)
