"""Small builders shared by the test modules."""

import numpy as np

from fpguard.model import GradientUpdate, LayerLayout


def layout(*lengths):
    return LayerLayout.from_lengths(lengths)


def updates_from(matrix, lay=None):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lay = lay or layout(matrix.shape[1])
    return [GradientUpdate(row.copy(), lay, i) for i, row in enumerate(matrix)]
