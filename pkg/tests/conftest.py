import numpy as np
import pytest


class ForcedStream:
    """RngStream stand-in that replays scripted draws.

    ``integers`` entries feed ``integer`` calls in order; ``uniforms`` feed
    ``uniform`` calls. Lets tests force a specific pair selection and coin.
    """

    def __init__(self, integers=(), uniforms=()):
        self._integers = list(integers)
        self._uniforms = list(uniforms)

    def integer(self, n):
        v = self._integers.pop(0)
        assert 0 <= v < n, f"scripted draw {v} out of range({n})"
        return v

    def uniform(self):
        return self._uniforms.pop(0)


@pytest.fixture
def forced_stream():
    return ForcedStream


def make_grid(centers, masses):
    """WealthGrid with explicit representative points (edges at midpoints)."""
    from kinex import WealthGrid

    c = np.asarray(centers, dtype=float)
    mids = 0.5 * (c[:-1] + c[1:])
    edges = np.concatenate(([0.0], mids, [c[-1] + 1.0]))
    return WealthGrid(edges, masses, centers=c)
