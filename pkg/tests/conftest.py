import numpy as np
import pytest

from patconv.patterns import Pattern, PatternSet
from patconv.reorder import ReorderPlan, SparseKernel, SparseLayer
from patconv.tensors import LayerShape


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def golden_pattern_set() -> PatternSet:
    """Two fixed candidate patterns used by the golden-layer fixture."""
    p1 = Pattern(((0, 0), (0, 1), (0, 2), (1, 1)))   # top row + center
    p2 = Pattern(((1, 0), (1, 1), (1, 2), (2, 1)))   # cross bottom half
    return PatternSet((p1, p2))


def golden_layer():
    """The documented reference layer for the FKW codec.

    Four stored filters with 2, 2, 2, 3 kernels. Stored filter 0 holds a
    pattern-1 kernel on input channel 3 and a pattern-2 kernel on channel 1;
    filters 2 and 3 swapped places during reordering. Weights are exact
    binary fractions so the serialized bytes never wobble.
    """
    pset = golden_pattern_set()
    shape = LayerShape(3, 3, 5, 4, 1, 8, 8)

    def kernel(ic, pid, base):
        return SparseKernel(ic, pid, (base, base + 0.25, base + 0.5, base + 0.75))

    filters = (
        (kernel(3, 1, 1.0), kernel(1, 2, 2.0)),
        (kernel(0, 1, 3.0), kernel(2, 2, 4.0)),
        (kernel(1, 1, 5.0), kernel(3, 2, 6.0)),
        (kernel(0, 1, 7.0), kernel(2, 1, 7.5), kernel(4, 2, 8.0)),
    )
    layer = SparseLayer(shape, filters, pset)
    plan = ReorderPlan((0, 1, 3, 2), ((0, 3, 2), (3, 4, 3)))
    return layer, plan
