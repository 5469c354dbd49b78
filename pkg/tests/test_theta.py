import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpcrl.ocp import Block, OCPSpec, ThetaVector


def make():
    spec = OCPSpec(n=2, m=1, H=3, input_box=True)
    return spec, spec.theta(Q=[1.0, 2.0], R=0.5, A=np.eye(2), B=[[0.0], [1.0]], learnable=["stage_q", "dyn_B"])


def test_blocks_partition_the_vector():
    _, th = make()
    covered = np.zeros(len(th), dtype=int)
    for b in th.blocks:
        covered[th.slice(b.name)] += 1
    assert np.all(covered == 1)
    assert len(th) == sum(b.size for b in th.blocks)


def test_learnable_view_and_labels():
    _, th = make()
    assert th.n_learnable == 4
    assert th.learnable_labels() == ["stage_q[0]", "stage_q[1]", "dyn_B[0]", "dyn_B[1]"]
    assert np.array_equal(th.learnable_values(), [1.0, 2.0, 0.0, 1.0])


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_with_learnable_never_touches_frozen(vals):
    _, th = make()
    new = th.with_learnable(vals)
    frozen = ~th.learnable_mask
    assert np.array_equal(new.values[frozen], th.values[frozen])
    assert np.array_equal(new.learnable_values(), vals)


def test_project_clamps_into_bounds():
    _, th = make()
    th = th.with_bounds("dyn_B", 0.0, 0.5).with_values(np.full(len(th), 3.0))
    assert np.all(th.project()["dyn_B"] == 0.5)
    # stage weights carry a positive lower bound
    low = th.with_block("stage_r", [-1.0]).project()["stage_r"][0]
    assert low > 0


def test_text_round_trip_is_exact():
    _, th = make()
    th = th.with_learnable([1 / 3, math.pi, -1e-300, 2.0**60]).with_bounds("dyn_A", -1.0, 1.0)
    back = ThetaVector.from_text(th.to_text())
    assert back == th
    assert back.blocks == th.blocks


def test_unknown_block_and_bad_sizes():
    _, th = make()
    with pytest.raises(KeyError):
        th.with_flags(["nope"])
    with pytest.raises(ValueError):
        ThetaVector([Block("a", "cost_weights", 2)], [1.0])
    with pytest.raises(ValueError):
        Block("a", "nonsense", 1)


def test_expand_scatters_with_zeros():
    _, th = make()
    full = th.expand(np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.array_equal(full[th.learnable_mask], [1, 2, 3, 4])
    assert np.all(full[~th.learnable_mask] == 0)
