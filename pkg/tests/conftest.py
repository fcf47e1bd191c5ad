import numpy as np
import pytest

from trace_diag.compose import Cell, GridScene, split_group_id


def make_worked_scene() -> GridScene:
    """Material scene: glass vase top-left is edited to match the plastic cup bottom-right."""
    cells = (
        Cell("u-vase", "vase", "glass"),
        Cell("u-chair", "chair", "leather"),
        Cell("u-bowl", "bowl", "stone"),
        Cell("u-cup", "cup", "plastic"),
    )
    return GridScene(
        scene_id="worked",
        cells=cells,
        attribute_type="material",
        edited_slot="tl",
        reference_slot="br",
        split_group_id=split_group_id(c.uid for c in cells),
    )


@pytest.fixture
def worked_scene():
    return make_worked_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
