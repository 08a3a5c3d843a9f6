import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdgan.data import (
    Partition,
    Scene,
    Trajectory,
    evaluation_windows,
    load_annotations,
    make_windows,
    partition_from_labels,
    write_annotations,
)
from crowdgan.errors import MissingLabelsError, ParseError, ValidationError

from helpers import line_scene


def write(path, text):
    path.write_text(text)
    return path


def test_two_row_file(tmp_path):
    scene = load_annotations(write(tmp_path / "a.tsv", "0 1 0.0 0.0\n1 1 1.0 0.0\n"))
    assert len(scene.trajectories) == 1
    t = scene.trajectories[0]
    assert t.ped_id == "1"
    np.testing.assert_array_equal(t.frames, [0, 1])
    np.testing.assert_array_equal(t.positions, [[0, 0], [1, 0]])


def test_empty_file(tmp_path):
    assert load_annotations(write(tmp_path / "e.tsv", "")).trajectories == ()


def test_row_order_does_not_matter(tmp_path):
    a = load_annotations(write(tmp_path / "a.tsv", "0 1 0 0\n1 1 1 0\n2 1 2 0\n0 2 5 5\n"))
    b = load_annotations(write(tmp_path / "b.tsv", "2 1 2 0\n0 2 5 5\n0 1 0 0\n1 1 1 0\n"))
    assert a.trajectories == b.trajectories


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(ParseError) as err:
        load_annotations(write(tmp_path / "m.tsv", "0 1 0 0\n1 1 zero 0\n"))
    assert err.value.line == 2
    with pytest.raises(ParseError) as err:
        load_annotations(write(tmp_path / "n.tsv", "0 1 0 0\n\n0 2 1\n"))
    assert err.value.line == 3


def test_duplicate_sample_rejected(tmp_path):
    with pytest.raises(ValidationError):
        load_annotations(write(tmp_path / "d.tsv", "0 1 0 0\n0 1 1 1\n"))


def test_sidecar_labels_are_loaded(tmp_path):
    write(tmp_path / "s.tsv", "0 1 0 0\n0 2 1 1\n0 3 2 2\n")
    write(tmp_path / "s.groups", "1 A\n2 A\n3 B\n")
    scene = load_annotations(tmp_path / "s.tsv")
    assert partition_from_labels(scene).assignment == {"1": "A", "2": "A", "3": "B"}


def test_labels_must_cover_scene(tmp_path):
    write(tmp_path / "s.tsv", "0 1 0 0\n0 2 1 1\n")
    write(tmp_path / "s.groups", "1 A\n")
    with pytest.raises(ValidationError):
        load_annotations(tmp_path / "s.tsv")


def test_missing_labels():
    with pytest.raises(MissingLabelsError):
        partition_from_labels(line_scene())


def test_singleton_labels():
    scene = Scene(line_scene().trajectories, group_labels=Partition({"1": "a", "2": "b", "3": "c"}))
    assert len(partition_from_labels(scene).groups()) == 3


coords = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(
    st.dictionaries(
        st.integers(0, 50).map(str),
        st.lists(st.tuples(st.integers(0, 200), coords, coords), min_size=1, max_size=8, unique_by=lambda r: r[0]),
        max_size=6,
    )
)
def test_write_load_round_trip(tmp_path_factory, tracks):
    trajs = []
    for ped, rows in tracks.items():
        rows = sorted(rows)
        trajs.append(Trajectory(ped, [r[0] for r in rows], [(r[1], r[2]) for r in rows]))
    scene = Scene(tuple(trajs))
    path = tmp_path_factory.mktemp("rt") / "scene.tsv"
    write_annotations(scene, path)
    again = load_annotations(path)
    assert again.trajectories == scene.trajectories
    # and writing the reloaded scene is byte-identical
    path2 = path.with_name("scene2.tsv")
    write_annotations(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_window_counts():
    scene = line_scene(n_peds=1, frames=30)
    assert len(make_windows(scene, 15, 30, 15)) == 1
    assert len(make_windows(line_scene(n_peds=1, frames=29), 15, 30, 15)) == 0
    assert len(make_windows(line_scene(n_peds=1, frames=60), 15, 30, 15)) == 3


def test_co_present_neighbours():
    windows = make_windows(line_scene(n_peds=3), 15, 30)
    assert len(windows) == 3
    for w in windows:
        assert len(w.neighbour_ids) == 2
        assert w.ped_id not in w.neighbour_ids
        assert w.neighbour_observed.shape == (2, 15, 2)


def test_partially_present_neighbour_dropped():
    f = np.arange(30)
    a = Trajectory("1", f, np.stack([f * 0.4, 0 * f], 1))
    b = Trajectory("2", f[5:], np.stack([f[5:] * 0.4, 0 * f[5:] + 1], 1))
    windows = make_windows(Scene((a, b)), 15, 30)
    assert [w.ped_id for w in windows] == ["1"]
    assert windows[0].neighbour_ids == ()


def test_fragmented_track_windowed_per_run():
    f = np.concatenate([np.arange(0, 30), np.arange(40, 70)])
    t = Trajectory("1", f, np.stack([f * 0.1, f * 0.0], 1))
    windows = make_windows(Scene((t,)), 10, 20, 10)
    starts = [w.start_frame for w in windows]
    assert starts == [0, 10, 40, 50]
    for w in windows:
        assert np.all(np.diff(w.frames) == 1)


@given(st.permutations(range(4)))
def test_windows_independent_of_insertion_order(order):
    base = line_scene(n_peds=4).trajectories
    shuffled = Scene(tuple(base[i] for i in order))
    a, b = make_windows(Scene(base), 15, 30), make_windows(shuffled, 15, 30)
    assert [w.ped_id for w in a] == [w.ped_id for w in b]
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.observed, wb.observed)
        np.testing.assert_array_equal(wa.neighbour_observed, wb.neighbour_observed)


def test_frame_step_respected():
    f = np.arange(0, 300, 10)
    t = Trajectory("1", f, np.stack([f * 0.01, f * 0.0], 1))
    windows = make_windows(Scene((t,)), 15, 30)
    assert len(windows) == 1
    np.testing.assert_array_equal(windows[0].frames, f)


def test_evaluation_windows_report_missing():
    f = np.arange(30)
    a = Trajectory("1", f, np.stack([f * 0.4, 0 * f], 1))
    b = Trajectory("2", f[:20], np.stack([f[:20] * 0.4, 0 * f[:20] + 1], 1))
    windows, missing = evaluation_windows(Scene((a, b)), 15, 30)
    assert [w.ped_id for w in windows] == ["1"]
    assert missing == ["2"]
    # present for the whole observed span, so still a neighbour
    assert windows[0].neighbour_ids == ("2",)


def test_partition_helpers():
    p = Partition.from_groups([["3", "1"], ["2"]])
    assert p.canonical().assignment == {"1": "0", "3": "0", "2": "1"}
    with pytest.raises(ValidationError):
        Partition.from_groups([["1"], ["1", "2"]])
