from datetime import datetime, timedelta

import numpy as np
import pytest

from fairride.base import InputError, Request
from fairride.ingest import (BBox, ColumnMap, DropReport, RawTrip, Timeline, build_graph, build_request_timeline,
                             filter_time_window, parse_trip_records, split_horizon, stratified_sample,
                             write_trip_records)

T0 = datetime(2016, 3, 1, 8, 0, 0)
BOX = BBox(-74.03, 40.69, -73.90, 40.88)


def trip(sec=0, p=(-73.98, 40.75), d=(-73.95, 40.78), tt=300.0):
    return RawTrip(T0 + timedelta(seconds=sec), p[0], p[1], d[0], d[1], tt)


def test_bbox_parse():
    assert BBox.parse("-74.1,40.5,-73.7,40.9") == BBox(-74.1, 40.5, -73.7, 40.9)
    for bad in ("1,2,3", "a,b,c,d", "0,0,-1,1"):
        with pytest.raises(InputError):
            BBox.parse(bad)


def test_empty_file(tmp_path):
    path = tmp_path / "t.csv"
    write_trip_records(path, [])
    trips, rep = parse_trip_records(path, BOX, ColumnMap(travel_time="travel_time"))
    assert trips == [] and rep.dropped == 0


def test_out_of_bbox_dropped(tmp_path):
    path = tmp_path / "t.csv"
    write_trip_records(path, [trip(0), trip(10, p=(0.0, 0.0)), trip(20)])
    trips, rep = parse_trip_records(path, BOX, ColumnMap(travel_time="travel_time"))
    assert len(trips) == 2 and rep.out_of_bbox == 1 and rep.rows == 3


def test_malformed_rows_counted(tmp_path):
    path = tmp_path / "t.csv"
    write_trip_records(path, [trip(0)])
    with path.open("a") as fh:
        fh.write("not-a-date,1,2,3,4,5\n")
        fh.write(f"{T0.isoformat()},x,40.7,-73.9,40.7,5\n")
    trips, rep = parse_trip_records(path, BOX, ColumnMap(travel_time="travel_time"))
    assert len(trips) == 1 and rep.malformed == 2


def test_missing_columns(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        parse_trip_records(path, BOX)


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        parse_trip_records(tmp_path / "nope.csv")


def test_round_trip_100_rows(tmp_path):
    rng = np.random.default_rng(3)
    trips = [trip(int(s), p=(-74.0 + 0.05 * a, 40.7 + 0.1 * b), d=(-73.95, 40.8), tt=float(tt))
             for s, a, b, tt in zip(rng.integers(0, 10_000, 100), rng.random(100), rng.random(100),
                                    rng.integers(60, 3600, 100))]
    path = tmp_path / "t.csv"
    write_trip_records(path, trips)
    back, rep = parse_trip_records(path, BOX, ColumnMap(travel_time="travel_time"))
    assert back == trips and rep.dropped == 0


def test_dropoff_time_derives_travel_time(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(
        "tpep_pickup_datetime,tpep_dropoff_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude\n"
        "2016-03-01 08:00:00,2016-03-01 08:10:00,-73.98,40.75,-73.95,40.78\n")
    trips, _ = parse_trip_records(path, BOX)
    assert trips[0].travel_time == 600.0


def test_time_filter():
    trips = [trip(0), trip(3600), trip(2 * 3600)]  # 08:00, 09:00, 10:00
    rep = DropReport()
    kept = filter_time_window(trips, "08:30-10:00", rep)
    assert kept == [trips[1]] and rep.time_filtered == 2
    assert filter_time_window(trips, "09:30-08:30") == [trips[0], trips[2]]
    with pytest.raises(InputError):
        filter_time_window(trips, "8-9")


def test_single_cluster_pair():
    g, nm = build_graph([trip(tt=100.0), trip(tt=200.0)], merge_radius=0.01)
    assert g.n_nodes == 2 and g.edges == {(0, 1): 150.0}


def test_grid_clustering_by_hand():
    # cell size 1 degree; points chosen inside a 3x3 grid of cells (0..2, 0..2)
    pts = [((0.5, 0.5), (1.5, 0.5)), ((0.2, 0.7), (1.9, 0.1)), ((1.5, 0.5), (2.5, 2.5)),
           ((2.1, 2.2), (0.5, 0.5)), ((0.5, 1.5), (0.6, 1.4)), ((1.5, 1.5), (2.5, 1.5)),
           ((2.5, 1.5), (1.5, 1.5)), ((0.5, 2.5), (1.5, 2.5)), ((1.5, 2.5), (0.5, 2.5)),
           ((0.1, 0.1), (1.2, 0.8))]
    trips = [trip(k, p=p, d=d, tt=float(10 * (k + 1))) for k, (p, d) in enumerate(pts)]
    g, nm = build_graph(trips, merge_radius=1.0)
    # cells used: (0,0) (1,0) (2,2) (0,1) (1,1) (2,1) (0,2) (1,2) -> 8 nodes
    assert g.n_nodes == 8 and len(nm) == 8
    # arcs: (0,0)->(1,0) three times; (1,0)->(2,2); (2,2)->(0,0); (1,1)<->(2,1); (0,2)<->(1,2); (0,1) same-cell
    assert len(g.edges) == 7
    a, b = nm.node_of(0.5, 0.5), nm.node_of(1.5, 0.5)
    assert g.edges[(a, b)] == pytest.approx((10 + 20 + 100) / 3)


def test_timeline_batching():
    trips = [trip(0, tt=1), trip(30, tt=1), trip(90, tt=1)]
    _, nm = build_graph(trips, 0.01)
    tl = build_request_timeline(trips, nm, batch_seconds=60)
    assert [r.t for r in tl.requests] == [0, 0, 1]


def test_timeline_histogram_oracle():
    rng = np.random.default_rng(5)
    offs = rng.integers(0, 600, 50)
    trips = [trip(int(o)) for o in offs]
    _, nm = build_graph(trips, 0.01)
    tl = build_request_timeline(trips, nm, batch_seconds=60)
    hist = np.bincount(offs // 60, minlength=tl.n_steps)
    np.testing.assert_array_equal(tl.counts(), hist[: tl.n_steps])


def test_same_node_trips_dropped():
    trips = [trip(0, p=(-73.98, 40.75), d=(-73.98, 40.75)), trip(1)]
    _, nm = build_graph(trips, 0.01)
    rep = DropReport()
    tl = build_request_timeline(trips, nm, report=rep)
    assert len(tl) == 1 and rep.same_node == 1


def test_timeline_save_load(tmp_path):
    tl = Timeline((Request(0, 2, 0, 1), Request(1, 0, 1, 0)), 3)
    tl.save(tmp_path / "r.csv")
    back = Timeline.load(tmp_path / "r.csv", 3)
    assert [(r.t, r.s, r.d) for r in back.requests] == [(0, 1, 0), (2, 0, 1)]
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "t_r,s_r,d_r"


def test_timeline_rejects_out_of_range():
    with pytest.raises(InputError):
        Timeline((Request(0, 5, 0, 1),), 3)


def test_stratified_sample_per_step():
    reqs = tuple(Request(i, i // 10, 0, 1) for i in range(40))
    tl = Timeline(reqs, 4)
    rep = DropReport()
    half = stratified_sample(tl, 0.5, seed=1, report=rep)
    np.testing.assert_array_equal(half.counts(), [5, 5, 5, 5])
    assert rep.sampled_out == 20
    assert stratified_sample(tl, 0.5, seed=1).requests == half.requests
    with pytest.raises(InputError):
        stratified_sample(tl, 0.0, seed=1)


def test_split_degenerate():
    tl = Timeline(tuple(Request(i, 0, 0, 1) for i in range(3)), 1)
    sp = split_horizon(tl, 0, 0)
    assert len(sp.current) == 3 and not sp.historical and not sp.future


def test_split_boundaries():
    tl = Timeline(tuple(Request(t, t, 0, 1) for t in range(10)), 10)
    sp = split_horizon(tl, 4, 5)
    assert [r.t for r in sp.historical] == [0, 1, 2, 3]
    assert [r.t for r in sp.current] == [4]
    assert [r.t for r in sp.future] == [5, 6, 7, 8, 9]
    assert list(sp.future_steps) == [5, 6, 7, 8, 9]
    with pytest.raises(InputError):
        split_horizon(tl, 5, 5)
