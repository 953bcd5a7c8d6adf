import numpy as np
import pytest

from invr_lab.records import LOG_COLUMNS, InteractionLog, InteractionRecord, Source, read_log_csv


def test_click_requires_visible():
    with pytest.raises(ValueError):
        InteractionRecord(0, 1, 2, 1, visible=False, clicked=True)


def test_position_starts_at_one():
    with pytest.raises(ValueError):
        InteractionRecord(0, 1, 2, 0, True, False)


def test_source_coerced_from_string():
    assert InteractionRecord(0, 1, 2, 3, True, False, "INVR").source is Source.INVR


def _log():
    log = InteractionLog(max_history=3)
    slates = np.array([[5, 6], [7, 8]])
    log.append_visits(
        4, np.array([1, 2]), slates,
        np.array([[True, False], [True, True]]),
        np.array([[True, False], [False, False]]),
        np.array([[0, 1], [2, 0]]),
        np.array([[9, -1, -1], [-1, -1, -1]]),
    )
    return log


def test_append_visits_layout():
    log = _log()
    cols = log.columns()
    assert len(log) == 4
    assert cols["user_id"].tolist() == [1, 1, 2, 2]
    assert cols["position"].tolist() == [1, 2, 1, 2]
    assert cols["visit"].tolist() == [0, 0, 1, 1]
    assert log.visit_histories().shape == (2, 3)
    recs = list(log.records())
    assert recs[1] == InteractionRecord(4, 1, 6, 2, False, False, Source.INVR)
    assert recs[2].source is Source.COLDSTART


def test_empty_log():
    log = InteractionLog()
    assert len(log) == 0 and list(log.records()) == []
    assert log.visit_histories().shape == (0, 50)


def test_csv_round_trip(tmp_path):
    log = _log()
    log.write_csv(tmp_path / "logs.csv")
    lines = (tmp_path / "logs.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert lines[1] == "4,1,5,1,1,1,ORGANIC"
    assert read_log_csv(tmp_path / "logs.csv") == list(log.records())


def test_csv_missing_column(tmp_path):
    (tmp_path / "bad.csv").write_text("tick,user_id\n1,2\n")
    with pytest.raises(ValueError):
        read_log_csv(tmp_path / "bad.csv")
