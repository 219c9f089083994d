import pytest

from lnsbnn.metrics import CSV_FIELDS, MetricsRecord, read_metrics, write_metrics


def rec(**kw):
    base = dict(epoch=1, split="train", cls_loss=0.5, aux_loss=0.1, total_loss=0.6, accuracy=0.8506,
                flip_rate=0.01, lr=0.01, wall_seconds=1.25)
    return MetricsRecord(**{**base, **kw})


def test_field_formatting(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(rec(cls_loss=1 / 3), p)
    header, row = p.read_text().splitlines()
    assert header == ",".join(CSV_FIELDS)
    values = dict(zip(CSV_FIELDS, row.split(",")))
    assert values["accuracy"] == "0.8506"
    assert values["cls_loss"] == "0.333333"
    assert values["epoch"] == "1"


def test_two_appends_one_header(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(rec(), p)
    write_metrics(rec(epoch=2, split="test"), p)
    lines = p.read_text().splitlines()
    assert len(lines) == 3
    assert lines.count(",".join(CSV_FIELDS)) == 1


def test_roundtrip(tmp_path):
    p = tmp_path / "m.csv"
    records = [rec(), rec(epoch=2, accuracy=0.9, flip_rate=0.0, lr=1e-5)]
    for r in records:
        write_metrics(r, p)
    assert read_metrics(p) == records


def test_optional_pretrain_flip_column(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(rec(flip_rate_pretrain=0.02), p)
    assert p.read_text().splitlines()[0].endswith(",flip_rate_pretrain")
    assert read_metrics(p)[0].flip_rate_pretrain == 0.02


@pytest.mark.parametrize("kw", [{"accuracy": 1.2}, {"flip_rate": -0.1}])
def test_range_checks(kw):
    with pytest.raises(ValueError):
        rec(**kw)


def test_io_failure(tmp_path):
    with pytest.raises(OSError):
        write_metrics(rec(), tmp_path / "missing_dir" / "m.csv")
