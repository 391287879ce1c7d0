import pytest

from actplots.cli import main
from actplots.render import FIGURE_KINDS, PlotSpec, SchemaError, render

ROUND_CSV = """round,f_score,n_outliers,n_clusters,map,rank1
0,0.61,80,40,0.71,0.84
1,0.67,71,43,0.74,0.86
2,0.72,60,45,0.78,0.88
3,0.74,55,46,0.80,0.90
"""

ACT_CSV = """round,model,map,rank1,f_score,n_outliers
0,main,0.80,0.90,0.70,60
0,co,0.78,0.88,0.70,60
1,main,0.83,0.92,0.74,52
1,co,0.80,0.90,0.74,52
2,main,0.85,0.93,0.77,44
2,co,0.82,0.91,0.77,44
"""

ABLATION_CSV = """pipeline,seed,map,rank1
theory,0,0.71,0.84
theory,1,0.73,0.85
act,0,0.80,0.91
act,1,0.82,0.92
ct,0,0.75,0.87
ct,1,0.76,0.88
"""


@pytest.fixture
def csv_files(tmp_path):
    rounds = tmp_path / "round_records.csv"
    rounds.write_text(ROUND_CSV)
    act = tmp_path / "act_records.csv"
    act.write_text(ACT_CSV)
    ablation = tmp_path / "ablation.csv"
    ablation.write_text(ABLATION_CSV)
    return {"rounds": rounds, "act": act, "ablation": ablation}


KIND_TO_INPUT = {
    "fscore_curve": "rounds",
    "outlier_curve": "rounds",
    "model_gap": "act",
    "ablation_bars": "ablation",
}


@pytest.mark.parametrize("kind", FIGURE_KINDS)
def test_every_kind_renders(csv_files, tmp_path, kind):
    out = tmp_path / f"{kind}.png"
    result = render(PlotSpec(kind, csv_files[KIND_TO_INPUT[kind]], out))
    assert result.exists()
    assert out.stat().st_size > 0


@pytest.mark.parametrize("kind", FIGURE_KINDS)
def test_byte_identical_reruns(csv_files, tmp_path, kind):
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    render(PlotSpec(kind, csv_files[KIND_TO_INPUT[kind]], a))
    render(PlotSpec(kind, csv_files[KIND_TO_INPUT[kind]], b))
    assert a.read_bytes() == b.read_bytes()


def test_curves_accept_coteach_records(csv_files, tmp_path):
    out = tmp_path / "f.png"
    render(PlotSpec("fscore_curve", csv_files["act"], out))
    assert out.exists()


def test_missing_column_named(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("round,map\n0,0.5\n")
    with pytest.raises(SchemaError, match="f_score"):
        render(PlotSpec("fscore_curve", bad, tmp_path / "x.png"))
    assert not (tmp_path / "x.png").exists()


def test_empty_body_rejected_no_file(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("round,f_score,n_outliers,n_clusters,map,rank1\n")
    with pytest.raises(SchemaError, match="no data rows"):
        render(PlotSpec("fscore_curve", empty, tmp_path / "y.png"))
    assert not (tmp_path / "y.png").exists()


def test_missing_input_rejected(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        render(PlotSpec("fscore_curve", tmp_path / "nope.csv", tmp_path / "z.png"))


def test_unknown_kind_rejected(csv_files, tmp_path):
    with pytest.raises(SchemaError, match="unknown figure kind"):
        render(PlotSpec("pie", csv_files["rounds"], tmp_path / "p.png"))


class TestCli:
    def test_success_exit_zero(self, csv_files, tmp_path, capsys):
        out = tmp_path / "fig.png"
        assert main(["model_gap", str(csv_files["act"]), str(out)]) == 0
        assert out.exists()
        assert str(out) in capsys.readouterr().out

    def test_schema_error_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("round\n0\n")
        code = main(["outlier_curve", str(bad), str(tmp_path / "o.png")])
        assert code == 2
        assert "n_outliers" in capsys.readouterr().err

    def test_bad_kind_exit_two(self, csv_files, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["volcano", str(csv_files["rounds"]), str(tmp_path / "v.png")])
        assert exc.value.code == 2
