import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vdblur.data import VideoClip, make_synthetic_dataset
from vdblur.errors import DatasetError
from vdblur.evaluation import (
    INPUT_LABEL,
    PSNR_CAP,
    REFERENCE_INPUT_PER_VIDEO,
    REFERENCE_PSNR,
    EvalReport,
    IdentityModel,
    MethodScores,
    StudyResult,
    ablation_study,
    evaluate,
    psnr,
    window_study,
)
from vdblur.training import init_weights, make_generator, toy_config

frames8 = arrays(np.uint8, (5, 6, 3))


def test_psnr_mse_one():
    a = np.zeros((4, 4, 3), np.uint8)
    b = np.ones((4, 4, 3), np.uint8)
    assert psnr(a, b) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_identical_capped():
    a = np.full((3, 3), 9, np.uint8)
    assert psnr(a, a) == PSNR_CAP


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), max_val=0)


@given(frames8, frames8)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


@settings(max_examples=30)
@given(frames8, frames8, st.integers(0, 2**31))
def test_psnr_permutation_invariant(a, b, seed):
    perm = np.random.default_rng(seed).permutation(a.size)
    pa, pb = a.ravel()[perm], b.ravel()[perm]
    assert psnr(pa, pb) == pytest.approx(psnr(a, b), abs=1e-9)


def test_reference_constants_consistent():
    assert np.mean(REFERENCE_INPUT_PER_VIDEO) == pytest.approx(REFERENCE_PSNR["INPUT"], abs=0.01)


@pytest.fixture(scope="module")
def pairs():
    return make_synthetic_dataset(None, n_clips=3, n_frames=6, size=(16, 16), seed=3)


def test_identity_equals_input_row(pairs):
    rep = evaluate(IdentityModel(5), pairs, method="identity")
    assert rep.row("identity").per_video == rep.row(INPUT_LABEL).per_video
    inp = rep.row(INPUT_LABEL).average
    assert math.isfinite(inp) and inp < PSNR_CAP


def test_average_is_mean_of_rows(pairs):
    g = init_weights(make_generator(toy_config(channels=8, stem_channels=4, head_channels=16)), 0)
    rep = evaluate(g, pairs, method="net")
    for r in rep.rows:
        assert abs(r.average - np.mean([v for _, v in r.per_video])) < 1e-9
    assert rep.videos == ["clip000", "clip001", "clip002"]


def test_csv_deterministic(pairs):
    g = init_weights(make_generator(toy_config(channels=8, stem_channels=4, head_channels=16)), 0)
    assert evaluate(g, pairs).to_csv() == evaluate(g, pairs).to_csv()


def test_unpaired_rejected(pairs):
    with pytest.raises(DatasetError, match="deblur"):
        evaluate(IdentityModel(), [(pairs[0][0], None)])
    with pytest.raises(DatasetError):
        evaluate(IdentityModel(), [])


def test_stereo_group_columns():
    rows = [MethodScores("m", [("s/left", 30.0), ("s/right", 32.0), ("t/left", 34.0)], ["left", "right", "left"])]
    rep = EvalReport(rows)
    assert rep.group_labels == ["left", "right"]
    header = rep.to_csv().splitlines()[0].split(",")
    assert header[-3:] == ["psnr_left", "psnr_right", "average"]
    assert rows[0].group_average("left") == 32.0
    assert "PSNR-LEFT" in rep.to_text()


def test_report_files(tmp_path, pairs):
    rep = evaluate(IdentityModel(), pairs, method="id", dump_dir=tmp_path / "frames")
    rep.write(tmp_path / "reports")
    assert (tmp_path / "reports" / "report.csv").read_text() == rep.to_csv()
    assert len(list((tmp_path / "frames" / "clip000").glob("*.png"))) == 6


def test_text_table_columns(pairs):
    text = evaluate(IdentityModel(), pairs, method="id").to_text()
    lines = text.splitlines()
    assert lines[0].split()[0] == "Methods"
    assert len({len(l) for l in lines}) == 1


def test_ablation_single_variant(pairs):
    cfg = toy_config(channels=4, stem_channels=2, head_channels=8, num_blocks=1, patch_size=16, max_steps=2,
                     batch_size=2, eval_every=0)
    res = ablation_study(cfg, pairs[:2], pairs[2:], variants=("single2d",))
    assert list(res.reports) == ["single2d"]
    assert len(res.reports["single2d"][0].rows) == 2
    assert res.ranking() == ["single2d"]
    assert "DBLRNet (single)" in res.to_text()


def test_window_study_single_entry(pairs):
    cfg = toy_config(channels=4, stem_channels=2, head_channels=8, num_blocks=1, patch_size=16, max_steps=2,
                     batch_size=2, eval_every=0)
    res = window_study(cfg, pairs[:2], pairs[2:], T_list=[5])
    assert list(res.reports) == [5]
    assert math.isfinite(res.mean_psnr(5))
    assert res.to_csv().splitlines()[1].startswith("5,T=5")
