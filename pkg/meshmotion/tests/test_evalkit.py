import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from meshmotion.config import InvalidArgument, RunConfig
from meshmotion.evalkit import AblationRow, EvalReport, LATENT_REFERENCE, \
    LOSS_REFERENCE, LPIPS_NOTE, PSNR_CAP, ablation_harness, case_means, \
    directional_fraction, directional_verdicts, evaluate_run, \
    expected_winner, latent_size_grid, loss_ablation_grid, psnr, ssim, \
    static_trajectories, write_report, write_training_report
from meshmotion.geomcore import chamfer_distance
from meshmotion.tests.conftest import desk_config, tiny_config
from meshmotion.toydata import build_dataset, load_dataset
from meshmotion.utils import read_kv_records

pixel = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
image_strategy = arrays(np.float64, (12, 12, 3), elements=pixel)


def test_psnr_examples():
    image = np.full((4, 4, 3), 0.5)
    assert psnr(image, image) == PSNR_CAP

    a = np.zeros((8, 8))
    b = np.full((8, 8), 10.0)
    assert psnr(a, b, max_value=255) == pytest.approx(28.1308, abs=1e-4)

    with pytest.raises(InvalidArgument):
        psnr(a, b[:4])
    with pytest.raises(InvalidArgument):
        psnr(a, b, max_value=0)


@given(seed=st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_psnr_matches_formula_and_falls_with_noise(seed):
    rng = np.random.default_rng(seed)
    clean = rng.random((8, 8, 3))
    noise = rng.normal(size=clean.shape)
    small, large = clean + 0.01 * noise, clean + 0.1 * noise
    mse = float(np.mean((small - clean) ** 2))
    assert psnr(small, clean) == pytest.approx(-10 * math.log10(mse))
    assert psnr(large, clean) < psnr(small, clean)


@given(a=image_strategy, b=image_strategy)
@settings(max_examples=50, deadline=None)
def test_ssim_is_bounded(a, b):
    score = ssim(a, b)
    assert -1.0 - 1e-9 <= score <= 1.0 + 1e-9
    assert ssim(a, a) == pytest.approx(1.0)


def test_self_evaluation_is_perfect(tiny_dataset):
    dataset = load_dataset(tiny_dataset)
    trajectories = {a.asset_id: a.vertex_frames for a in dataset}
    report = evaluate_run(trajectories, dataset)
    aggregate = report.aggregate()
    assert aggregate['psnr'] == PSNR_CAP
    assert aggregate['ssim'] == pytest.approx(1.0)
    assert aggregate['chamfer'] == 0.0
    assert report.notes == [LPIPS_NOTE]


def test_static_baseline_scores(tiny_dataset):
    dataset = load_dataset(tiny_dataset)
    report = evaluate_run(static_trajectories(dataset), tiny_dataset)
    for asset, score in zip(dataset, report.assets):
        assert score.asset_id == asset.asset_id
        assert score.frames[0].chamfer == 0.0
        assert score.frames[0].psnr == PSNR_CAP
        for frame in score.frames:
            expected = chamfer_distance(asset.vertex_frames[0],
                                        asset.vertex_frames[frame.t])
            assert frame.chamfer == pytest.approx(expected, abs=1e-12)
    aggregate = report.aggregate()
    assert aggregate['chamfer'] == pytest.approx(
        np.mean([a.chamfer for a in report.assets]))
    assert aggregate['chamfer'] > 0


def test_evaluate_run_rejects_mismatched_ids(tiny_dataset):
    dataset = load_dataset(tiny_dataset)
    trajectories = static_trajectories(dataset)
    first = sorted(trajectories)[0]
    extra = {**trajectories, 'asset_999': trajectories[first]}
    with pytest.raises(InvalidArgument):
        evaluate_run(extra, dataset)
    missing = {k: v for k, v in trajectories.items() if k != first}
    with pytest.raises(InvalidArgument):
        evaluate_run(missing, dataset)
    wrong = {**trajectories, first: trajectories[first][:, :-1]}
    with pytest.raises(InvalidArgument):
        evaluate_run(wrong, dataset)


def test_loss_ablation_grid():
    grid = dict(loss_ablation_grid(RunConfig()))
    assert list(grid) == list(LOSS_REFERENCE)
    assert grid['mse'].vae.dis_weight == 0.0
    assert grid['mse'].vae.mse_weight == 1.0
    assert grid['dis'].vae.mse_weight == 0.0
    assert grid['dis'].vae.dis_weight == 0.1
    assert grid['mse+dis'].vae.dis_weight == 0.1
    assert grid['mse+dis'].vae.mse_weight == 1.0


def test_latent_size_grid():
    grid = latent_size_grid(RunConfig())
    assert [name for name, _ in grid] == list(LATENT_REFERENCE)
    for name, config in grid:
        width, c0 = name[1:].split('_c0_')
        assert config.vae.width == int(width)
        assert config.vae.latent_channels == int(c0)
        assert config.diffusion.latent_channels == int(c0)
        config.validate()


def test_case_means_keep_case_order():
    rows = [AblationRow('dis', 0, 20.0, 0.02),
            AblationRow('mse', 0, 18.0, 0.03),
            AblationRow('dis', 1, 22.0, 0.04)]
    means = case_means(rows)
    assert list(means) == ['dis', 'mse']
    assert means['dis']['psnr'] == 21.0
    assert means['dis']['chamfer'] == pytest.approx(0.03)


def test_write_report(tiny_dataset):
    dataset = load_dataset(tiny_dataset)
    report = evaluate_run(static_trajectories(dataset), dataset,
                          RunConfig())
    report.ablation.append(AblationRow('mse', 0, 20.0, 0.02, 23.131, 0.030))
    with tempfile.TemporaryDirectory() as tmpdirname:
        written = write_report(report, tmpdirname)
        assert set(written) == {'records', 'frames', 'table', 'html'}
        records = read_kv_records(written['records'])
        assert records[-1]['asset'] == 'aggregate'
        assert float(records[-1]['psnr']) == report.aggregate()['psnr']
        frames = read_kv_records(written['frames'])
        assert len(frames) == sum(len(a.frames) for a in report.assets)
        table = Path(written['table']).read_text()
        for asset in report.assets:
            assert asset.asset_id in table
        assert LPIPS_NOTE in table
        assert 'bokeh' in Path(written['html']).read_text()


def test_write_report_without_scores():
    with tempfile.TemporaryDirectory() as tmpdirname:
        written = write_report(EvalReport(), tmpdirname, html=False)
        assert written['table'] is None
        assert 'frames' not in written
        assert read_kv_records(written['records']) == []
def test_expected_winner():
    assert expected_winner(['mse', 'dis', 'mse+dis']) == 'mse+dis'
    assert expected_winner(['mse', 'dis']) == 'dis'
    assert expected_winner(['c128_c0_8', 'c512_c0_16']) == 'c512_c0_16'
    assert expected_winner(['mse']) is None
    assert expected_winner(['mine', 'yours']) is None


def test_directional_verdicts_per_seed():
    rows = [AblationRow('mse', 0, 20.0, 0.05),
            AblationRow('dis', 0, 20.0, 0.04),
            AblationRow('mse+dis', 0, 21.0, 0.03),
            AblationRow('mse', 1, 20.0, 0.02),
            AblationRow('dis', 1, 20.0, 0.04),
            AblationRow('mse+dis', 1, 21.0, 0.03),
            AblationRow('mse', 2, 20.0, 0.03),
            AblationRow('mse+dis', 2, 21.0, 0.03)]
    assert directional_verdicts(rows) == {0: True, 1: False, 2: True}
    assert directional_fraction(rows) == pytest.approx(2 / 3)


def test_directional_verdicts_without_winner():
    rows = [AblationRow('mse', 0, 20.0, 0.05),
            AblationRow('dis', 1, 20.0, 0.04),
            AblationRow('mse+dis', 1, 20.0, 0.03)]
    assert directional_verdicts(rows) == {0: None, 1: True}
    unnamed = [AblationRow('a', 0, 1.0, 0.1), AblationRow('b', 0, 1.0, 0.2)]
    assert directional_verdicts(unnamed) == {0: None}
    assert math.isnan(directional_fraction(unnamed))


def test_write_report_shows_directional_column():
    report = EvalReport(ablation=[
        AblationRow('mse', 0, 20.0, 0.05, 23.131, 0.030, False),
        AblationRow('mse+dis', 0, 21.0, 0.06, 24.046, 0.019, False)])
    with tempfile.TemporaryDirectory() as tmpdirname:
        written = write_report(report, tmpdirname)
        records = read_kv_records(written['records'])
        table = Path(written['table']).read_text()
        page = Path(written['html']).read_text()
    assert [r['directional_holds'] for r in records] == ['False', 'False']
    assert 'winner' in table
    assert 'winner holds' in page


def test_write_training_report():
    config = tiny_config()
    history = [{'kind': 'eval', 'step': 0, 'val_chamfer': 0.4,
                'identity_chamfer': 0.5},
               {'kind': 'train', 'step': 1, 'total': 2.0,
                'deformation': 1.5, 'lr': 1e-3},
               {'kind': 'eval', 'step': 1, 'val_chamfer': 0.3,
                'identity_chamfer': 0.5}]
    with tempfile.TemporaryDirectory() as tmpdirname:
        fpath = write_training_report(history, tmpdirname, 'vae', config)
        assert fpath.name == 'vae_training.html'
        text = fpath.read_text()
        assert write_training_report([], tmpdirname, 'diffusion') is None
    assert 'meshmotion vae report' in text
    assert '1 optimizer steps' in text
    assert 'identity_chamfer' in text
    assert text.count('Bokeh.') >= 2


@pytest.mark.slow
def test_loss_ablation_direction_holds_at_desk_scale():
    root = Path(tempfile.mkdtemp())
    config = desk_config(root)
    build_dataset(config, out_dir=config.data.dataset_dir)
    report = ablation_harness(loss_ablation_grid(config), seeds=(0, 1, 2),
                              output_dir=root / 'ablation')
    assert len(report.ablation) == 9
    verdicts = {r.seed: r.directional_holds for r in report.ablation}
    assert set(verdicts.values()) <= {True, False}
    assert directional_fraction(report.ablation) >= 2 / 3


