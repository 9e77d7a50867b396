"""Shared fixtures: a scaled-down pipeline configuration and a fitted Stage 1."""
from dataclasses import replace

import pytest

from radhop.config import PipelineConfig
from radhop.phantom import PhantomConfig, generate_dataset
from radhop.pipeline import fit_stage1, preprocess


def small_config(seed=0, **stage2):
    """Same pipeline, fewer channels and rounds; runs in seconds."""
    cfg = PipelineConfig()
    return replace(
        cfg,
        seed=seed,
        n_cases=12,
        split=(0.5, 0.25, 0.25),
        phantom=replace(PhantomConfig(), dims=(4, 56, 56), lesions_mean=2.0,
                        band_length=(40.0, 48.0), band_radius=(10.0, 14.0)),
        radiomics=replace(cfg.radiomics, max_channels=4, min_features=60, windows_per_case=24,
                          k=60, lnt_subset=30),
        stage1=replace(cfg.stage1, n_estimators=15, n_pos=60, n_neg=180),
        stage2=replace(cfg.stage2, epochs=2, batch_size=16, augmentations_per_roi=1,
                       conv_channels=(4, 4, 4, 4, 4), fc_units=(8, 4), **stage2),
    )


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_data(small_cfg):
    ds = generate_dataset(small_cfg.phantom, small_cfg.n_cases, small_cfg.split, 7)
    return {k: preprocess(v, small_cfg) for k, v in ds.items()}


@pytest.fixture(scope="session")
def small_stage1(small_cfg, small_data, tmp_path_factory):
    return fit_stage1(small_data["train"], small_cfg, tmp_path_factory.mktemp("s1"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
