"""Session fixtures shared by the unit suites and the acceptance gate.

The expensive artifacts (the overfit run, and the per-seed two-branch
fine-tuning comparisons) are trained once per session and reused by every
criterion that needs them.
"""

import numpy as np
import pytest

from brainsurf.connectome import GeneratorConfig, generate_cohort, split_runs
from brainsurf.icosphere import build_hierarchy
from brainsurf.model import ModelConfig, build_model, predict_ensemble
from brainsurf.rcloss import init_margins
from brainsurf.training import (
    OptimizerConfig,
    TrainSubject,
    margin_init_set,
    train_phase,
)

DEFAULT_SEED = 1234
ABLATION_SEEDS = (11, 22, 33)


def to_train_subjects(records):
    return [
        TrainSubject(r.subject_id, [s.features for s in split_runs(r)], r.target_contrasts)
        for r in records
    ]


@pytest.fixture(scope="session")
def hierarchy2():
    return build_hierarchy(2)


@pytest.fixture(scope="session")
def default_cohort():
    """The canonical desk-scale dataset: 8 training + 4 held-out subjects."""
    cfg = GeneratorConfig()
    records = generate_cohort(12, cfg, seed=DEFAULT_SEED)
    return cfg, records[:8], records[8:]


@pytest.fixture(scope="session")
def overfit_run(default_cohort, hierarchy2):
    """500 epochs of reconstruction-only training on the default cohort."""
    _, train_records, _ = default_cohort
    subjects = to_train_subjects(train_records)
    model = build_model(ModelConfig(seed=DEFAULT_SEED), hierarchy2)
    rng = np.random.default_rng([DEFAULT_SEED, 1])
    log = train_phase(
        model, subjects, epochs=500, batch_size=2, rng=rng,
        opt=OptimizerConfig(), use_rc_loss=False,
    )
    return model, subjects, log


ABLATION_TRAIN = 12
ABLATION_TEST = 6
# Fine-tuning branches run at a small step size so the continued-plain-
# reconstruction comparator sits on its convergence plateau, the regime the
# two-branch comparison assumes; both branches share it, so the comparison
# stays matched.
ABLATION_PHASE2_OPT = OptimizerConfig(lr=1e-5)


@pytest.fixture(scope="session")
def ablation_runs(hierarchy2):
    """Per-seed matched comparisons: shared warmup, then scheduled
    reconstructive-contrastive fine-tuning vs continued plain reconstruction,
    plus the single-sample training variant, all evaluated on held-out
    subjects via ensemble prediction."""
    results = {}
    gen = GeneratorConfig()
    opt = OptimizerConfig()
    for seed in ABLATION_SEEDS:
        records = generate_cohort(ABLATION_TRAIN + ABLATION_TEST, gen, seed=seed)
        subjects = to_train_subjects(records)
        train, test = subjects[:ABLATION_TRAIN], subjects[ABLATION_TRAIN:]

        model = build_model(ModelConfig(seed=seed), hierarchy2)
        rng1 = np.random.default_rng([seed, 1])
        train_phase(model, train, epochs=100, batch_size=2, rng=rng1, opt=opt, use_rc_loss=False)
        warm = {k: v.copy() for k, v in model.param_arrays().items()}
        margins0 = init_margins(model, margin_init_set(train))

        ensemble_preds = np.stack([predict_ensemble(model, s.samples) for s in test])

        rng_rc = np.random.default_rng([seed, 2])
        train_phase(
            model, train, epochs=100, batch_size=2, rng=rng_rc, opt=ABLATION_PHASE2_OPT,
            use_rc_loss=True, margins0=margins0, start_epoch=100,
        )
        rc_preds = np.stack([predict_ensemble(model, s.samples) for s in test])

        model.load_param_arrays(warm)
        rng_l2 = np.random.default_rng([seed, 2])
        train_phase(
            model, train, epochs=100, batch_size=2, rng=rng_l2, opt=ABLATION_PHASE2_OPT,
            use_rc_loss=False, start_epoch=100,
        )
        l2_preds = np.stack([predict_ensemble(model, s.samples) for s in test])

        single = build_model(ModelConfig(seed=seed), hierarchy2)
        rng_s = np.random.default_rng([seed, 1])
        train_phase(
            single, train, epochs=100, batch_size=2, rng=rng_s, opt=opt,
            use_rc_loss=False, ensemble_sampling=False,
        )
        single_preds = np.stack([single.predict(s.samples[0]) for s in test])

        results[seed] = {
            "targets": np.stack([s.target for s in test]),
            "retest": np.stack([r.retest_contrasts for r in records[ABLATION_TRAIN:]]),
            "ensemble": ensemble_preds,
            "rc": rc_preds,
            "l2": l2_preds,
            "single": single_preds,
            "margins0": margins0,
        }
    return results
