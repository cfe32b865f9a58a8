"""Shared fixtures for the heavy panel runs used by the acceptance suite."""

import copy
import warnings

import numpy as np
import pytest

from reidapt.data import SynthSpec, generate_synthetic
from reidapt.evaluate import retrieval_eval
from reidapt.trainer import TrainConfig, adapt, extract_features, pretrain_source

# The standard synthetic fixture: 64 identities x 20 samples at d_in=32 with
# mid-level intra noise, camera structure, and a strong domain shift.
PANEL_SEEDS = tuple(range(11, 21))
STANDARD_DATA = dict(num_identities=64, samples_per_identity=20, num_cameras=4,
                     d_in=32, identity_spread=1.0, intra_noise=0.6,
                     camera_shift_scale=0.6, domain_shift=12.0)

# Adaptation experiment config: one decade above the reference lr scale so the
# encoder and bank move measurably within the 15-epoch desk-scale run.
ADAPT_SETTINGS = dict(pretrain_epochs=30, epochs=15, adapt_decay_epochs=(10, 13),
                      eps_percentile=0.7, min_pts=6, fine_clusters=5,
                      base_lr=5e-3)

# Label-refinement experiment config: the contaminated-cluster regime where
# density chaining produces the noise the prototype vote repairs.
REFINE_SETTINGS = dict(pretrain_epochs=30, eps_percentile=1.1, min_pts=12,
                       fine_clusters=5)


def standard_fixture(seed):
    return generate_synthetic(SynthSpec(seed=seed, **STANDARD_DATA))


def adapt_config(seed, **kw):
    merged = dict(ADAPT_SETTINGS, seed=seed)
    merged.update(kw)
    return TrainConfig(**merged)


def refine_config(seed, **kw):
    merged = dict(REFINE_SETTINGS, seed=seed)
    merged.update(kw)
    return TrainConfig(**merged)


def retrieval_map(state, query, gallery):
    return retrieval_eval(
        extract_features(state, query.raw), query.identity, query.camera,
        extract_features(state, gallery.raw), gallery.identity, gallery.camera,
    ).map


@pytest.fixture(scope="session")
def adaptation_panel():
    """Pretrain + three adaptation variants per panel seed.

    Returns {seed: {"direct": mAP, variant: {"map": mAP, "history": [...]}}
    for variants full (alpha=.5, mu=.1, instant bank), baseline (alpha=0,
    mu=0), and momentum (full losses, momentum bank).
    """
    panel = {}
    variants = {
        "full": {},
        "baseline": dict(alpha=0.0, mu=0.0),
        "momentum": dict(bank_mode="momentum"),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in PANEL_SEEDS:
            source, train, query, gallery = standard_fixture(seed)
            pretrained = pretrain_source(source.raw, source.identity,
                                         adapt_config(seed))
            entry = {"direct": retrieval_map(pretrained, query, gallery)}
            for name, overrides in variants.items():
                state = copy.deepcopy(pretrained)
                state, history, _ = adapt(state, train.raw,
                                          adapt_config(seed, **overrides),
                                          truth=train.identity)
                entry[name] = {"map": retrieval_map(state, query, gallery),
                               "history": history}
            panel[seed] = entry
    return panel
