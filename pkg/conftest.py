#!/usr/bin/env python3
"""
Shared pytest fixtures: small correlated blocks and fast chain settings
"""

import logging

import numpy as np
import pytest

from chain_state import ChainConfig
from gaussian_model import MaskedBlock, PriorSpec
from mice_fcs import FcsConfig

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')


def correlated_block(rng, n=40, p=5, rho=0.6, missing_rate=0.25):
    """Equicorrelated Gaussian block with intercept + one covariate and MCAR holes"""
    Sigma = (1 - rho) * np.eye(p) + rho * np.ones((p, p))
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    B = np.vstack([np.zeros(p), np.linspace(0.2, 0.8, p)])
    Y = X @ B + rng.standard_normal((n, p)) @ np.linalg.cholesky(Sigma).T
    R = rng.random((n, p)) >= missing_rate
    R[:2] = True
    return MaskedBlock(Y, R, X), Y


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def block_and_truth():
    return correlated_block(np.random.default_rng(7))


@pytest.fixture
def block(block_and_truth):
    return block_and_truth[0]


@pytest.fixture
def prior(block):
    return PriorSpec.default(block.p, block.k)


@pytest.fixture
def fast_cfg():
    return ChainConfig(M=4, T_burn=2, inner=1, eb_fit_iters=3, screen_size=0,
                       exact_refresh_max_p=2, calibrate=False, seed=11)


@pytest.fixture
def fast_fcs():
    return FcsConfig(M=3, iters=2, max_screen=2, seed=5)
