import io

import numpy as np
import pytest

from methmark.data import load_clinical, load_methylation


def methylation_from_text(text: str, cohort: str = "healthy"):
    return load_methylation(io.StringIO(text), cohort)


def clinical_from_text(text: str):
    return load_clinical(io.StringIO(text))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def small_methylation():
    # 3 genes, 2 samples, fully observed
    text = (
        "probe_id,gene,s1,s2\n"
        "p1,g1,0.5,0.6\n"
        "p2,g1,0.2,0.1\n"
        "p3,g2,0.9,0.8\n"
        "p4,g3,0.4,0.4\n"
    )
    return methylation_from_text(text)
