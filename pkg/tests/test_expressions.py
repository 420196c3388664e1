import os

import numpy as np
import pytest
import yaml

from mfgflow.errors import ConfigError
from mfgflow.expressions import load_model, model_from_mapping, translate
from mfgflow.measure import gaussian
from mfgflow.model import phi_value
from mfgflow.solver import SolverSettings, solve_global
from mfgflow.verify import compute_cascade

CUSTOM_LQ = os.path.join(os.path.dirname(__file__), "..", "configs", "custom_lq.yaml")


@pytest.fixture(scope="module")
def custom_spec():
    with open(CUSTOM_LQ) as fh:
        return yaml.safe_load(fh)


def test_translation_is_restricted():
    assert "M[1]" in translate("m2 * x", "k", ("x",), n_features=2)
    for bad in ("__import__('os')", "x.real", "[x]", "x if x else 1", "open('f')", "m3", "z", "'s'"):
        with pytest.raises(ConfigError):
            translate(bad, "k", ("x",), n_features=2)


def test_parameters_and_alias():
    src = translate("k * alpha + phi(x)", "k", ("x", "a"), {"k": 2.0}, 1)
    ns = {"np": np, "phi_value": phi_value, "phi_slope": None, "M": None}
    assert eval(src, ns, {"x": 2.0, "a": 1.5}) == pytest.approx(3.0 + float(phi_value(np.array(2.0))))


@pytest.mark.parametrize("use_numba", [True, False])
def test_custom_lq_solves_like_builtin(lq, custom_spec, use_numba):
    builtin, cascade = lq
    custom = model_from_mapping(custom_spec)
    mu = gaussian(0.0, 1.0, 6, 2)
    s = SolverSettings(use_numba=use_numba)
    a = solve_global(builtin, cascade, mu, 0.0, 0.5, 1e-3, s)
    b = solve_global(custom, compute_cascade(custom), mu, 0.0, 0.5, 1e-3, s)
    assert np.max(np.abs(a.X - b.X)) < 1e-14
    assert np.max(np.abs(a.Z - b.Z)) < 1e-14


def test_load_from_file():
    m = load_model(CUSTOM_LQ)
    assert m.family == "custom:custom_lq" and m.separable


def test_missing_kernel_is_named(custom_spec):
    spec = dict(custom_spec)
    spec.pop("running_xa")
    with pytest.raises(ConfigError, match="running_xa"):
        model_from_mapping(spec)


def test_measure_kernels_need_one_entry_per_feature(custom_spec):
    with pytest.raises(ConfigError, match="drift_m"):
        model_from_mapping(dict(custom_spec, drift_m="0"))


def test_vector_state_is_rejected(custom_spec):
    with pytest.raises(ConfigError, match="d_x"):
        model_from_mapping(dict(custom_spec, d_x=2))


def test_bad_constants(custom_spec):
    with pytest.raises(ConfigError, match="constants"):
        model_from_mapping(dict(custom_spec, constants={"drift_control_lower": 1.0}))
