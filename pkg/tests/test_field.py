import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from renderctl.exceptions import ConfigurationError, DegenerateNormalError, DomainError
from renderctl.field import (BOUND_RADIUS, CodeTable, EncodingSpec, GeometryField, LatentCodes,
                             SceneModel, clamp_to_bounds, eval_albedo, eval_normal, eval_sdf,
                             eval_shadow, eval_sky, positional_encode)

coords = st.floats(-1.0, 1.0, allow_nan=False)


def test_positional_encoding_zero_input():
    e = positional_encode(torch.zeros(1, 3), 2)[0]
    assert e.shape == (15,)
    assert torch.all(e[:3] == 0)
    sines = torch.cat([e[3:6], e[9:12]])
    cosines = torch.cat([e[6:9], e[12:15]])
    assert torch.all(sines == 0) and torch.all(cosines == 1)


def test_positional_encoding_identity_and_first_sine():
    x = torch.tensor([[0.3, -0.2, 0.7]])
    assert torch.equal(positional_encode(x, 0), x)
    e = positional_encode(torch.tensor([[0.5, 0.0, 0.0]]), 1)[0]
    assert float(e[3]) == pytest.approx(1.0)


@given(coords, coords, coords, st.integers(0, 6))
def test_positional_encoding_dimension_and_range(x, y, z, L):
    e = positional_encode(torch.tensor([[x, y, z]], dtype=torch.float64), L)
    assert e.shape[-1] == EncodingSpec(L).dim(L)
    assert torch.all(e[..., 3:].abs() <= 1.0)


def test_untrained_geometry_is_init_sphere():
    g = GeometryField(hidden=16, depth=2).double()
    x = torch.tensor([[0.5, 0, 0], [0, 0, 0.2], [1.0, 1.0, 0]], dtype=torch.float64)
    assert torch.allclose(g(x)[0], x.norm(dim=-1) - 0.5, atol=1e-6)


def test_normals_match_finite_differences(toy_model):
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.uniform(-0.8, 0.8, (20, 3)))
    n = eval_normal(toy_model, x)
    h = 1e-6
    fd = torch.zeros_like(x)
    with torch.no_grad():
        for k in range(3):
            e = torch.zeros(3, dtype=torch.float64)
            e[k] = h
            fd[:, k] = (toy_model.geometry(x + e)[0] - toy_model.geometry(x - e)[0]) / (2 * h)
    fd = fd / fd.norm(dim=-1, keepdim=True)
    assert torch.allclose(n, fd, atol=1e-4)
    assert torch.allclose(n.norm(dim=-1), torch.ones(20, dtype=torch.float64))


def test_degenerate_normal_raises():
    with pytest.raises(DegenerateNormalError):
        eval_normal(lambda x: torch.zeros(x.shape[:-1], dtype=x.dtype) * x.sum(-1),
                    torch.zeros(1, 3, dtype=torch.float64))


def test_out_of_bounds_query_raises(toy_model):
    with pytest.raises(DomainError):
        eval_sdf(toy_model, torch.tensor([[2.0, 0, 0]], dtype=torch.float64))
    assert eval_sdf(toy_model, torch.tensor([[BOUND_RADIUS, 0, 0]], dtype=torch.float64)).shape == (1,)


@given(coords, coords, coords)
def test_clamp_to_bounds(x, y, z):
    p = torch.tensor([[x, y, z]], dtype=torch.float64) * 4
    q = clamp_to_bounds(p)
    assert float(q.norm()) <= BOUND_RADIUS + 1e-9
    if float(p.norm()) <= BOUND_RADIUS:
        assert torch.equal(p, q)


def test_field_output_ranges(toy_model):
    x = torch.rand(50, 3, dtype=torch.float64) - 0.5
    a = eval_albedo(toy_model, x)
    assert torch.all((a >= 0) & (a <= 1))
    s = eval_shadow(toy_model, x, torch.randn(8, dtype=torch.float64) * 5)
    assert torch.all((s > 0) & (s < 1))
    v = torch.nn.functional.normalize(torch.randn(50, 3, dtype=torch.float64), dim=-1)
    assert torch.all(eval_sky(toy_model, v, torch.randn(16, dtype=torch.float64)) >= 0)
    with pytest.raises(DomainError):
        eval_sky(toy_model, 2 * v, torch.zeros(16, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        eval_shadow(toy_model, x, torch.zeros(5, dtype=torch.float64))


def test_sharpness_init_and_positive():
    m = SceneModel(["a"])
    assert float(m.sharpness.detach()) == pytest.approx(1 / 0.3)
    with torch.no_grad():
        m.log_sharpness.fill_(-5.0)
    assert float(m.sharpness.detach()) > 0


def test_code_table_one_triple_per_frame():
    t = CodeTable(["x", "y", "z"])
    c = t.codes(["z", "x"])
    assert len(c) == 2 and torch.equal(c.environment[0], t.environment[2])
    with pytest.raises(ConfigurationError):
        t.rows(["missing"])
    with pytest.raises(ConfigurationError):
        CodeTable(["a", "a"])


def test_latent_codes_round_trip():
    c = LatentCodes(torch.randn(2, 16), torch.randn(2, 8), torch.randn(2, 8))
    d = LatentCodes.from_dict(c.to_dict())
    assert torch.allclose(c.tone, d.tone) and len(c.select(1)) == 1


def test_scene_model_config_round_trip():
    m = SceneModel(["a", "b"], geometry_hidden=32, geometry_depth=2, use_tone=False)
    m2 = SceneModel.from_config(m.config())
    m2.load_state_dict(m.state_dict())
    assert m2.config() == m.config()
