import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thama import models
from thama.errors import ConfigError, CorruptCheckpointError, SpecMismatchError
from thama.models import ModelSpec, analytic_param_count, build_model, param_count, predict_batch


@pytest.mark.parametrize(
    "spec, expected",
    [
        (ModelSpec("fcn", 512), 73_985),
        (ModelSpec("cnn", 768), 3_277_697),
        (ModelSpec("concat", 64, 64), 779_777),
        (ModelSpec("thama", 64, 64, d_f=96), 1_545_729),
        (ModelSpec("thama", 1280, 1280, d_f=96), 9_016_833),
    ],
)
def test_param_counts(spec, expected):
    assert analytic_param_count(spec) == expected
    layout = models.param_layout(spec)
    assert sum(int(np.prod(i.shape)) for i in layout.values()) == expected


def test_param_count_of_built_model():
    spec = ModelSpec("thama", 16, 24, d_f=5, core="factored", ranks=(2, 3, 4))
    assert param_count(build_model(spec)) == analytic_param_count(spec)


def test_flat_dims():
    assert models.flat_dim(768) == 24_576
    assert models.flat_dim(1280) == 40_960
    assert models.flat_dim(63) == 256 * 7


@given(st.integers(8, 400))
def test_flat_dim_formula(d):
    assert models.flat_dim(d) == 256 * (((d // 2) // 2) // 2)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("rnn", 8)
    with pytest.raises(ConfigError):
        ModelSpec("thama", 64)
    with pytest.raises(ConfigError):
        ModelSpec("cnn", 64, 64)
    with pytest.raises(ConfigError):
        ModelSpec("cnn", 7)
    with pytest.raises(ConfigError):
        ModelSpec("thama", 64, 64, d_f=4, core="factored", ranks=(2, 5, 2))
    assert ModelSpec.from_dict(ModelSpec("thama", 8, 16).to_dict()) == ModelSpec("thama", 8, 16)


def test_init_deterministic_and_seed_sensitive():
    a = build_model(ModelSpec("concat", 16, 16, seed=3))
    b = build_model(ModelSpec("concat", 16, 16, seed=3))
    c = build_model(ModelSpec("concat", 16, 16, seed=4))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if "bias" not in k)
    assert all(not a.params[k].any() for k in a.params if k.endswith("bias"))


def test_predict_batch_permutation_and_singletons(rng):
    model = build_model(ModelSpec("thama", 16, 16, d_f=6))
    x1, x2 = rng.standard_normal((10, 16)) * 0.3, rng.standard_normal((10, 16)) * 0.3
    full = predict_batch(model, [x1, x2], batch_size=4)
    perm = rng.permutation(10)
    np.testing.assert_allclose(predict_batch(model, [x1[perm], x2[perm]]), full[perm], rtol=1e-5, atol=1e-7)
    ones = np.array([predict_batch(model, [x1[i : i + 1], x2[i : i + 1]])[0] for i in range(10)])
    np.testing.assert_allclose(ones, full, rtol=1e-5, atol=1e-7)
    assert ((full >= 0) & (full <= 1)).all()


def test_zero_output_layer_gives_half(rng):
    model = build_model(ModelSpec("cnn", 32))
    model.params["out.weight"][:] = 0
    np.testing.assert_array_equal(predict_batch(model, [rng.standard_normal((5, 32))]), 0.5)


def test_factored_matches_reconstructed_full(rng):
    spec = ModelSpec("thama", 16, 16, d_f=5, core="factored", ranks=(2, 3, 4), seed=2)
    fac = build_model(spec, dtype=np.float64)
    from thama.fusion import TuckerCoreFactored, reconstruct_core

    T = reconstruct_core(TuckerCoreFactored(*(fac.params[f"core.{m}"] for m in "GABC"))).T
    params = {k: v for k, v in fac.params.items() if not k.startswith("core.")}
    params["core.T"] = T
    full = build_model(ModelSpec("thama", 16, 16, d_f=5, seed=2), dtype=np.float64, params=params)
    x = [rng.standard_normal((6, 16)), rng.standard_normal((6, 16))]
    np.testing.assert_allclose(predict_batch(fac, x), predict_batch(full, x), rtol=1e-10)


def test_checkpoint_roundtrip(tmp_path):
    spec = ModelSpec("thama", 16, 16, d_f=4)
    model = build_model(spec)
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(model, path, meta={"note": "x"})
    ck = models.read_checkpoint(path, expected=spec)
    assert ck.spec == spec and ck.meta == {"note": "x"}
    for k, v in model.params.items():
        assert ck.params[k].tobytes() == v.tobytes()
    models.save_checkpoint(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    assert models.read_checkpoint(path, expected="thama").spec == spec


def test_checkpoint_errors(tmp_path):
    spec = ModelSpec("cnn", 16)
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(build_model(spec), path)
    raw = path.read_bytes()
    with pytest.raises(SpecMismatchError):
        models.read_checkpoint(path, expected=ModelSpec("cnn", 24))
    with pytest.raises(SpecMismatchError):
        models.read_checkpoint(path, expected="fcn")
    for broken in (b"CKPX" + raw[4:], raw[:-3], raw[:30], raw[:4] + b"\x02" + raw[5:]):
        path.write_bytes(broken)
        with pytest.raises(CorruptCheckpointError):
            models.read_checkpoint(path)
