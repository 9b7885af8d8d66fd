from __future__ import annotations

import numpy as np
import pytest

from lsvo.layers import ShapeResolutionError
from lsvo.losses import TrainConfig, loss_ae, loss_em
from lsvo.models import (CheckpointError, build_lsvo, build_stvo, latent_code, load_checkpoint, read_tensors,
                         save_checkpoint, write_tensors)
from lsvo.tensor import Tensor
from lsvo.training import FlowData, train

# published per-sample output shapes
LSVO_TABLE = {
    "conv1": (47, 150, 64), "conv2": (47, 150, 64), "conv3": (12, 38, 64), "conv4": (12, 38, 64),
    "upconv1": (48, 152, 6), "crop": (47, 150, 6), "upconv2": (94, 300, 2), "maxpool": (6, 19, 64),
    "concat": (36480,), "dense1": (1000,), "dense2": (1000,), "dense3": (6,),
}
STVO_TABLE = {
    "st-conv1": (46, 149, 64), "st-maxpool1": (11, 37, 64), "st-conv2": (9, 35, 20), "st-maxpool2": (4, 17, 20),
    "concat": (27408,), "st-dense1": (1000,), "st-dense2": (6,),
}


@pytest.fixture(scope="module")
def lsvo_full():
    return build_lsvo()


@pytest.fixture(scope="module")
def small():
    return build_lsvo((16, 16, 2), seed=1, width=1 / 16)


def test_lsvo_reproduces_table(lsvo_full):
    assert {k: lsvo_full.ledger[k] for k in LSVO_TABLE} == LSVO_TABLE
    assert not lsvo_full.ledger.discrepancies()


def test_stvo_ceil_reading_has_the_documented_concat_gap():
    g = build_stvo()
    got = {k: g.ledger[k] for k in STVO_TABLE}
    diff = {k for k in STVO_TABLE if got[k] != STVO_TABLE[k]}
    assert diff == {"st-maxpool1", "concat"}
    assert got["concat"] == (30544,)
    assert got["st-maxpool1"] == (12, 38, 64)
    assert {r.name for r in g.ledger.discrepancies()} == {"st-maxpool1", "concat"}


def test_stvo_padded_reading_matches_every_row():
    g = build_stvo(variant="padded")
    assert {k: g.ledger[k] for k in STVO_TABLE} == STVO_TABLE
    assert not g.ledger.discrepancies()


def test_outputs_on_zero_flow(small):
    out = small.predict(np.zeros((3, 16, 16, 2)))
    assert out["motion"].shape == (3, 6)
    assert out["reconstruction"].shape == (3, 16, 16, 2)
    assert np.all(np.isfinite(out["motion"]))
    assert out["reconstruction"].min() >= 0 and out["reconstruction"].max() <= 1


def test_predict_rejects_raw_flow(small):
    with pytest.raises(ValueError, match="encoded"):
        small.predict(np.full((1, 16, 16, 2), 3.0))


def test_scaled_input_builds():
    g = build_lsvo((46, 148, 2), width=0.25)
    assert g.ledger["upconv2"] == (46, 148, 2)
    assert g.ledger["conv3"] == (6, 19, 16)
    with pytest.raises(ShapeResolutionError):
        build_lsvo((47, 148, 2))


def test_motion_and_reconstruction_gradient_routes(small):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (2, 16, 16, 2))
    enc = ["conv1", "conv2", "conv3", "conv4"]
    dec = ["upconv1", "upconv2"]

    small.zero_grad()
    loss_em(small(x)["motion"], rng.normal(size=(2, 6))).backward()
    for layer in enc:
        assert np.any(small.params[f"{layer}.w"].grad != 0), layer
    for layer in dec:
        assert small.params[f"{layer}.w"].grad is None, layer

    small.zero_grad()
    loss_ae(small(x)["reconstruction"], Tensor(x)).backward()
    for layer in enc + dec:
        assert np.any(small.params[f"{layer}.w"].grad != 0), layer
    assert small.params["dense3.w"].grad is None


def test_without_latent_equals_zeroed_latent_weights(small):
    x = np.random.default_rng(2).uniform(0, 1, (2, 16, 16, 2))
    stripped = small.without_latent()
    masked = small.clone()
    keep = stripped.ledger["concat"][0]
    masked.params["dense1.w"].data[keep:] = 0.0
    np.testing.assert_allclose(stripped(x)["motion"].data, masked(x)["motion"].data, atol=1e-12)


def test_latent_code_pooled_is_pool_of_full(small):
    x = np.random.default_rng(3).uniform(0, 1, (2, 16, 16, 2))
    full, pooled = latent_code(small, x)
    h, w, c = small.ledger["conv4"]
    ref = full.reshape(2, h // 2, 2, w // 2, 2, c).max(axis=(2, 4)).reshape(2, -1)
    np.testing.assert_array_equal(pooled, ref)


def test_estimator_parameters_grow_only_through_concat():
    ls, st = build_lsvo(), build_stvo()
    ls_est = ls.parameter_count("estimator")
    st_est = st.parameter_count("estimator")
    # dense2/dense3 of LS-VO have no ST-VO counterpart of equal size; the first layer dominates both
    assert ls.params["dense1.w"].shape[0] == 36480 and st.params["st-dense1.w"].shape[0] == 30544
    assert 1.0 < ls_est / st_est < 1.5


def test_seeded_build_is_deterministic():
    a, b = build_stvo((46, 148, 2), seed=4, width=0.25), build_stvo((46, 148, 2), seed=4, width=0.25)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_checkpoint_round_trip(tmp_path, small):
    x = np.random.default_rng(4).uniform(0, 1, (3, 16, 16, 2))
    before = small.predict(x)
    save_checkpoint(tmp_path / "m.ckpt", small)
    g, extra = load_checkpoint(tmp_path / "m.ckpt")
    after = g.predict(x)
    assert extra == {}
    assert g.kind == "lsvo" and g.input_shape == (16, 16, 2) and g.config["width"] == pytest.approx(1 / 16)
    for k in before:
        assert np.max(np.abs(before[k] - after[k])) < 1e-5


def test_checkpoint_preserves_stvo_variant(tmp_path):
    g = build_stvo((46, 148, 2), width=0.25, variant="padded")
    save_checkpoint(tmp_path / "s.ckpt", g)
    assert load_checkpoint(tmp_path / "s.ckpt")[0].config["variant"] == "padded"


def test_tensor_container_errors(tmp_path):
    p = tmp_path / "t.bin"
    write_tensors(p, {"a": np.arange(6.0).reshape(2, 3)})
    np.testing.assert_array_equal(read_tensors(p)["a"], np.arange(6.0).reshape(2, 3))
    raw = p.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="byte"):
        read_tensors(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(tmp_path / "magic.bin")


def test_overfit_single_sample():
    g = build_lsvo((16, 16, 2), seed=0, width=1 / 16)
    rng = np.random.default_rng(0)
    data = FlowData(rng.uniform(0, 1, (1, 16, 16, 2)), [[0.1, -0.2, 0.8, 0.01, -0.02, 0.005]])
    train(g, data, None, TrainConfig(lr=1e-3, batch_size=1, epochs=500, patience=500), restore_best=False)
    pred = g.predict(data.x)["motion"][0]
    assert np.max(np.abs(pred - data.y[0])) < 1e-3
