import json
from pathlib import Path

import numpy as np
import pytest

from szdetect import autodiff as ad
from szdetect.model import (CheckpointError, ConfigError, Model, ModelCheckpoint, ModelConfig, build_model,
                            count_parameters, export_embeddings, load_checkpoint, predict_seizure_prob,
                            save_checkpoint, seizure_prob_from_logits)

DATA = Path(__file__).parent / "data"


def tiny(**kw):
    base = dict(n_layers=2, n_filters=4, state_dim=4, input_channels=3, clip_len=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def f64():
    with ad.precision(64):
        yield


def test_same_seed_same_parameters():
    a, b = build_model(tiny(), 7), build_model(tiny(), 7)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    c = build_model(tiny(), 8)
    assert not np.array_equal(a.params["encoder.weight"].data, c.params["encoder.weight"].data)


@pytest.mark.xfail(strict=True, reason="the stated layout gives ~266k parameters, outside +/-15% of 366k")
def test_parameter_count_near_reference():
    n = count_parameters(ModelConfig())
    assert abs(n - 366_000) <= 0.15 * 366_000


def test_parameter_count_matches_layout():
    assert count_parameters(ModelConfig()) == 265_986
    assert build_model(tiny(), 0).n_parameters() == count_parameters(tiny())


def test_multilabel_head_adds_expected_parameters():
    H = 4
    binary = count_parameters(tiny(n_filters=H))
    multi = count_parameters(tiny(n_filters=H, n_classes=26, head_mode="multilabel_sigmoid"))
    assert multi - binary == (H + 1) * 24


def test_binary_and_multilabel_share_trunk():
    a = build_model(tiny(), 3)
    b = build_model(tiny(n_classes=5, head_mode="multilabel_sigmoid"), 3)
    for name, t in a.params.items():
        if not name.startswith("head."):
            assert np.array_equal(t.data, b.params[name].data)


@pytest.mark.parametrize("kw", [dict(n_filters=0), dict(dropout=1.0), dict(head_mode="nope"),
                                dict(n_classes=3), dict(head_mode="multilabel_sigmoid", n_classes=2,
                                                        seizure_index=2)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        build_model(tiny(**kw), 0)


def test_input_shape_and_finiteness_checked():
    m = build_model(tiny(), 0)
    with pytest.raises(ad.ShapeError):
        m.forward(np.zeros((1, 31, 3)))
    x = np.zeros((1, 32, 3))
    x[0, 3, 1] = np.nan
    with pytest.raises(ValueError):
        m.forward(x)


def test_zero_input_gives_identical_rows():
    z = build_model(tiny(), 0).forward(np.zeros((4, 32, 3))).data
    assert np.array_equal(z, np.repeat(z[:1], 4, axis=0))


def test_identical_rows_identical_logits():
    x = np.random.default_rng(0).normal(size=(1, 32, 3))
    z = build_model(tiny(), 0).forward(np.repeat(x, 3, axis=0)).data
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])


def test_golden_logits():
    g = json.loads((DATA / "golden_logits.json").read_text())
    m = build_model(ModelConfig(**g["config"]), g["seed"])
    x = np.random.default_rng(g["input_seed"]).normal(size=g["input_shape"])
    assert np.max(np.abs(m.forward(x).data - np.array(g["logits"]))) <= 1e-6


def test_seizure_probability_cases():
    assert seizure_prob_from_logits(np.zeros((2, 2)), tiny())[0] == 0.5
    cfg = tiny(n_classes=3, head_mode="multilabel_sigmoid", seizure_index=1)
    assert np.allclose(seizure_prob_from_logits(np.array([[9.0, 0.0, -9.0]]), cfg), 0.5)
    p = seizure_prob_from_logits(np.array([[0.0, 40.0], [40.0, 0.0]]), tiny())
    assert p[0] > 0.999 and p[1] < 1e-3


def test_predict_and_embeddings_shapes():
    m = build_model(tiny(), 0)
    x = np.random.default_rng(1).normal(size=(5, 32, 3))
    p = predict_seizure_prob(m, x, batch_size=2)
    assert p.shape == (5,) and np.all((p > 0) & (p < 1))
    e = export_embeddings(m, x, batch_size=2)
    assert e.shape == (5, 4)
    assert np.allclose(e, m.trunk(x).data.mean(axis=1))


def test_eval_mode_is_deterministic_and_train_mode_uses_dropout():
    m = build_model(tiny(dropout=0.5), 0)
    x = np.random.default_rng(2).normal(size=(2, 32, 3))
    assert np.array_equal(m.forward(x).data, m.forward(x).data)
    a = m.forward(x, train=True, rng=np.random.default_rng(0)).data
    b = m.forward(x, train=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("head", ["softmax_binary", "multilabel_sigmoid"])
def test_gradients_match_finite_differences(head):
    cfg = tiny(n_classes=2 if head == "softmax_binary" else 3, head_mode=head, dropout=0.0)
    m = build_model(cfg, 5)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 32, 3))
    y = np.array([0, 1]) if head == "softmax_binary" else rng.integers(0, 2, size=(2, 3))
    ad.backward(m.loss(m.forward(x), y))
    for name, t in m.named_parameters():
        flat = t.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + 1e-6
            fp = m.loss(m.forward(x), y).item()
            flat[i] = old - 1e-6
            fm = m.loss(m.forward(x), y).item()
            flat[i] = old
            num = (fp - fm) / 2e-6
            ana = t.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-3), name


def test_checkpoint_round_trip_bitwise(tmp_path):
    with ad.precision(32):
        m = build_model(tiny(), 4)
        x = np.random.default_rng(3).normal(size=(3, 32, 3)).astype(np.float32)
        z = m.forward(x).data
        ts = {"step": 9, "m": {k: np.ones_like(v) for k, v in m.state_dict().items()},
              "v": {k: np.full_like(v, 2.0) for k, v in m.state_dict().items()}}
        save_checkpoint(tmp_path / "a.ckpt", ModelCheckpoint.from_model(m, ts, note="x"))
        ck = load_checkpoint(tmp_path / "a.ckpt")
        assert ck.metadata["note"] == "x" and ck.training_state["step"] == 9
        assert np.array_equal(ck.to_model().forward(x).data, z)
        save_checkpoint(tmp_path / "b.ckpt", ck)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_model_rejects_mismatched_parameters():
    params = build_model(tiny(), 0).state_dict()
    params.pop("head.bias")
    with pytest.raises(ConfigError):
        Model(tiny(), params)
