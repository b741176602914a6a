import json

import numpy as np
import pytest

from koopvm import numcore as nc
from koopvm.koopman import EigenKoopman
from koopvm.model import (
    ForwardTrace,
    LossWeights,
    MultistageModel,
    StageModel,
    StageTrace,
    build_model,
    load_checkpoint,
    loss_kld,
    loss_pred,
    loss_recon,
    loss_total,
    normalize_variant,
    save_checkpoint,
)
from koopvm.nn import MLP, DenseLayer
from koopvm.numcore import ShapeError, Tensor


def _identity_mlp(d=1):
    layer = DenseLayer(d, d)
    layer.weight.data[:] = np.eye(d)
    return MLP.from_layers([layer])


def _hand_model(lam=2.0):
    transition = EigenKoopman(1)
    transition.aux.net.layers[-1].bias.data[:] = lam
    stages = [
        StageModel(_identity_mlp(), _identity_mlp(), _identity_mlp(), transition=transition),
        StageModel(_identity_mlp(), _identity_mlp(), _identity_mlp()),
    ]
    return MultistageModel(stages, "e-aek")


def test_variant_aliases():
    assert normalize_variant("SDK") == "sdk"
    assert normalize_variant("E_AEK") == "e-aek"
    with pytest.raises(ValueError):
        normalize_variant("lstm")


@pytest.mark.parametrize("variant", ["s-aek", "e-aek", "sdk"])
def test_zero_model_predicts_zero(variant, rng):
    model = build_model(variant, [3, 2], [2, 1], d_h=4)
    preds = model.predict([rng.normal(size=(5, 3)), rng.normal(size=(5, 2))])
    assert all(not p.any() for p in preds)


def test_hand_traced_two_stage_model():
    trace = _hand_model().forward([[[1.0]], [[3.0]]])
    assert trace[0].h.data.tolist() == [[1.0]]
    assert trace[1].lam.data.tolist() == [[2.0]]
    assert trace[1].h.data.tolist() == [[5.0]]
    assert trace[1].y_pred.data.tolist() == [[5.0]]


def test_eval_mode_is_deterministic(rng):
    model = build_model("sdk", [3, 2], [2, 2], d_h=4, rng=rng)
    xs = [rng.normal(size=(6, 3)), rng.normal(size=(6, 2))]
    assert model.forward(xs).to_json() == model.forward(xs).to_json()


def test_train_mode_uses_given_eps(rng):
    model = build_model("sdk", [3, 2], [2, 2], d_h=4, rng=rng)
    xs = [rng.normal(size=(6, 3)), rng.normal(size=(6, 2))]
    a = model.forward(xs, mode="train", rng=np.random.default_rng(5))
    b = model.forward(xs, mode="train", eps=a.eps)
    assert np.array_equal(a.predictions()[1], b.predictions()[1])
    with pytest.raises(ValueError):
        model.forward(xs, mode="train")


def test_forward_rejects_batch_mismatch(rng):
    model = build_model("e-aek", [3, 2], [2, 2], d_h=4, rng=rng)
    with pytest.raises(ShapeError):
        model.forward([np.zeros((4, 3)), np.zeros((5, 2))])


def test_downstream_change_does_not_affect_upstream(rng):
    model = build_model("sdk", [3, 2], [2, 2], d_h=4, rng=rng)
    x1 = rng.normal(size=(4, 3))
    a = model.predict([x1, rng.normal(size=(4, 2))])
    b = model.predict([x1, rng.normal(size=(4, 2))])
    assert np.array_equal(a[0], b[0])


def test_model_validation():
    with pytest.raises(ValueError):
        MultistageModel([StageModel(_identity_mlp(), _identity_mlp(), _identity_mlp())], "e-aek")
    with pytest.raises(ValueError):
        _hand_model().__class__(_hand_model().stages, "sdk")


def test_loss_recon_examples():
    assert loss_recon([[1.0, 2.0]], Tensor([[1.0, 2.0]])).item() == 0.0
    assert loss_recon([[0.0, 0.0]], Tensor([[1.0, 1.0]])).item() == 2.0
    with pytest.raises(ValueError):
        loss_recon(np.zeros((0, 2)), Tensor(np.zeros((0, 2))))


def test_loss_pred_examples():
    assert loss_pred([[1.0, 2.0]], Tensor([[1.0, 2.0]])).item() == 0.0
    assert loss_pred([[1.0, 2.0]], Tensor([[0.0, 0.0]])).item() == 5.0


def test_loss_pred_mask_rescales_to_valid_cells():
    y = np.array([[1.0, 2.0], [3.0, np.nan]])
    mask = np.array([[True, True], [True, False]])
    # three valid cells with squared errors 1, 4, 9 -> per-row scale 2/3
    assert loss_pred(y, Tensor(np.zeros((2, 2))), mask).item() == pytest.approx(14 * 2 / 3)
    assert loss_pred(y, Tensor(np.zeros((2, 2))), np.zeros((2, 2), bool)).item() == 0.0


def test_loss_kld_examples():
    assert abs(loss_kld([[0.0]], [[1.0]]).item()) <= 1e-15
    assert loss_kld([[1.0]], [[1.0]]).item() == pytest.approx(0.5, abs=1e-12)
    assert loss_kld([[0.0]], [[np.sqrt(np.e)]]).item() == pytest.approx(0.5 * (np.e - 2), abs=1e-12)
    with pytest.raises(ValueError):
        loss_kld([[0.0]], [[0.0]])


def _one_stage_trace(pred=2.0, recon=3.0, kld=10.0):
    st = StageTrace(
        x=Tensor([[0.0]]), h_hat=Tensor([[0.0]]), h=Tensor([[0.0]]),
        y_out=Tensor([[np.sqrt(pred)]]), y_pred=Tensor([[np.sqrt(pred)]]), x_rec=Tensor([[np.sqrt(recon)]]),
        mu_hat=Tensor([[np.sqrt(2 * kld)]]), sigma_hat=Tensor([[1.0]]), log_sigma_hat=Tensor([[0.0]]),
    )
    return ForwardTrace([st], "eval")


def test_loss_total_weighted_sum():
    total, br = loss_total(_one_stage_trace(), [np.zeros((1, 1))], None, LossWeights())
    assert br.pred == [pytest.approx(2.0)] and br.recon == [pytest.approx(3.0)] and br.kld == [pytest.approx(10.0)]
    assert total.item() == pytest.approx(2 + 0.3 + 0.1 * 5e-5 * 10, abs=1e-12)
    assert br.weights == {"rho": 1.0, "theta": 0.1, "omega": 5e-5}


def test_loss_total_perfect_fit_is_zero():
    total, _ = loss_total(_one_stage_trace(0.0, 0.0, 0.0), [np.zeros((1, 1))], None, LossWeights())
    assert total.item() == 0.0


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model("sdk", [3, 2], [2, 2], d_h=4, rng=rng)
    model.set_label_scaling([np.array([1.0, 2.0]), np.zeros(2)], [np.array([0.5, 3.0]), np.ones(2)])
    path = save_checkpoint(model, tmp_path / "ck.json", {"seed": 7})
    loaded, cfg = load_checkpoint(path)
    xs = [rng.normal(size=(5, 3)), rng.normal(size=(5, 2))]
    assert cfg == {"seed": 7}
    for a, b in zip(model.predict(xs), loaded.predict(xs)):
        assert np.array_equal(a, b)
    (tmp_path / "bad.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")


@pytest.mark.parametrize("variant", ["s-aek", "e-aek", "sdk"])
def test_total_loss_gradients(variant, rng):
    model = build_model(variant, [3, 2], [2, 1], d_h=3, rng=rng)
    # zero biases put some ReLU inputs exactly on the kink; move off it
    for p in model.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    xs = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
    ys = [rng.normal(size=(4, 2)), rng.normal(size=(4, 1))]
    eps = model.forward(xs, mode="train", rng=rng).eps if model.stochastic else None

    def f():
        trace = model.forward(xs, mode="train", rng=rng, eps=eps)
        return loss_total(trace, ys, None, LossWeights(omega=0.5))[0]

    assert nc.finite_diff_check(f, model.parameters()) < 1e-5
