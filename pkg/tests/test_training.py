import json
import math

import numpy as np
import pytest

from hroute import tensor as tn
from hroute.errors import CheckpointError, ContractError, DivergenceError, NumericError
from hroute.hmodel import HModel, HModelConfig
from hroute.tasks import ChainReasoningSpec, ChainTask
from hroute.tensor import Tensor
from hroute.training import (
    AdamState,
    TrainConfig,
    accuracy,
    clip_grad_norm,
    cross_entropy,
    evaluate,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train,
)


def chain_model(task, seed=0, d=16):
    cfg = HModelConfig(I=1, H=2, O=1, T=2, d=d, ff=2 * d, heads=2, seq=task.seq_len, vocab=task.vocab,
                       n_out=2, pooling="last", causal=False)
    return HModel(cfg, seed)


# ---------------------------------------------------------------- loss


@pytest.mark.parametrize("V", [2, 7, 64])
def test_uniform_logits_give_log_v(V):
    loss = cross_entropy(Tensor(np.zeros((3, 4, V))), np.zeros((3, 4), dtype=int))
    assert loss.item() == pytest.approx(math.log(V), rel=1e-6)


def test_extreme_correct_logits_give_zero_loss():
    logits = np.full((4, 5), -50.0)
    logits[np.arange(4), [0, 3, 1, 4]] = 50.0
    assert cross_entropy(Tensor(logits), [0, 3, 1, 4]).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_float64_reference():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, (5, 6, 11))
    targets = rng.integers(0, 11, (5, 6))
    ref = 0.0
    for n in range(5):
        for s in range(6):
            row = logits[n, s]
            top = max(row)
            lse = top + math.log(sum(math.exp(v - top) for v in row))
            ref += lse - row[targets[n, s]]
    ref /= 30
    assert abs(cross_entropy(Tensor(logits), targets).item() - ref) <= 1e-5


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_accuracy_is_argmax_count():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(40, 5))
    targets = rng.integers(0, 5, 40)
    hits = sum(int(np.argmax(logits[i]) == targets[i]) for i in range(40))
    assert accuracy(logits, targets) == hits / 40


# ---------------------------------------------------------------- optimizer


def param(values):
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.float64, requires_grad=True)


def test_zero_grads_leave_params_and_decay_moments():
    p = param([1.0, -2.0])
    state = AdamState(step=1, m={"p": np.array([0.5, 0.5])}, v={"p": np.array([0.1, 0.1])})
    p.grad = np.zeros(2)
    optimizer_step({"p": p}, state, TrainConfig(lr=1e-3, grad_clip=None))
    np.testing.assert_allclose(state.m["p"], [0.45, 0.45])
    np.testing.assert_allclose(state.v["p"], [0.0999, 0.0999])
    # with decayed but non-zero moments the update is not zero; with fresh state it is
    q = param([1.0, -2.0])
    q.grad = np.zeros(2)
    optimizer_step({"q": q}, AdamState(), TrainConfig(grad_clip=None))
    np.testing.assert_array_equal(q.data, [1.0, -2.0])


def test_first_step_moves_by_lr():
    p = param([0.0, 3.0])
    p.grad = np.ones(2)
    optimizer_step({"p": p}, AdamState(), TrainConfig(lr=1e-3, grad_clip=None))
    np.testing.assert_allclose(p.data - [0.0, 3.0], [-1e-3, -1e-3], rtol=1e-6)


def test_clipping_scales_to_max_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float((g**2).sum()) for g in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-12)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same is grads


def test_non_finite_gradient_names_parameter():
    a, b = param([1.0]), param([2.0])
    a.grad, b.grad = np.array([1.0]), np.array([np.nan])
    with pytest.raises(NumericError, match="parameter b"):
        optimizer_step({"a": a, "b": b}, AdamState(), TrainConfig())
    assert a.data[0] == 1.0


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(lr=-1)
    with pytest.raises(ContractError):
        TrainConfig(betas=(0.9, 1.0))


# ---------------------------------------------------------------- training loop


def test_zero_lr_keeps_loss_constant():
    task = ChainTask(ChainReasoningSpec(n_symbols=6))

    class Fixed:
        vocab, seq_len = task.vocab, task.seq_len

        def batch(self, index, size):
            return task.batch(0, size)

    model = chain_model(task)
    res = train(model, Fixed(), TrainConfig(lr=0.0, steps=5, batch=8, eval_batches=1))
    losses = [h["loss"] for h in res.history if h["split"] == "train"]
    assert len(set(losses)) == 1


def test_training_is_bitwise_deterministic(tmp_path):
    task = ChainTask(ChainReasoningSpec(n_symbols=6))
    curves = []
    for run in range(2):
        path = tmp_path / f"m{run}.jsonl"
        train(chain_model(task, seed=3), task, TrainConfig(steps=6, batch=8, eval_every=3, eval_batches=1),
              metrics_path=path)
        curves.append(path.read_text())
    assert curves[0] == curves[1]
    recs = [json.loads(l) for l in curves[0].splitlines()]
    assert {r["split"] for r in recs} == {"train", "eval"}
    assert all(set(r) == {"split", "step", "loss", "acc", "alpha"} for r in recs)


def test_loss_decreases_on_fixed_batch():
    task = ChainTask(ChainReasoningSpec(n_symbols=8))
    model = chain_model(task, d=32)
    tok, lab, _ = task.batch(0, 32)
    params = dict(model.named_parameters())
    state, cfg = AdamState(), TrainConfig(lr=1e-3)
    losses = []
    for _ in range(50):
        loss = cross_entropy(model([tok])[0], lab)
        model.zero_grad()
        tn.backward(loss)
        optimizer_step(params, state, cfg)
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_divergence_aborts_and_checkpoints(tmp_path):
    task = ChainTask(ChainReasoningSpec(n_symbols=6))
    model = chain_model(task)
    model.inputs[0].block.tokens.data[...] = np.nan
    ck = tmp_path / "last.ck"
    with pytest.raises(DivergenceError, match="step 1"):
        train(model, task, TrainConfig(steps=3, batch=4), checkpoint_path=ck)
    assert ck.exists()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    task = ChainTask(ChainReasoningSpec(n_symbols=6))
    model = chain_model(task, seed=1)
    train(model, task, TrainConfig(steps=3, batch=8, eval_batches=1))
    path = tmp_path / "model.ck"
    save_checkpoint(path, model, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.config == {"note": "x"}
    clone = chain_model(task, seed=99)
    clone.load_state_dict(ck.tensors)
    for (n, p), (_, q) in zip(model.named_parameters(), clone.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    tok, _, _ = task.batch(9, 8)
    assert model([tok], "infer")[0].data.tobytes() == clone([tok], "infer")[0].data.tobytes()
    assert evaluate(model, task, 8, 2) == evaluate(clone, task, 8, 2)


def test_manifest_lists_every_parameter_once(tmp_path):
    model = chain_model(ChainTask(ChainReasoningSpec()))
    save_checkpoint(tmp_path / "m.ck", model)
    names = [e["name"] for e in load_checkpoint(tmp_path / "m.ck").manifest]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())
    assert len(names) == len(set(names))


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(path, chain_model(ChainTask(ChainReasoningSpec())))
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="corrupt payload"):
        load_checkpoint(path)
    path.write_bytes(blob[:40])
    with pytest.raises(CheckpointError, match="corrupt manifest"):
        load_checkpoint(path)


def test_flipped_payload_byte_is_rejected(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(path, chain_model(ChainTask(ChainReasoningSpec())))
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_mismatch_is_rejected(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(path, chain_model(ChainTask(ChainReasoningSpec())))
    blob = bytearray(path.read_bytes())
    blob[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
