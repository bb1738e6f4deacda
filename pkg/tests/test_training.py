import numpy as np
import pytest

from pdfembed import checkpoint
from pdfembed.encoder import ModelConfig, init_params
from pdfembed.errors import CorruptFile, Divergence, InputError
from pdfembed.objectives import ObjectiveSpec
from pdfembed.synthgen import PairSet, SynthConfig, generate
from pdfembed.training import Schedule, cosine_lr, predict_pairs, train

CFG = ModelConfig(embed_dim=16, num_layers=1)


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(seed=4), 60)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == 1.0
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5)
    assert cosine_lr(100, 100, 1.0) == pytest.approx(0.0)
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    lrs = [cosine_lr(s, 100, 1.0, 10) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_zero_epochs_returns_initialisation(small):
    init = init_params(CFG, 5)
    res = train(CFG, small, ObjectiveSpec.from_name("kl-exp"), Schedule(epochs=0), init=init)
    assert all(np.array_equal(res.params[k], init[k]) for k in init)
    assert res.epoch_losses == [] and res.steps == []


@pytest.mark.parametrize("name", ["onehot", "kl-gauss"])
def test_full_batch_descent_at_small_lr(small, name):
    sched = Schedule(epochs=10, lr=0.01, batch_size=len(small), warmup_steps=0)
    res = train(CFG, small, ObjectiveSpec.from_name(name), sched, seed=0)
    losses = res.epoch_losses
    assert len(losses) == 10
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_same_seed_bit_identical(small):
    spec = ObjectiveSpec.from_name("labelsmooth")
    a = train(CFG, small, spec, Schedule(epochs=2, batch_size=16), seed=9)
    b = train(CFG, small, spec, Schedule(epochs=2, batch_size=16), seed=9)
    assert a.epoch_losses == b.epoch_losses
    assert [s["loss"] for s in a.steps] == [s["loss"] for s in b.steps]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_step_log_fields(small):
    res = train(CFG, small, ObjectiveSpec.from_name("rd"), Schedule(epochs=1, batch_size=20), seed=0)
    assert [s["step"] for s in res.steps] == [0, 1, 2]
    assert set(res.steps[0]) == {"step", "objective", "loss", "skipped_batches"}
    assert res.steps[0]["objective"] == "rd"


def test_constant_label_batches_are_skipped_under_pcc():
    ps = generate(SynthConfig(seed=1, level_weights=(0, 0, 0, 1, 0, 0)), 12)
    res = train(CFG, ps, ObjectiveSpec("pcc"), Schedule(epochs=2, batch_size=6), seed=0)
    assert res.skipped_batches == 4
    assert all(s["loss"] is None for s in res.steps)
    assert res.steps[-1]["skipped_batches"] == 4


def test_divergence_reports_step(small):
    bad = PairSet(small.real.copy(), small.gen.copy(), small.levels)
    bad.real[25] = np.nan
    with pytest.raises(Divergence) as exc:
        train(CFG, bad, ObjectiveSpec.from_name("onehot"), Schedule(epochs=1, batch_size=10), seed=0)
    assert exc.value.step >= 0


def test_empty_training_set():
    empty = PairSet(np.zeros((0, 1, 16, 16)), np.zeros((0, 1, 16, 16)), np.zeros(0, int))
    with pytest.raises(InputError):
        train(CFG, empty, ObjectiveSpec("onehot"), Schedule())


def test_predict_pairs_heads(small):
    params = init_params(CFG, 0)
    s, h = predict_pairs(params, CFG, small)
    assert h.shape == (60, 6) and set(np.unique(s)) <= set(range(6))
    s2, _ = predict_pairs(params, CFG, small, ObjectiveSpec("regression"))
    assert np.all((s2 > 0) & (s2 < 5))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(CFG, 2)
    spec = ObjectiveSpec.from_name("kl-linear", amplitude=0.25)
    checkpoint.save(tmp_path / "m.bin", params, CFG, spec, meta={"seed": 2})
    p2, cfg2, spec2, meta = checkpoint.load(tmp_path / "m.bin")
    assert cfg2 == CFG and spec2 == spec and meta == {"seed": 2}
    for k in params:
        np.testing.assert_array_equal(p2[k], params[k].astype(np.float32))
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"PDFE"
    assert len(raw) > 4 * params.num_scalars()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.bin"
    checkpoint.save(path, init_params(CFG, 0), CFG)
    raw = bytearray(path.read_bytes())
    raw[100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        checkpoint.load(path)
    with pytest.raises(CorruptFile):
        checkpoint.loads(b"PDFE")
