import numpy as np
import pytest

from dplnet.data import SynthSpec, UndefinedMetricError, synth_samples
from dplnet.harness import (
    CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError, RunConfig, RunConfigError,
    TrainingDivergedError, frozen_hash, load_checkpoint, parse_config, save_checkpoint, serialize, train,
)
from dplnet.harness.ablation import monotone_violations, run_ablation, to_csv, variant_config
from dplnet.harness.checkpoint import CheckpointError, dumps, loads, restore_params
from dplnet.harness.cli import main
from dplnet.harness.evaluate import evaluate, predict_ms_flip, scaled_size
from dplnet.harness.params import format_report, param_report
from dplnet.harness.train import Trainer, build_model
from dplnet.prompts import ValidationError
from dplnet.tensor_core import VJP

SMALL = dict(crop_size=32, batch_size=4, flip_p=0.0, scale_min=1.0, scale_max=1.0, out_dir="")


@pytest.fixture(scope="module")
def records32():
    return synth_samples(SynthSpec(size=32, seed=11), 4)


@pytest.fixture(scope="module")
def memorized(records32):
    cfg = RunConfig(epochs=500, lr=3e-3, **SMALL)
    return train(cfg, records32, [], write_files=False)


# config

def test_empty_config_gives_defaults():
    assert parse_config("") == RunConfig()
    assert parse_config("# only a comment\n\n") == RunConfig()


def test_round_trip():
    cfg = parse_config("beta=4\nmpg_stages=1,3\nfull_finetune=true\nlr=0.0025  # trailing comment")
    assert cfg.beta == 4 and cfg.mpg_stages == (1, 3) and cfg.full_finetune and cfg.lr == 0.0025
    assert parse_config(serialize(cfg)) == cfg
    assert "beta=4\n" in serialize(cfg)


def test_bad_values_name_the_key():
    with pytest.raises(RunConfigError) as err:
        parse_config("beta=banana")
    assert err.value.key == "beta" and "beta" in str(err.value)
    with pytest.raises(RunConfigError, match="colour"):
        parse_config("colour=red")
    with pytest.raises(RunConfigError, match="optimizer"):
        parse_config("optimizer=lbfgs")
    with pytest.raises(RunConfigError, match="mfa_stages"):
        parse_config("mfa_stages=0,5")
    with pytest.raises(RunConfigError):
        parse_config("just words")


def test_stage_masks_map_to_prompt_config():
    pc = parse_config("mpg_stages=none\nmfa_stages=2,4").prompt_config()
    assert pc.mpg_stages == (False,) * 4 and pc.mfa_stages == (False, True, False, True)


# checkpoint

def _state(records32, steps=2):
    t = Trainer(RunConfig(**SMALL), list(records32))
    for _ in range(steps):
        t.train_step()
    return t.state()


def test_checkpoint_save_load_save_identical(tmp_path, records32):
    st = _state(records32)
    save_checkpoint(st, tmp_path / "a.dplc")
    save_checkpoint(load_checkpoint(tmp_path / "a.dplc"), tmp_path / "b.dplc")
    assert (tmp_path / "a.dplc").read_bytes() == (tmp_path / "b.dplc").read_bytes()
    back = load_checkpoint(tmp_path / "a.dplc")
    assert back.step == 2 and back.opt.step == 2
    for name, (arr, frozen) in st.params.items():
        assert np.array_equal(back.params[name][0], arr) and back.params[name][1] == frozen


def test_checkpoint_errors(records32):
    raw = dumps(_state(records32, 1))
    bad = bytearray(raw)
    bad[1] ^= 0xFF
    with pytest.raises(CheckpointMagicError):
        loads(bytes(bad))
    bad = bytearray(raw)
    bad[4] = 9
    with pytest.raises(CheckpointVersionError):
        loads(bytes(bad))
    with pytest.raises(CheckpointTruncatedError):
        loads(raw[:len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError):
        loads(raw[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        loads(raw + b"\0")


def test_restore_rejects_other_architecture(records32):
    st = _state(records32, 0)
    other = build_model(RunConfig(mfa_stages=(), **SMALL))
    with pytest.raises(CheckpointError):
        restore_params(other, st.params)


# training

def test_lr_zero_leaves_params_unchanged(records32):
    cfg = RunConfig(epochs=2, lr=0.0, **SMALL)
    init = build_model(cfg)
    t = train(cfg, records32, [], write_files=False)
    for (n, a), (_, b) in zip(init.named_parameters(), t.model.named_parameters()):
        assert np.array_equal(a.data, b.data), n


@pytest.mark.parametrize("optimizer", ["adamw", "sgd_momentum"])
def test_frozen_hash_invariant(records32, optimizer):
    cfg = RunConfig(epochs=50, optimizer=optimizer, lr=1e-2, **SMALL)
    t = Trainer(cfg, list(records32))
    before = frozen_hash(t.model)
    t.run()
    assert t.step == 50 and frozen_hash(t.model) == before


def test_training_is_deterministic(records32, tmp_path):
    cfg = RunConfig(epochs=3, batch_size=2, crop_size=32, flip_p=0.5, scale_min=0.5, scale_max=2.0,
                    out_dir=str(tmp_path / "a"))
    a = train(cfg, records32, records32[:2])
    b = train(cfg.replace(out_dir=str(tmp_path / "b")), records32, records32[:2])
    assert (tmp_path / "a" / "train_log.tsv").read_text() == (tmp_path / "b" / "train_log.tsv").read_text()
    assert (tmp_path / "a" / "final.dplc").read_bytes() != b""
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data)
    header = (tmp_path / "a" / "train_log.tsv").read_text().splitlines()[0].split("\t")
    assert header[:4] == ["epoch", "step", "lr", "loss"]


def test_nan_loss_aborts_with_snapshot(records32, tmp_path):
    t = Trainer(RunConfig(**{**SMALL, "out_dir": str(tmp_path)}), list(records32))
    t.model.decoder.classify.bias.data[0] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        t.train_step()
    assert err.value.snapshot.exists()
    assert "step 0" in str(err.value)
    assert np.isnan(load_checkpoint(err.value.snapshot).params["decoder.classify.bias"][0][0])


def test_memorizes_tiny_set(memorized):
    assert min(r["loss"] for r in memorized.rows) < 0.1


def test_memorized_training_miou(memorized, records32):
    assert evaluate(memorized.model, records32).miou > 0.95


# evaluation

def test_eval_deterministic_and_ms_degenerate(memorized, records32):
    a = evaluate(memorized.model, records32)
    b = evaluate(memorized.model, records32)
    assert a.per_class_iou == b.per_class_iou
    ms = evaluate(memorized.model, records32, mode="ms_flip", scales=(1.0,), flip=False)
    assert np.array_equal(ms.confusion.counts, a.confusion.counts)
    full1 = evaluate(memorized.model, records32, mode="ms_flip")
    full2 = evaluate(memorized.model, records32, mode="ms_flip")
    assert np.array_equal(full1.confusion.counts, full2.confusion.counts)


def test_constant_logits_unchanged_by_ensembling(records32):
    model = build_model(RunConfig(**SMALL))
    model.decoder.classify.weight.data[...] = 0
    model.decoder.classify.bias.data[...] = np.array([0.1, 0.5, -0.2, 0.3, 0.0], np.float32)
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    pred = predict_ms_flip(model, x, x).argmax(axis=1)
    assert (pred == 1).all()


def test_eval_errors(records32):
    model = build_model(RunConfig(**SMALL))
    with pytest.raises(UndefinedMetricError):
        evaluate(model, [])
    with pytest.raises(ValidationError):
        evaluate(model, records32, num_classes=7)


def test_scaled_size():
    assert [scaled_size(64, s, 32) for s in (0.5, 0.75, 1.0, 1.25, 1.5)] == [32, 64, 64, 96, 96]


# ablation

def test_ablation_prompt_length(records32):
    rows = run_ablation("prompt_length", base=RunConfig(**SMALL), records=records32)
    assert [r.variant for r in rows[1:]] == [f"prompt_length={v}" for v in (10, 20, 30, 40)]
    assert not monotone_violations("prompt_length", rows)
    assert to_csv(rows).splitlines()[0].startswith("variant,trainable_params")


@pytest.mark.parametrize("axis", ["w/o_mfa", "w/o_mpg", "frozen_decoder", "full_finetune"])
def test_ablation_single_variants(records32, axis):
    rows = run_ablation(axis, base=RunConfig(**SMALL), records=records32)
    assert len(rows) == 2 and not monotone_violations(axis, rows)
    if axis == "full_finetune":
        assert rows[1].frozen == 0


def test_ablation_invalid_variant():
    with pytest.raises(RunConfigError):
        variant_config("mpg_position", "2-3", RunConfig())
    with pytest.raises(RunConfigError):
        variant_config("mpg_position", "1-0", RunConfig())
    with pytest.raises(RunConfigError):
        run_ablation("depth", ["1"])
    with pytest.raises(RunConfigError):
        variant_config("prompt_dim", "wide", RunConfig())


# params / gradcheck / cli

def test_param_report_b5():
    rep = param_report("mit_b5_shape")
    assert abs(rep["subtotals"]["decoder"] / 3.27e6 - 1) < 0.03
    text = format_report(rep)
    assert "3,880,000" in text and "4.4%" in text


def test_param_report_toy():
    rep = param_report("toy")
    assert rep["subtotals"]["backbone"] == rep["frozen"]


def test_gradcheck_cli_exit_codes(monkeypatch, capsys):
    assert main(["gradcheck"]) == 0
    rule = VJP["gelu"]
    monkeypatch.setitem(VJP, "gelu", lambda g, *a: tuple(None if x is None else 0.9 * x for x in rule(g, *a)))
    assert main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--out", "d", "--n", "4", "--size", "32"]) == 0
    assert main(["synth", "--out", "d", "--n", "2", "--size", "32", "--split", "val", "--seed", "1"]) == 0
    cfg = "train_manifest=d/train.txt\nval_manifest=d/val.txt\ncrop_size=32\nepochs=2\nbatch_size=2\nout_dir=r\n"
    (tmp_path / "c.cfg").write_text(cfg)
    assert main(["train", "--config", "c.cfg", "--until-step", "3"]) == 0
    assert main(["train", "--resume", "r/last.dplc"]) == 0
    assert load_checkpoint("r/final.dplc").step == 4
    assert main(["eval", "--checkpoint", "r/final.dplc"]) == 0
    assert main(["eval", "--checkpoint", "r/final.dplc", "--mode", "ms-flip"]) == 0
    assert main(["params", "--preset", "toy"]) == 0
    assert main(["ablate", "--axis", "w/o_mfa", "crop_size=32", "--out", "abl.csv"]) == 0
    assert (tmp_path / "abl.csv").read_text().count("\n") == 3
    assert main(["train", "beta=banana"]) == 2
    (tmp_path / "bad.dplc").write_bytes(b"XXXX")
    assert main(["eval", "--checkpoint", "bad.dplc"]) == 2
    capsys.readouterr()


def test_thread_env(monkeypatch):
    monkeypatch.setenv("DPLNET_THREADS", "zero")
    assert main(["params", "--preset", "toy"]) == 2
    monkeypatch.setenv("DPLNET_THREADS", "2")
    assert main(["params", "--preset", "toy"]) == 0
