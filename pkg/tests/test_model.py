import numpy as np
import pytest

from dplnet.backbone import ConfigError
from dplnet.harness.gradcheck import gradcheck_model
from dplnet.model import (
    DPLNet, IntegrityError, count_parameters, dplnet_config, init_identity, module_group,
    normalize_aux, normalize_rgb, partition_parameters, with_prompts,
)
from dplnet.prompts import PromptConfig, ValidationError
from dplnet.tensor_core import VJP, OptState, Tape, Tensor, backward, ops, optimizer_step


def _inputs(rng, b=2, s=64):
    rgb = rng.integers(0, 256, (b, 3, s, s)).astype(np.uint8)
    aux = rng.integers(0, 65536, (b, 1, s, s)).astype(np.uint16)
    return Tensor(normalize_rgb(rgb)), Tensor(normalize_aux(aux))


def _train_step(model, i_rgb, i_x, labels, state, lr=1e-2):
    with Tape() as tape:
        loss = ops.cross_entropy(model(i_rgb, i_x), labels)
    optimizer_step(model.parameters(), backward(tape, loss), state, lr=lr)
    return float(loss.data)


@pytest.fixture(scope="module")
def toy():
    return DPLNet(dplnet_config("toy"), seed=0)


def test_logit_shape(toy, rng):
    out = toy(*_inputs(rng))
    assert out.shape == (2, 5, 64, 64) and out.dtype == np.float32


def test_deterministic(rng):
    x = _inputs(rng, 1)
    a = DPLNet(dplnet_config("toy"), seed=4)(*x).data
    b = DPLNet(dplnet_config("toy"), seed=4)(*x).data
    assert np.array_equal(a, b)


def test_identity_at_init(toy, rng):
    for _ in range(3):
        i_rgb, i_x = _inputs(rng)
        assert np.array_equal(toy(i_rgb, i_x).data, toy(i_rgb, None, use_prompts=False).data)


def test_size_mismatch(toy, rng):
    i_rgb, _ = _inputs(rng, 1, 64)
    _, i_x = _inputs(rng, 1, 32)
    with pytest.raises(ValidationError):
        toy(i_rgb, i_x)
    with pytest.raises(ValidationError):
        toy(Tensor(np.zeros((1, 3, 48, 48), np.float32)), None, use_prompts=False)
    with pytest.raises(ValidationError):
        toy(i_rgb, None)


def test_config_invariants():
    with pytest.raises(ConfigError):
        dplnet_config("toy", num_classes=1)
    with pytest.raises(ConfigError):
        dplnet_config("toy", input_size=(48, 48))


def test_zero_classifier_gives_uniform_softmax(rng):
    m = DPLNet(dplnet_config("toy"), seed=1)
    m.decoder.classify.weight.data[...] = 0
    out = m(*_inputs(rng, 1))
    assert not out.data.any()
    np.testing.assert_allclose(ops.softmax(out, axis=1).data, 0.2, atol=1e-7)


def test_init_identity_idempotent_and_aux_probe(rng):
    m = DPLNet(dplnet_config("toy"), seed=2)
    i_rgb, i_x = _inputs(rng, 1)
    _, other = _inputs(rng, 1)
    init_identity(m)
    snap = {n: p.data.copy() for n, p in m.named_parameters()}
    init_identity(m)
    assert all(np.array_equal(p.data, snap[n]) for n, p in m.named_parameters())
    assert np.array_equal(m(i_rgb, i_x).data, m(i_rgb, other).data)
    labels = rng.integers(0, 5, (1, 64, 64))
    _train_step(m, i_rgb, i_x, labels, OptState())
    bumped = Tensor(i_x.data + np.float32(1e-2))
    assert np.abs(m(i_rgb, bumped).data - m(i_rgb, i_x).data).max() > 0


def test_partition(toy):
    part = partition_parameters(toy)
    assert part.trainable_in("backbone") == 0
    assert part.subtotals["backbone"] == part.frozen_total
    assert sum(part.subtotals.values()) == part.total == toy.num_parameters()
    assert set(part.frozen).isdisjoint(part.trainable)
    assert len(part.frozen) + len(part.trainable) == len(toy.parameters())


def test_partition_integrity_error():
    m = DPLNet(dplnet_config("toy"), seed=0)
    m.backbone.stage3.sal2.norm1.weight.frozen = False
    with pytest.raises(IntegrityError):
        partition_parameters(m)
    assert partition_parameters(m, strict=False).trainable_in("backbone") > 0


@pytest.mark.parametrize("prompts", [
    PromptConfig(),
    PromptConfig(mpg_stages=(False,) * 4),
    PromptConfig(mfa_stages=(False, True, False, True)),
    PromptConfig(mpg_stages=(False, False, True, True), num_tokens=10, token_dim=8),
    PromptConfig(mpg_stages=(True, False, False, False), beta=2, theta=8),
])
def test_closed_form_counts_match_build(prompts):
    cfg = dplnet_config("toy", prompts=prompts, num_classes=7)
    assert count_parameters(cfg) == partition_parameters(DPLNet(cfg)).subtotals


def test_b5_decoder_formula():
    cfg = dplnet_config("mit_b5_shape", num_classes=41)
    d = 768
    expected = sum(c * d + d for c in (64, 128, 320, 512)) + (4 * d * d + d) + (d * 41 + 41)
    assert count_parameters(cfg)["decoder"] == expected == 3_181_097


def test_with_prompts_variants_run(rng):
    cfg = with_prompts(dplnet_config("toy", input_size=(32, 32)), mpg_stages=(False, True, False, True),
                       mfa_stages=(False,) * 4)
    m = DPLNet(cfg)
    assert m(*_inputs(rng, 1, 32)).shape == (1, 5, 32, 32)


def test_module_groups():
    assert module_group("prompts.mfa3.layer2.g4.weight") == "prompts.mfa3.layer2"
    assert module_group("prompts.mpg2.u1.bias") == "prompts.mpg2"
    assert module_group("decoder.fuse.weight") == "decoder"


def test_end_to_end_gradcheck_lists_groups_once():
    report = gradcheck_model(seed=0)
    assert report.passed, report.format()
    m = DPLNet(dplnet_config("toy", input_size=(32, 32)))
    expected = {module_group(n) for n, p in m.named_parameters() if not p.frozen}
    assert set(report.errors) == expected
    assert "prompts.mpg1" in report.errors and "prompts.aux_embed" in report.errors


def test_gradcheck_detects_corrupted_rule(monkeypatch):
    rule = VJP["layer_norm"]
    monkeypatch.setitem(VJP, "layer_norm", lambda g, *a: tuple(
        None if x is None else 1.1 * x for x in rule(g, *a)))
    report = gradcheck_model(seed=0)
    assert not report.passed


def test_frozen_unchanged_trainable_moves(rng):
    m = DPLNet(dplnet_config("toy", input_size=(32, 32)), seed=5)
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    state = OptState()
    i_rgb, i_x = _inputs(rng, 2, 32)
    labels = rng.integers(0, 5, (2, 32, 32))
    for _ in range(5):
        _train_step(m, i_rgb, i_x, labels, state)
    for n, p in m.named_parameters():
        if p.frozen:
            assert np.array_equal(p.data, before[n]), n
    moved = sum(int((p.data != before[n]).sum()) for n, p in m.named_parameters() if not p.frozen)
    total = sum(p.size for p in m.parameters() if not p.frozen)
    assert moved / total >= 0.99
