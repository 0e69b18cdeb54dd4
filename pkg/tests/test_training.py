import json

import numpy as np
import pytest
import torch

from xmrs.config import ABLATIONS, ModelConfig, ablate, load_config
from xmrs.dataset import ConfigurationError, Dataset, Modality, Sample, generate_synthetic
from xmrs.model import Pool, RetrievalAugmentedModel, collate, count_parameters
from xmrs.training import Checkpoint, Trainer, epoch_similarity_summary, load_checkpoint, save_checkpoint, train

from conftest import TINY_DIMS


def _states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_forward_smoke(tiny_config, tiny_dataset):
    model = RetrievalAugmentedModel(TINY_DIMS, tiny_config)
    inputs = collate(tiny_dataset.samples[:2])
    out = model(inputs)
    assert out.predictions.shape == (2,)
    assert torch.isfinite(out.predictions).all()


def test_inference_is_deterministic(tiny_config, tiny_dataset):
    model = RetrievalAugmentedModel(TINY_DIMS, tiny_config).eval()
    bank = model.memory_bank(tiny_dataset)
    a = model.predict(tiny_dataset, bank)
    b = model.predict(tiny_dataset, bank)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        model(collate(tiny_dataset.samples[:3]), mode="inference")


def test_batch_independent_in_inference(tiny_config, tiny_dataset):
    model = RetrievalAugmentedModel(TINY_DIMS, tiny_config.replace(dtype="float64")).eval()
    bank = model.memory_bank(tiny_dataset)
    full = model.predict(tiny_dataset, bank, batch_size=64)
    chunked = model.predict(tiny_dataset, bank, batch_size=5)
    np.testing.assert_allclose(full, chunked, atol=1e-12)


def test_ablation_parameter_counts(tiny_config):
    full = count_parameters(RetrievalAugmentedModel(TINY_DIMS, tiny_config))
    counts = {}
    for flag in ABLATIONS:
        counts[flag] = count_parameters(RetrievalAugmentedModel(TINY_DIMS, ablate(tiny_config, {flag})))
        assert counts[flag] < full
    both = count_parameters(RetrievalAugmentedModel(TINY_DIMS, ablate(tiny_config, {"no_mmg", "no_mcae"})))
    assert both < counts["no_mmg"] and both < counts["no_mcae"]
    assert ablate(tiny_config, set()) == tiny_config
    with pytest.raises(ConfigurationError):
        ablate(tiny_config, {"no_everything"})


def test_no_mmg_uses_self_attended_stream(tiny_config, tiny_dataset):
    cfg = ablate(tiny_config, {"no_mmg"}).replace(dtype="float64")
    model = RetrievalAugmentedModel(TINY_DIMS, cfg)
    assert "modality" not in model.generators and "sample" in model.generators
    inputs = collate(tiny_dataset.samples[:4], torch.float64)
    captured = {}
    block = model.cae["modality_text"]
    block.register_forward_hook(lambda mod, args, out: captured.update(target=args[0], ctx=args[1]))
    model(inputs)
    assert torch.equal(captured["target"], captured["ctx"])
    sa = model.self_attn["modality_text"](model.stream_in["text"](inputs.features[Modality.TEXT]))
    torch.testing.assert_close(captured["target"], sa)


def test_no_cae_skips_block(tiny_config, tiny_dataset):
    model = RetrievalAugmentedModel(TINY_DIMS, ablate(tiny_config, {"no_scae"}))
    assert not any(k.startswith("sample_") for k in model.cae)
    assert torch.isfinite(model(collate(tiny_dataset.samples[:4])).predictions).all()


def test_shared_seed_gives_shared_parameters(tiny_config):
    a = RetrievalAugmentedModel(TINY_DIMS, tiny_config)
    b = RetrievalAugmentedModel(TINY_DIMS, tiny_config)
    c = RetrievalAugmentedModel(TINY_DIMS, tiny_config.replace(seed=1))
    assert _states_equal(a.state_dict(), b.state_dict())
    assert not _states_equal(a.state_dict(), c.state_dict())


def test_config_validation_and_io(tmp_path):
    with pytest.raises(ConfigurationError):
        ModelConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(gamma=0.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(contrastive_variant="triplet")
    cfg = ModelConfig(d_model=16, ablations=frozenset({"no_smg"}))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d_model": 16, "lambda": 0.002}))
    loaded = load_config(path)
    assert loaded.d_model == 16 and loaded.lam == 0.002
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_lambda_changes_training(tiny_config, tiny_dataset):
    cfg = tiny_config.replace(epochs=2, learning_rate=1e-2)
    a = train(tiny_dataset, None, cfg.replace(lam=0.0)).last.model_state
    b = train(tiny_dataset, None, cfg.replace(lam=0.001)).last.model_state
    assert not _states_equal(a, b)


def test_same_seed_same_run(tiny_config, tiny_dataset):
    a = train(tiny_dataset, None, tiny_config)
    b = train(tiny_dataset, None, tiny_config)
    assert a.log == b.log
    assert _states_equal(a.last.model_state, b.last.model_state)


def test_resume_matches_uninterrupted(tmp_path, tiny_config, tiny_dataset):
    cfg = tiny_config.replace(epochs=4, learning_rate=1e-3)
    valid = generate_synthetic(8, TINY_DIMS, 2.0, seed=99, split="valid")
    straight = Trainer(tiny_dataset, valid, cfg, trace=True).fit()
    part = Trainer(tiny_dataset, valid, cfg, trace=True).fit(until_epoch=2)
    save_checkpoint(part.checkpoint(), tmp_path / "mid.ckpt")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "mid.ckpt"), tiny_dataset, valid, trace=True).fit()
    assert resumed.log == straight.log and resumed.trace == straight.trace
    assert resumed.history == straight.history
    assert _states_equal(resumed.model.state_dict(), straight.model.state_dict())
    assert _states_equal(resumed.best_state, straight.best_state)


def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_dataset):
    result = train(tiny_dataset, None, tiny_config)
    save_checkpoint(result.best, tmp_path / "best.ckpt")
    loaded = load_checkpoint(tmp_path / "best.ckpt")
    assert loaded.config == result.best.config and loaded.dims == result.best.dims
    m1, m2 = result.best.build_model(), loaded.build_model()
    bank1, bank2 = m1.memory_bank(tiny_dataset), m2.memory_bank(tiny_dataset)
    assert np.array_equal(m1.predict(tiny_dataset, bank1), m2.predict(tiny_dataset, bank2))
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_degenerate_batches_are_skipped_not_fatal(tiny_config):
    ds = generate_synthetic(6, TINY_DIMS, 1.0, seed=0)
    # make every label positive: no negatives anywhere, contrastive terms all skipped
    pos = Dataset("train", [Sample(s.id, s.features, abs(s.label)) for s in ds], ds.dims)
    t = Trainer(pos, None, tiny_config.replace(epochs=1, batch_size=3))
    t.fit()
    assert all(int(r["skipped_terms"]) == 27 for r in t.log)
    assert all(float(r["l_ccrl"]) == 0.0 for r in t.log)


@pytest.mark.parametrize("variant", ["infonce", "none"])
def test_other_contrastive_variants_train(tiny_config, tiny_dataset, variant):
    res = train(tiny_dataset, None, tiny_config.replace(contrastive_variant=variant))
    assert all(np.isfinite(float(r["l_total"])) for r in res.log)
    if variant == "none":
        assert all(float(r["l_ccrl"]) == 0.0 for r in res.log)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_reduces_loss(seed):
    ds = generate_synthetic(200, TINY_DIMS, 2.0, seed=seed)
    cfg = ModelConfig(d_model=8, d_shared=8, prompt_len=4, ffn_mult=2, epochs=30, seed=seed)
    hist = Trainer(ds, None, cfg).fit().history
    assert hist[-1]["train_l_msa"] < hist[0]["train_l_msa"]


def test_similarity_summary():
    trace = [
        {"step": 1, "pos_sim": "0.2", "neg_sim": "-0.1"},
        {"step": 2, "pos_sim": "0.4", "neg_sim": ""},
        {"step": 3, "pos_sim": "0.6", "neg_sim": "-0.5"},
    ]
    s = epoch_similarity_summary(trace, n_train=4, batch_size=2)
    assert [r["epoch"] for r in s] == [1, 2]
    assert s[0]["mean_pos_sim"] == pytest.approx(0.3) and s[0]["mean_neg_sim"] == pytest.approx(-0.1)
    assert s[1]["mean_neg_sim"] == pytest.approx(-0.5)


def test_trainer_rejects_tiny_train_set(tiny_config):
    with pytest.raises(ConfigurationError):
        Trainer(generate_synthetic(1, TINY_DIMS, 1.0, seed=0), None, tiny_config)


def test_pool_from_bank(tiny_config, tiny_dataset):
    model = RetrievalAugmentedModel(TINY_DIMS, tiny_config)
    pool = Pool.from_bank(model.memory_bank(tiny_dataset))
    assert pool.ids == [s.id for s in tiny_dataset]
    assert isinstance(Checkpoint(tiny_config, TINY_DIMS, model.state_dict()).build_model(), RetrievalAugmentedModel)
