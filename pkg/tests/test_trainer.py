import functools
import io
import os
from pathlib import Path
from typing import Any, Tuple

import numpy as np
import pytest

from chainrules import miner, model, sampler, trainer, world
from chainrules.kg import Kg
from chainrules.model import ModelConfig, checkpoint
from chainrules.trainer import TrainConfig


def tiny(**kw: Any) -> TrainConfig:
    base = dict(d=8, epochs=3, batch_size=64, samples=200, learning_rate=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs(small_kg: Kg) -> None:
    cfg = tiny(epochs=0)
    result = trainer.fit(small_kg, cfg)
    assert result.log == []
    expected = model.init_params(
        cfg.model_config(),
        small_kg.num_relations,
        np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0]),
    )
    for k, v in expected.items():
        assert np.array_equal(result.params[k], v)


def test_fit_is_deterministic(tmp_path: Path, small_kg: Kg) -> None:
    first = os.path.join(tmp_path, "a.npz")
    second = os.path.join(tmp_path, "b.npz")
    trainer.fit(small_kg, tiny(), checkpoint_path=first, provenance="p")
    trainer.fit(small_kg, tiny(), checkpoint_path=second, provenance="p")
    assert open(first, "rb").read() == open(second, "rb").read()
    loaded = checkpoint.load(first, small_kg.relations)
    assert loaded.config == tiny().model_config()


def test_loss_falls(chain_kg: Kg) -> None:
    result = trainer.fit(chain_kg, tiny(epochs=40, open_ratio=0.0, samples=100))
    assert len(result.log) == 40
    assert [row.epoch for row in result.log] == list(range(1, 41))
    assert result.log[-1].loss < result.log[0].loss


def test_pre_sampled_and_resampled(small_kg: Kg) -> None:
    cfg = tiny(resample_every=1, checkpoint_every=1)
    samples = sampler.sample_paths(small_kg, cfg.sampler_config(0))
    assert len(trainer.fit(small_kg, cfg, samples=samples).log) == 3
    assert cfg.sampler_config(1).seed != cfg.sampler_config(2).seed


def test_divergence_keeps_last_good(
    tmp_path: Path, small_kg: Kg, monkeypatch: pytest.MonkeyPatch
) -> None:
    original = trainer._batch_loss_and_grad
    calls = {"n": 0}

    def flaky(*args: Any, **kw: Any) -> Any:
        calls["n"] += 1
        if calls["n"] > 4:
            raise trainer.NumericalError("loss is not finite")
        return original(*args, **kw)

    # One batch per body length, two lengths: the fifth call is in epoch 3.
    monkeypatch.setattr(trainer, "_batch_loss_and_grad", flaky)
    path = os.path.join(tmp_path, "m.npz")
    with pytest.raises(trainer.TrainingDiverged) as e:
        trainer.fit(small_kg, tiny(epochs=5, batch_size=1000), checkpoint_path=path)
    assert e.value.epoch == 3
    saved = checkpoint.load(path)
    for k, v in e.value.last_good.items():
        assert np.array_equal(saved.params[k], v)


def test_write_log() -> None:
    out = io.StringIO()
    trainer.write_log([trainer.LogRow(1, 0.5, 1.25), trainer.LogRow(2, 0.25, 2.5)], out)
    assert out.getvalue() == "epoch,loss,seconds\n1,0.5,1.250\n2,0.25,2.500\n"


def test_config_validation() -> None:
    with pytest.raises(ValueError):
        tiny(batch_size=0)
    with pytest.raises(ValueError):
        tiny(window_size=1)
    with pytest.raises(ValueError):
        tiny(open_ratio=2.0)


@pytest.mark.slow
def test_step_time_scales_with_dimension() -> None:
    spec = world.WorldSpec(entities=600, queries_per_hop=0)
    kg = world.generate(spec).train
    batch = sampler.sample_paths(kg, sampler.SamplerConfig(count=500))
    times = []
    for d in (64, 128):
        cfg = ModelConfig(d=d)
        params = model.init_params(cfg, kg.num_relations, np.random.default_rng(0))
        times.append(trainer.step_time(params, cfg, batch, repeats=3))
    assert times[1] <= 5 * times[0]


def test_periodic_checkpoints(tmp_path: Path, small_kg: Kg) -> None:
    path = os.path.join(tmp_path, "m.npz")
    trainer.fit(small_kg, tiny(epochs=4, checkpoint_every=2), checkpoint_path=path)
    assert trainer.epoch_checkpoint_path(path, 2) == os.path.join(tmp_path, "m.e0002.npz")
    assert sorted(os.listdir(tmp_path)) == ["m.e0002.npz", "m.e0004.npz", "m.npz"]
    final = checkpoint.load(path)
    last = checkpoint.load(trainer.epoch_checkpoint_path(path, 4))
    for k, v in final.params.items():
        assert np.array_equal(last.params[k], v)


@functools.lru_cache(maxsize=None)
def family_fit() -> Tuple[world.World, TrainConfig, trainer.FitResult]:
    generated = world.generate(world.WorldSpec(queries_per_hop=0))
    cfg = TrainConfig(
        d=64,
        epochs=500,
        learning_rate=1e-3,
        batch_size=500,
        samples=10000,
        resample_every=100,
    )
    return generated, cfg, trainer.fit(generated.train, cfg)


@pytest.mark.slow
def test_family_loss_falls_by_median() -> None:
    _, _, result = family_fit()
    losses = [row.loss for row in result.log]
    tenth = len(losses) // 10
    assert np.median(losses[-tenth:]) < np.median(losses[:tenth])


@pytest.mark.slow
def test_family_loss_threshold() -> None:
    _, _, result = family_fit()
    assert min(row.loss for row in result.log) < 0.3


@pytest.mark.slow
def test_family_grandma_composition() -> None:
    generated, cfg, result = family_fit()
    relations = generated.train.relations
    mother = relations.id("hasMother")
    grandma = relations.id("hasGrandma")
    theta = miner.score_rule(result.params, cfg.model_config(), [mother, mother])
    # Slot 0 is the null head.
    assert int(np.argmax(theta[1:])) == grandma
    matrix = model.export_attention(result.params, cfg.model_config())
    row = mother * generated.train.num_relations + mother
    assert int(np.argmax(matrix[row, 1:])) == grandma
