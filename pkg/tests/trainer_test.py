import json
import math

import numpy as np
import pytest

from multiscale_anomaly import DISCRIMINATOR
from multiscale_anomaly import GENERATOR
from multiscale_anomaly import Instance
from multiscale_anomaly import Label
from multiscale_anomaly import PROB_MAX
from multiscale_anomaly import BlockForward
from multiscale_anomaly import BlockState
from multiscale_anomaly import Checkpoint
from multiscale_anomaly import CheckpointError
from multiscale_anomaly import ConfigError
from multiscale_anomaly import DiscriminatorParams
from multiscale_anomaly import ModelParameters
from multiscale_anomaly import NormStatistics
from multiscale_anomaly import Rng
from multiscale_anomaly import RnnParams
from multiscale_anomaly import Tape
from multiscale_anomaly import Tensor
from multiscale_anomaly import Trainer
from multiscale_anomaly import TrainingLog
from multiscale_anomaly import backward
from multiscale_anomaly import binary_cross_entropy
from multiscale_anomaly import block_losses
from multiscale_anomaly import forward_block
from multiscale_anomaly import generate_synthetic
from multiscale_anomaly import load_checkpoint
from multiscale_anomaly import save_checkpoint
from multiscale_anomaly import soft_cross_entropy
from multiscale_anomaly import soft_relative_entropy

from gradcheck import check_gradient
from gradcheck import check_sampled_gradients


def _entropy(t):
    s = 1 / (1 + np.exp(-np.asarray(t)))
    return float(-(s * np.log(s) + (1 - s) * np.log(1 - s)).sum())


def test_soft_cross_entropy_equal_inputs():
    assert soft_cross_entropy(Tensor(np.zeros(5)), Tensor(
        np.zeros(5))).item() == pytest.approx(5 * math.log(2), abs=1e-12)
    t = np.array([0.3, -1.5, 2.0])
    at_target = soft_cross_entropy(Tensor(t), Tensor(t)).item()
    assert at_target == pytest.approx(_entropy(t), abs=1e-12)
    for shift in (-0.5, 0.1, 1.0):
        assert soft_cross_entropy(Tensor(t), Tensor(t + shift)).item() > \
            at_target


def test_soft_cross_entropy_oracle():
    rng = np.random.default_rng(31)
    for _ in range(5):
        t, p = rng.normal(size=4), rng.normal(size=4)
        expected = 0.0
        for ti, pi in zip(t, p):
            st = 1 / (1 + math.exp(-ti))
            sp = 1 / (1 + math.exp(-pi))
            expected -= st * math.log(sp) + (1 - st) * math.log(1 - sp)
        assert soft_cross_entropy(Tensor(t), Tensor(p)).item() == \
            pytest.approx(expected, abs=1e-12)


def test_soft_cross_entropy_rows():
    rows = soft_cross_entropy(Tensor(np.zeros((3, 2))), Tensor(np.zeros(
        (3, 2))))
    np.testing.assert_allclose(rows.values, [2 * math.log(2)] * 3)
    with pytest.raises(ValueError):
        soft_cross_entropy(Tensor(np.zeros(3)), Tensor(np.zeros(2)))


def test_soft_relative_entropy():
    t = np.array([[0.3, -1.5, 2.0], [4.0, -4.0, 0.0]])
    assert soft_relative_entropy(Tensor(t), Tensor(t)).values.tolist() == [
        0.0, 0.0
    ]
    p = t + np.array([0.5, -0.2, 1.0])
    expected = (soft_cross_entropy(Tensor(t), Tensor(p)).values -
                [_entropy(row) for row in t])
    np.testing.assert_allclose(
        soft_relative_entropy(Tensor(t), Tensor(p)).values, expected,
        atol=1e-12)
    # The cross entropy of an outlying target can be below that of a
    # centered one; the relative entropy is not.
    far, near = Tensor([5.0]), Tensor([0.0])
    assert soft_cross_entropy(far, Tensor([1.0])).item() < \
        soft_cross_entropy(near, near).item()
    assert soft_relative_entropy(far, Tensor([1.0])).item() > \
        soft_relative_entropy(near, near).item()
    with pytest.raises(ValueError):
        soft_relative_entropy(Tensor(np.zeros(3)), Tensor(np.zeros(2)))


def test_binary_cross_entropy():
    for label in (0, 1):
        assert binary_cross_entropy(Tensor(0.5), label).item() == \
            pytest.approx(math.log(2))
    assert binary_cross_entropy(Tensor(PROB_MAX), 1).item() == \
        pytest.approx(1e-7, rel=1e-6)
    assert binary_cross_entropy(Tensor(1.0), 1).item() == \
        pytest.approx(1e-7, rel=1e-6)
    assert binary_cross_entropy(Tensor(0.9), 0).item() == pytest.approx(
        -math.log(0.1))
    assert binary_cross_entropy(Tensor(0.0), 0).item() >= 0


def _zero_discriminator(model):
    return DiscriminatorParams(
        *(Tensor(np.zeros(model[name].shape))
          for name in ('disc.W_i', 'disc.b_i', 'disc.W_b', 'disc.b_b')))


def test_block_losses_perfect_generator(tiny_model, tiny_stream):
    forward = forward_block(tiny_model, tiny_stream[:10],
                            BlockState.zeros(tiny_model.config.hidden))
    perfect = BlockForward(forward.encoding, forward.real,
                           forward.instance_vectors, forward.noise,
                           forward.real)
    losses = block_losses(perfect, _zero_discriminator(tiny_model))
    vectors = forward.instance_vectors.values
    np.testing.assert_allclose(losses.instance_g.values,
                               [_entropy(row) for row in vectors],
                               atol=1e-12)
    assert losses.block_g.item() == pytest.approx(
        _entropy(forward.block_vector.values), abs=1e-12)
    np.testing.assert_allclose(losses.instance_d.values, math.log(2))
    assert losses.block_d.item() == pytest.approx(math.log(2))
    assert losses.total_d.item() == pytest.approx(2 * math.log(2))


def test_block_losses_totals(tiny_model, tiny_stream):
    forward = forward_block(tiny_model, tiny_stream[:10],
                            BlockState.zeros(tiny_model.config.hidden),
                            Rng(1))
    losses = block_losses(forward, tiny_model.discriminator)
    assert (losses.instance_g.values >= 0).all()
    assert losses.total_g.item() == pytest.approx(
        losses.instance_g.values.mean() + losses.block_g.item(), abs=1e-12)
    assert losses.total_d.item() == pytest.approx(
        losses.instance_d.values.mean() + losses.block_d.item(), abs=1e-12)
    row = losses.to_row()
    assert row['loss_g_instance'] == losses.mean_instance_g

    single = forward_block(tiny_model, tiny_stream[:1],
                           BlockState.zeros(tiny_model.config.hidden))
    single_losses = block_losses(single, tiny_model.discriminator)
    assert single_losses.mean_instance_g == single_losses.instance_g.values[0]

    real_only = block_losses(forward,
                             tiny_model.discriminator,
                             disc_terms='real')
    assert real_only.instance_d.shape == (10, )

    adversarial = block_losses(forward,
                               tiny_model.discriminator,
                               adversarial_weight=0.5)
    assert adversarial.total_g.item() > losses.total_g.item()


def test_block_losses_detached(tiny_model, tiny_stream):
    with Tape() as tape:
        forward = forward_block(tiny_model, tiny_stream[:10],
                                BlockState.zeros(tiny_model.config.hidden),
                                Rng(2))
        losses = block_losses(forward,
                              tiny_model.discriminator,
                              detach_generator=True)
        grads = backward(losses.total_d, tape)
    for name in tiny_model.partition_names(GENERATOR):
        assert tiny_model[name] not in grads, name
    for name in tiny_model.partition_names(DISCRIMINATOR):
        assert tiny_model[name] in grads, name


@pytest.mark.parametrize('name', ['ae.W_enc', 'attn_r.W', 'embedding'])
def test_generator_loss_gradient(tiny_model, tiny_stream, name):
    instances = tiny_stream[:6]
    memory = Tensor(np.linspace(-0.3, 0.3, tiny_model.config.hidden))

    def build(x):
        model = tiny_model.replace({name: x})
        forward = forward_block(model, instances, memory)
        return block_losses(forward, model.discriminator).total_g

    check_gradient(build, tiny_model[name].values)


def _random_instances(rng, count, attribute_count=3, dimension=30):
    return [
        Instance([
            rng.integers(0, dimension, size=rng.integers(1, 4)).tolist()
            for _ in range(attribute_count)
        ], Label.NORMAL, t) for t in range(count)
    ]


@pytest.mark.parametrize('loss', ['total_g', 'total_d'])
@pytest.mark.parametrize('seed', range(20))
def test_loss_gradients_all_parameters(smoke_config, seed, loss,
                                       monkeypatch):
    config = smoke_config.with_values(init_scale=0.3,
                                      seed=seed,
                                      rnn_cell='gru' if seed % 2 else 'tanh')
    generator_loss = ('relative_entropy'
                      if seed % 4 < 2 else 'cross_entropy')
    model = ModelParameters.initialize(config)
    rng = np.random.default_rng(seed)
    instances = _random_instances(rng, 5)
    memory = Tensor(rng.uniform(-0.5, 0.5, config.hidden))
    # The resembled chain runs on a constant copy of the RNN, so its values
    # stay fixed while the RNN parameters are perturbed.
    frozen = model.rnn.snapshot()
    monkeypatch.setattr(RnnParams, 'snapshot', lambda self: frozen)

    def build(params):
        changed = model.replace(params)
        forward = forward_block(changed, instances, memory, Rng(seed))
        losses = block_losses(forward,
                              changed.discriminator,
                              adversarial_weight=0.5,
                              generator_loss=generator_loss)
        return getattr(losses, loss)

    errors = check_sampled_gradients(build, model.params, rng)
    assert set(errors) == set(model.names)
    assert {'embedding', 'attn_f.W', 'attn_a.u', 'attn_r.b', 'ae.W_dec',
            'disc.W_b'} <= set(errors)


def test_generator_step_keeps_discriminator(smoke_config, tiny_stream):
    trainer = Trainer(smoke_config)
    instances = tiny_stream[:10]
    disc = trainer.model.partition_names(DISCRIMINATOR)
    gen = trainer.model.partition_names(GENERATOR)

    disc_digest = trainer.model.digest(disc)
    gen_digest = trainer.model.digest(gen)
    trainer.generator_step(instances)
    assert trainer.model.digest(disc) == disc_digest
    assert trainer.model.digest(gen) != gen_digest

    gen_digest = trainer.model.digest(gen)
    trainer.discriminator_step(instances)
    assert trainer.model.digest(gen) == gen_digest
    assert trainer.model.digest(disc) != disc_digest


def test_no_steps_keeps_parameters(smoke_config, tiny_stream):
    config = smoke_config.with_values(gen_steps_per_block=0,
                                      disc_steps_per_block=0)
    trainer = Trainer(config)
    initial = trainer.model
    log = trainer.train_stream(tiny_stream[:10])
    assert trainer.model == initial
    assert len(log) == 1
    assert log.rows[0]['block_index'] == 0
    assert all(math.isfinite(v) for v in log.rows[0].values())


def test_train_stream_deterministic(smoke_config, tiny_stream):
    a = Trainer(smoke_config)
    a.train_stream(tiny_stream[:30])
    b = Trainer(smoke_config)
    b.train_stream(tiny_stream[:30])
    assert a.model == b.model
    np.testing.assert_array_equal(a.memory.values, b.memory.values)
    assert a.log.rows == b.log.rows

    c = Trainer(smoke_config.with_seed(1))
    c.train_stream(tiny_stream[:30])
    assert c.model != a.model


def test_train_stream_epochs(smoke_config, tiny_stream):
    trainer = Trainer(smoke_config.with_values(epochs=2))
    log = trainer.train_stream(tiny_stream[:25])
    assert len(log) == 6
    assert [row['block_index'] for row in log.rows] == list(range(6))
    assert trainer.is_done
    assert trainer.block_index == 0


def test_train_block_updates_statistics(smoke_config, tiny_stream):
    trainer = Trainer(smoke_config)
    assert trainer.statistics.count == 0
    trainer.train_stream(tiny_stream[:30], stop_after=1)
    forward = forward_block(trainer.model, tiny_stream[:10],
                            BlockState.zeros(smoke_config.hidden))
    features = forward.encoding.features.values
    statistics = trainer.statistics
    assert statistics.count == 1
    assert statistics.width == smoke_config.instance_dim
    np.testing.assert_allclose(statistics.mean, features.mean(axis=0))
    np.testing.assert_allclose(statistics.var, features.var(axis=0))

    trainer.train_stream(tiny_stream[:30], stop_after=1)
    assert trainer.statistics.count == 2
    assert not np.array_equal(trainer.statistics.mean, statistics.mean)


def test_train_stream_empty(smoke_config):
    with pytest.raises(ConfigError):
        Trainer(smoke_config).train_stream([])


def test_training_reduces_generator_loss(smoke_config):
    stream = generate_synthetic(3, 50, seed=2)
    trainer = Trainer(smoke_config.with_values(epochs=3))
    log = trainer.train_stream(stream)
    total = log.total_g()
    assert len(total) == 45
    assert np.median(total[-5:]) < np.median(total[:5])


def test_training_log_round_trip(tmp_path, smoke_config, tiny_stream):
    trainer = Trainer(smoke_config)
    trainer.train_stream(tiny_stream[:20])
    path = trainer.log.save(tmp_path / 'log.csv')
    loaded = TrainingLog.load(path)
    assert list(loaded.to_frame().columns) == list(TrainingLog.columns)
    assert [row['block_index'] for row in loaded.rows] == [0, 1]
    np.testing.assert_allclose(loaded.total_g(), trainer.log.total_g())


def test_checkpoint_byte_identical(tmp_path, smoke_config, tiny_stream):
    trainer = Trainer(smoke_config)
    trainer.train_stream(tiny_stream[:20])
    first = save_checkpoint(trainer.checkpoint(), tmp_path / 'a.json')
    loaded = load_checkpoint(first)
    second = save_checkpoint(loaded, tmp_path / 'b.json')
    assert first.read_bytes() == second.read_bytes()
    assert loaded.model == trainer.model
    assert loaded.config == trainer.config
    assert loaded.block_index == trainer.block_index
    np.testing.assert_array_equal(loaded.memory.values, trainer.memory.values)
    assert loaded.statistics == trainer.statistics
    assert loaded.statistics.count == 2


def test_checkpoint_resume(tmp_path, smoke_config, tiny_stream):
    instances = tiny_stream[:50]
    uninterrupted = Trainer(smoke_config)
    uninterrupted.train_stream(instances)

    first = Trainer(smoke_config)
    first.train_stream(instances, stop_after=2)
    assert len(first.log) == 2
    path = first.checkpoint().save(tmp_path / 'checkpoint.json')
    resumed = Trainer.from_checkpoint(Checkpoint.load(path))
    resumed.train_stream(instances)

    assert resumed.model == uninterrupted.model
    np.testing.assert_array_equal(resumed.memory.values,
                                  uninterrupted.memory.values)
    assert resumed.statistics == uninterrupted.statistics
    assert resumed.log.rows == uninterrupted.log.rows


def test_checkpoint_mismatched_config(tmp_path, smoke_config, tiny_stream):
    trainer = Trainer(smoke_config)
    checkpoint = Checkpoint.load(trainer.checkpoint().save(tmp_path /
                                                           'c.json'))
    with pytest.raises(ConfigError):
        Trainer.from_checkpoint(checkpoint, smoke_config.with_values(hidden=9))
    with pytest.raises(ConfigError):
        Trainer(smoke_config.with_values(embed_dim=5), model=checkpoint.model)


def test_checkpoint_errors(tmp_path, smoke_config):
    path = Trainer(smoke_config).checkpoint().save(tmp_path / 'c.json')
    data = json.loads(path.read_text())

    data['version'] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError) as e:
        Checkpoint.load(path)
    assert 'version' in str(e.value)

    path.write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)

    path.write_text('{ not json')
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)

    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / 'missing.json')

    data['version'] = Checkpoint.VERSION
    data['norm'] = NormStatistics.initial(3).to_json()
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError) as e:
        Checkpoint.load(path)
    assert '"norm"' in str(e.value)

    del data['norm']
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)

    data['norm'] = NormStatistics.initial(smoke_config.instance_dim).to_json()
    data['params']['embedding']['shape'] = [2, 2]
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)


def test_model_initialize(smoke_config):
    a = ModelParameters.initialize(smoke_config)
    b = ModelParameters.initialize(smoke_config)
    assert a == b
    assert a.digest() == b.digest()
    assert not a['rnn.b'].values.any()
    assert np.abs(a['embedding'].values).max() <= smoke_config.init_scale
    assert a['embedding'].shape == (30, smoke_config.embed_dim)
    assert 'attn_r.W' in a
    ablated = ModelParameters.initialize(
        smoke_config.with_values(no_relrep=True))
    assert 'attn_r.W' not in ablated
    assert ablated['ae.W_enc'].shape[0] == smoke_config.embed_dim
    with pytest.raises(ConfigError):
        ModelParameters.initialize(smoke_config.with_values(dimension=0))
