import pytest

from cagkit.config import ModelConfig, TrainConfig, config_hash
from cagkit.errors import ValidationError


def test_default_config_valid():
    c = ModelConfig()
    assert c.d_model == c.n_heads * c.head_dim
    assert c.vocab_size == 259


def test_dimension_mismatch_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(d_model=64, n_heads=4, head_dim=8)


def test_odd_head_dim_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(d_model=30, n_heads=2, head_dim=15)


def test_wrong_vocab_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(vocab_size=1000)


def test_nonpositive_fields_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValidationError):
        ModelConfig(rope_theta=-1.0)


def test_train_config_ranges():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)


def test_config_hash_deterministic():
    assert config_hash(ModelConfig()) == config_hash(ModelConfig())


def test_config_hash_sensitive_to_each_field():
    base = ModelConfig()
    variants = [
        ModelConfig(d_model=128, n_heads=8),
        ModelConfig(n_layers=2),
        ModelConfig(head_dim=32, n_heads=2),
        ModelConfig(d_ffn=512),
        ModelConfig(max_context=4096),
        ModelConfig(rope_theta=500.0),
        ModelConfig(init_seed=1),
    ]
    seen = {config_hash(base)}
    for v in variants:
        h = config_hash(v)
        assert h not in seen, v
        seen.add(h)


def test_config_hash_fits_u64():
    h = config_hash(ModelConfig(init_seed=123456789))
    assert 0 <= h < 2 ** 64


def test_frozen():
    c = ModelConfig()
    with pytest.raises(Exception):
        c.d_model = 128
