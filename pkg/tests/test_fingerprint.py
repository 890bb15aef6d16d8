import numpy as np
import pytest
import torch

from modelguard.authorization import authenticate, authentication_rates
from modelguard.data import ImageBatch
from modelguard.fingerprint import (AuthPolicy, FingerprintLibrary, GenConfig, GenerationError, allocate,
                                    allocation_for, build_library, capacity, from_tanh_space, generate_fingerprint,
                                    pick_seed_indices, tanh_box_search, to_tanh_space, validate_record)

# short searches keep the toy-model tests fast
FAST = GenConfig(max_iterations=300, search_steps=3)


def test_policy_validation():
    with pytest.raises(ValueError):
        AuthPolicy(confidences=(0.2, 0.9))
    with pytest.raises(ValueError):
        AuthPolicy(confidences=(0.2, 0.21))
    with pytest.raises(ValueError):
        AuthPolicy(tolerance=0)
    with pytest.raises(ValueError):
        AuthPolicy(legal_classes=())
    p = AuthPolicy(confidences=(0.4, 0.2))
    assert p.confidences == (0.2, 0.4) and p.T == 2
    assert AuthPolicy.from_dict(p.to_dict()) == p


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(initial_alpha=50)
    with pytest.raises(ValueError):
        GenConfig(max_iterations=0)
    assert GenConfig.for_cifar().alpha_range == (0.0, 1.0)
    assert GenConfig.for_mnist().learning_rate == 0.005


def test_allocation_examples():
    table = allocate(10, 3, (0.2, 0.3, 0.4))
    assert len(table) == 30
    assert table[1] == (0, 0.2)
    assert table[30] == (9, 0.4)
    assert table[9] == (2, 0.4)
    assert sorted(table) == list(range(1, 31))
    with pytest.raises(ValueError):
        allocate(10, 3, (0.2, 0.3))


def test_allocation_respects_legal_classes():
    table = allocation_for(AuthPolicy(legal_classes=(1, 3)))
    assert sorted(table) == [4, 5, 6, 10, 11, 12]
    assert {fo[0] for fo in table.values()} == {1, 3}


@pytest.mark.parametrize("k,eps,z1,z2,expected", [
    (10, 0.01, 0.10, 0.50, 200),
    (10, 0.02, 0.10, 0.50, 100),
    (1, 0.01, 0.10, 0.12, 1),
])
def test_capacity_examples(k, eps, z1, z2, expected):
    assert capacity(k, eps, z1, z2) == expected


def test_capacity_errors():
    with pytest.raises(ValueError):
        capacity(10, 0.01, 0.5, 0.1)
    with pytest.raises(ValueError):
        capacity(10, 0.0, 0.1, 0.5)


def test_tanh_round_trip_and_box():
    x = torch.linspace(0, 1, 101)
    np.testing.assert_allclose(from_tanh_space(to_tanh_space(x)).numpy(), x.numpy(), atol=1e-6)
    extreme = from_tanh_space(torch.tensor([-1e4, -30.0, 0.0, 30.0, 1e4]))
    assert extreme.min() >= 0 and extreme.max() <= 1


def test_seed_indices_avoid_target():
    labels = np.arange(100) % 10
    idx = pick_seed_indices(labels, 3, 20, np.random.default_rng(0))
    assert len(set(idx)) == 20 and np.all(labels[idx] != 3)
    with pytest.raises(ValueError):
        pick_seed_indices(np.full(5, 3), 3, 1, np.random.default_rng(0))


def test_confidence_outside_policy_is_rejected(toy_model, toy_data):
    with pytest.raises(ValueError):
        generate_fingerprint(toy_model, toy_data.pixels[0], 1, 0.9)
    with pytest.raises(ValueError):
        generate_fingerprint(toy_model, toy_data.pixels[0], 1, 0.25)
    with pytest.raises(ValueError):
        generate_fingerprint(toy_model, toy_data.pixels[0], 12, 0.2)


def test_search_output_stays_in_box(toy_model, toy_data):
    x = toy_data.pixels[:12]
    res = tanh_box_search(toy_model, x, [(y + 1) % 10 for y in toy_data.labels[:12]], [0.3] * 12,
                          learning_rate=0.005, alpha_range=(0, 40), initial_alpha=20, max_iterations=100,
                          search_steps=2, tolerance=0.005, random_start=0.3)
    assert res.images.min() >= 0.0 and res.images.max() <= 1.0
    assert res.images.shape == x.shape


def test_pinned_hits_are_verified(toy_model, toy_data):
    targets = [(y + 3) % 10 for y in toy_data.labels[:20]]
    res = tanh_box_search(toy_model, toy_data.pixels[:20], targets, [0.4] * 20, learning_rate=0.005,
                          alpha_range=(0, 40), initial_alpha=20, max_iterations=300, search_steps=3,
                          tolerance=0.005, random_start=0.3)
    assert res.success.sum() >= 3
    probs = toy_model.probabilities(res.images)
    for k in np.flatnonzero(res.success):
        assert probs[k].argmax() == targets[k]
        assert abs(probs[k, targets[k]] - 0.4) <= 0.005 + 1e-6


def test_search_leaves_model_untouched(toy_model, toy_data):
    before = [(p.detach().clone(), None if p.grad is None else p.grad.clone()) for p in toy_model.parameters()]
    tanh_box_search(toy_model, toy_data.pixels[:3], [1, 2, 3], [0.3] * 3, learning_rate=0.005,
                    alpha_range=(0, 40), initial_alpha=20, max_iterations=20, search_steps=1)
    for (value, grad), q in zip(before, toy_model.parameters()):
        assert torch.equal(value, q)
        assert (grad is None and q.grad is None) or torch.equal(grad, q.grad)


def test_generate_fingerprint(toy_model, toy_data):
    records = []
    for k in range(6):
        try:
            records.append(generate_fingerprint(toy_model, toy_data.pixels[k], (toy_data.labels[k] + 1) % 10, 0.4,
                                                FAST, user_id=1, seed=k))
        except GenerationError as exc:
            assert exc.residual >= 0
    assert records
    for rec in records:
        assert validate_record(toy_model, rec, 0.01)
        assert rec.image.min() >= 0 and rec.image.max() <= 1


def test_generation_error_carries_candidate(toy_model, toy_data):
    # a single iteration cannot reach the pinned confidence
    cfg = GenConfig(max_iterations=1, search_steps=1, random_start=0.0)
    with pytest.raises(GenerationError) as info:
        generate_fingerprint(toy_model, toy_data.pixels[0], (toy_data.labels[0] + 1) % 10, 0.2, cfg)
    assert info.value.candidate.shape == toy_data.pixels[0].shape


SMALL_POLICY = AuthPolicy(legal_classes=(0, 1), confidences=(0.3, 0.4))


@pytest.fixture(scope="module")
def small_library(toy_model, toy_data):
    return build_library(toy_model, toy_data, SMALL_POLICY, FAST, seed=0, retries=3)


def test_library_records_authenticate(small_library, toy_model):
    assert len(small_library) + len(small_library.failures) == 4
    assert len(small_library) >= 3
    for uid, rec in small_library.records.items():
        assert rec.user_id == uid
        assert (rec.target, rec.confidence) == allocation_for(SMALL_POLICY)[uid]
        assert authenticate(rec, toy_model, SMALL_POLICY) == uid


def test_library_is_deterministic(tmp_path, small_library, toy_model, toy_data):
    again = build_library(toy_model, toy_data, SMALL_POLICY, FAST, seed=0, retries=3)
    a = small_library.save(tmp_path / "a")
    b = again.save(tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_library_round_trip(tmp_path, small_library):
    small_library.config_hash = "abc"
    loaded = FingerprintLibrary.load(small_library.save(tmp_path / "lib"))
    assert loaded.policy == SMALL_POLICY and loaded.config_hash == "abc"
    assert sorted(loaded.records) == sorted(small_library.records)
    for uid, rec in loaded.records.items():
        np.testing.assert_array_equal(rec.image, small_library.records[uid].image)
        assert rec.image.dtype == np.float32


def test_empty_pool_is_rejected(toy_model):
    empty = ImageBatch(np.zeros((0, 28, 28, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        build_library(toy_model, empty, SMALL_POLICY, FAST)


def test_authentication_rates_shape(toy_model, toy_data):
    rows, res = authentication_rates(toy_model, toy_data, SMALL_POLICY, FAST, [(0, 0.3), (1, 0.4)], 3, seed=0)
    assert [r["user_id"] for r in rows] == [1, 4]
    assert all(0 <= r["authenticated"] <= 3 for r in rows)
    assert len(res.images) == 6
    assert rows[0]["authenticated"] == int(res.success[:3].sum())
