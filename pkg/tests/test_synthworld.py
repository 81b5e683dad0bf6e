import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibrl.errors import ValidationError
from calibrl.synthworld import (
    Instance,
    TaskSpec,
    bayes_posterior,
    make_task_spec,
    monte_carlo_bayes_accuracy,
    read_instances,
    sample_instances,
    shift_spec,
    spec_from_toml,
    spec_to_toml,
    write_instances,
)

# Bayes accuracy E[max softmax(u / tau)] for K=4, u ~ N(0, I), estimated
# with 10^6 Gumbel-max label draws (independent of the package); sd ~ 5e-4.
BAYES_ACC_ORACLE = {0.8: 0.569615, 0.375: 0.750747, 1.2: 0.476987}

# softmax((1, .5, 0, -.5) / 0.8) at 40 significant digits (mpmath)
SOFTMAX_ORACLE = (
    0.5062980458803837034,
    0.2710018152943074436,
    0.14505681878567054022,
    0.077643320039638312777,
)


def test_defaults_filled():
    spec = make_task_spec({"num_options": 4})
    assert spec.num_options == 4
    assert spec.label_temperature == 0.8
    assert spec.obs_noise == 0.0
    assert spec.trace_length == 4
    assert spec.reasoning_vocab_size == 8
    assert spec.latent_dim == 4
    assert spec.latent_mean == (0.0, 0.0, 0.0, 0.0)


def test_defaults_track_num_options():
    spec = make_task_spec({"num_options": 2})
    assert spec.reasoning_vocab_size == 4
    assert len(spec.latent_mean) == 2


@pytest.mark.parametrize(
    "cfg, key",
    [
        ({"num_options": 1}, "num_options"),
        ({"label_temperature": 0.0}, "label_temperature"),
        ({"label_temperature": -1.0}, "label_temperature"),
        ({"trace_length": 0}, "trace_length"),
        ({"latent_scale": 0.0}, "latent_scale"),
        ({"obs_noise": -0.1}, "obs_noise"),
        ({"num_options": 4, "reasoning_vocab_size": 3}, "reasoning_vocab_size"),
    ],
)
def test_validation_names_key(cfg, key):
    with pytest.raises(ValidationError, match=key):
        make_task_spec(cfg)


def test_num_options_message():
    with pytest.raises(ValidationError, match="num_options must be ≥ 2"):
        make_task_spec({"num_options": 1})


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        make_task_spec({"num_option": 4})


def test_stream_deterministic():
    spec = make_task_spec({"num_options": 4})
    a = sample_instances(spec, 500, seed=7)
    b = sample_instances(spec, 500, seed=7)
    assert [i.to_json() for i in a] == [i.to_json() for i in b]
    c = sample_instances(spec, 500, seed=8)
    assert a[0].to_json() != c[0].to_json()


def test_slices_match_full_stream():
    spec = make_task_spec({"num_options": 3})
    full = sample_instances(spec, 20, seed=1)
    part = sample_instances(spec, 5, seed=1, start_id=10)
    assert [i.to_json() for i in part] == [i.to_json() for i in full[10:15]]


def test_identical_specs_identical_streams():
    a = make_task_spec({"num_options": 4, "label_temperature": 0.5})
    b = make_task_spec({"num_options": 4, "label_temperature": 0.5})
    assert [i.to_json() for i in sample_instances(a, 10, 3)] == [i.to_json() for i in sample_instances(b, 10, 3)]


def test_n_must_be_positive(spec4):
    with pytest.raises(ValidationError):
        sample_instances(spec4, 0)


def test_zero_noise_features_equal_latent():
    spec = make_task_spec({"obs_noise": 0.0})
    for inst in sample_instances(spec, 50, seed=2):
        assert np.array_equal(inst.features, inst.latent)


def test_noisy_features_differ():
    spec = make_task_spec({"obs_noise": 0.5})
    inst = sample_instances(spec, 1, seed=2)[0]
    assert not np.array_equal(inst.features, inst.latent)


def test_low_temperature_gold_is_argmax():
    spec = make_task_spec({"label_temperature": 1e-6})
    insts = sample_instances(spec, 500, seed=4)
    assert all(i.gold == int(np.argmax(i.latent)) for i in insts)


def test_posterior_symmetric():
    spec = make_task_spec({"num_options": 4})
    inst = Instance(0, np.zeros(4), np.zeros(4), 0, np.zeros(4))
    assert np.allclose(bayes_posterior(spec, inst), 0.25, atol=1e-15)


def test_posterior_dominant_score():
    spec = make_task_spec({"num_options": 4, "label_temperature": 0.1})
    u = np.array([10.0, 0, 0, 0])
    post = bayes_posterior(spec, Instance(0, u, u, 0, np.zeros(4)))
    assert np.allclose(post, [1, 0, 0, 0], atol=1e-9)


def test_posterior_matches_high_precision_softmax():
    spec = make_task_spec({"num_options": 4, "label_temperature": 0.8})
    u = np.array([1.0, 0.5, 0.0, -0.5])
    post = bayes_posterior(spec, Instance(0, u, u, 0, np.zeros(4)))
    assert np.allclose(post, SOFTMAX_ORACLE, rtol=0, atol=1e-15)


def test_posterior_dimension_mismatch():
    spec = make_task_spec({"num_options": 4})
    inst = Instance(0, np.zeros(3), np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValidationError):
        bayes_posterior(spec, inst)


def test_posterior_is_distribution():
    spec = make_task_spec({"num_options": 5, "obs_noise": 0.7})
    for inst in sample_instances(spec, 40, seed=9):
        assert abs(inst.posterior.sum() - 1) < 1e-9
        assert inst.posterior.min() >= 0
        assert np.allclose(inst.posterior, bayes_posterior(spec, inst))


def test_noisy_posterior_flatter_than_noise_free():
    # integrating over latent uncertainty can only soften the posterior
    clean = make_task_spec({"obs_noise": 0.0})
    noisy = make_task_spec({"obs_noise": 1.0})
    u = np.array([2.0, 0.0, -1.0, 0.5])
    p_clean = bayes_posterior(clean, Instance(0, u, u, 0, np.zeros(4)))
    p_noisy = bayes_posterior(noisy, Instance(0, u, u, 0, np.zeros(4)))
    assert p_noisy.max() < p_clean.max()
    assert np.argmax(p_noisy) == np.argmax(p_clean)


@pytest.mark.parametrize("tau", [0.8, 0.375])
def test_monte_carlo_accuracy_matches_oracle(tau):
    spec = make_task_spec({"num_options": 4, "label_temperature": tau})
    est = monte_carlo_bayes_accuracy(spec, n=1_000_000, seed=1)
    assert abs(est - BAYES_ACC_ORACLE[tau]) < 0.003


def test_empirical_argmax_accuracy_close_to_bayes():
    spec = make_task_spec({"num_options": 4, "label_temperature": 0.8})
    insts = sample_instances(spec, 100_000, seed=11)
    acc = np.mean([int(np.argmax(i.posterior)) == i.gold for i in insts])
    assert abs(acc - monte_carlo_bayes_accuracy(spec, 1_000_000)) < 0.01


def test_posterior_self_calibration():
    spec = make_task_spec({"num_options": 4, "label_temperature": 0.8})
    insts = sample_instances(spec, 100_000, seed=12)
    post = np.stack([i.posterior for i in insts])
    gold = np.array([i.gold for i in insts])
    p = post.ravel()
    hit = (gold[:, None] == np.arange(4)[None]).ravel()
    edges = np.linspace(0, 1, 11)
    which = np.clip(np.digitize(p, edges) - 1, 0, 9)
    for b in range(10):
        sel = which == b
        if sel.sum() < 500:
            continue
        freq, mean_p = hit[sel].mean(), p[sel].mean()
        se = math.sqrt(max(mean_p * (1 - mean_p), 1e-6) / sel.sum())
        assert abs(freq - mean_p) < 4 * se + 1e-3


def test_shift_mean_keeps_structure():
    spec = make_task_spec({"num_options": 4})
    shifted = shift_spec(spec, {"latent_mean_offset": 0.5})
    assert shifted.latent_mean == (0.5, 0.5, 0.5, 0.5)
    assert shifted.num_options == spec.num_options
    assert shifted.trace_length == spec.trace_length
    assert shifted.reasoning_vocab_size == spec.reasoning_vocab_size
    assert shifted.seed_namespace != spec.seed_namespace


def test_shift_explicit_mean():
    spec = make_task_spec({"num_options": 2})
    assert shift_spec(spec, {"latent_mean": [1.0, -1.0]}).latent_mean == (1.0, -1.0)


@pytest.mark.parametrize("key", ["num_options", "trace_length", "reasoning_vocab_size", "latent_dim"])
def test_shift_frozen_fields(key):
    spec = make_task_spec({"num_options": 4})
    with pytest.raises(ValidationError):
        shift_spec(spec, {key: 5})


def test_shift_temperature_lowers_bayes_accuracy():
    spec = make_task_spec({"num_options": 4, "label_temperature": 0.8})
    hot = shift_spec(spec, {"label_temperature": 1.2})
    a_src = monte_carlo_bayes_accuracy(spec, 1_000_000, seed=2)
    a_hot = monte_carlo_bayes_accuracy(hot, 1_000_000, seed=2)
    assert abs(a_hot - BAYES_ACC_ORACLE[1.2]) < 0.003
    assert a_hot < a_src - 0.05


def test_shift_stream_is_fresh():
    spec = make_task_spec({"num_options": 4})
    same = shift_spec(spec, {"label_temperature": spec.label_temperature})
    a = sample_instances(spec, 3, 0)
    b = sample_instances(same, 3, 0)
    assert not np.array_equal(a[0].latent, b[0].latent)


def test_jsonl_round_trip(tmp_path, spec4):
    insts = sample_instances(spec4, 12, seed=3)
    path = write_instances(insts, tmp_path / "x.jsonl")
    back = read_instances(path)
    assert [i.to_json() for i in back] == [i.to_json() for i in insts]
    assert set(insts[0].to_json()) == {"id", "u", "x_obs", "gold", "posterior"}


def test_toml_round_trip(spec4):
    text = spec_to_toml(spec4)
    assert text.lstrip().startswith("[task]")
    assert spec_from_toml(text) == spec4


@settings(max_examples=30, deadline=None)
@given(
    k=st.integers(2, 6),
    tau=st.floats(0.05, 3.0),
    noise=st.sampled_from([0.0, 0.3]),
    seed=st.integers(0, 2**32),
)
def test_instance_invariants(k, tau, noise, seed):
    spec = make_task_spec({"num_options": k, "label_temperature": tau, "obs_noise": noise})
    for inst in sample_instances(spec, 5, seed):
        assert 0 <= inst.gold < k
        assert abs(inst.posterior.sum() - 1) < 1e-9
        assert np.all(inst.posterior >= 0)


def test_taskspec_is_frozen(spec4):
    with pytest.raises(Exception):
        spec4.num_options = 5
    assert isinstance(spec4, TaskSpec)
