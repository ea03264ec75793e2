import numpy as np
import pytest

from conftest import make_base, random_network
from data import Split
from errors import InvalidInputError, InvariantViolationError, NumericError
from network import Layer, Network, backward, forward
from schemas import FisherLabels, SignificanceKind
from significance import (
    SignificanceStore,
    accumulate_signal,
    draw_fisher_labels,
    estimate_fisher_diag,
    load_anchor,
    load_significance,
    merge,
    sample_labels,
    save_document,
    take_anchor,
)


@pytest.fixture
def small_net():
    return random_network([20, 8, 10], np.random.default_rng(3))


@pytest.fixture
def small_split():
    return make_base(n_train=60, n_test=10).train


def store(weights, biases, kind=SignificanceKind.signal, tasks=(0,), n=1):
    return SignificanceStore([np.asarray(w, float) for w in weights], [np.asarray(b, float) for b in biases],
                             kind, tasks, n)


# ---------------- signal ----------------

def test_signal_on_hand_example():
    net = Network([Layer(np.array([[2.0, -3.0]]), np.array([0.5]), "identity")])
    data = Split(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]))
    sig = accumulate_signal(net, data, source_task=0)
    np.testing.assert_allclose(sig.weights[0], [[1.0, 1.5]])
    np.testing.assert_allclose(sig.biases[0], [2.5])
    assert sig.kind is SignificanceKind.signal
    assert sig.source_tasks == (0,)
    assert sig.n_examples == 2


def test_signal_matches_per_connection_loop():
    rng = np.random.default_rng(21)
    net = random_network([4, 5, 3], rng)
    inputs = rng.random((10, 4))
    sig = accumulate_signal(net, Split(inputs, np.zeros(10, dtype=np.int64)), batch_size=3)

    for k, layer in enumerate(net.layers):
        want_w = np.zeros_like(layer.weights)
        want_b = np.zeros_like(layer.biases)
        for x in inputs:
            signal = x
            for layer_before in net.layers[:k]:
                signal = layer_before.activate(layer_before.weights @ signal + layer_before.biases)
            for j in range(layer.fan_out):
                for i in range(layer.fan_in):
                    want_w[j, i] += abs(signal[i] * layer.weights[j, i])
                want_b[j] += abs(layer.activate(layer.weights[j] @ signal + layer.biases[j]))
        np.testing.assert_allclose(sig.weights[k], want_w / 10, rtol=1e-12)
        np.testing.assert_allclose(sig.biases[k], want_b / 10, rtol=1e-12)


def test_signal_is_non_negative_and_congruent(small_net, small_split):
    sig = accumulate_signal(small_net, small_split)
    sig.check_against(small_net)
    assert all((values >= 0).all() for _, values in sig.arrays())


def test_signal_does_not_touch_the_network(small_net, small_split):
    before = small_net.copy()
    accumulate_signal(small_net, small_split)
    for (_, a), (_, b) in zip(small_net.parameters(), before.parameters()):
        assert np.array_equal(a, b)


def test_signal_of_first_layer_scales_with_inputs(small_net, small_split):
    doubled = Split(2.0 * small_split.inputs, small_split.labels)
    base = accumulate_signal(small_net, small_split)
    scaled = accumulate_signal(small_net, doubled)
    np.testing.assert_allclose(scaled.weights[0], 2.0 * base.weights[0], rtol=1e-15)


def test_signal_does_not_depend_on_batching(small_net, small_split):
    a = accumulate_signal(small_net, small_split, batch_size=7)
    b = accumulate_signal(small_net, small_split, batch_size=1000)
    for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_signal_rejects_empty_data(small_net):
    with pytest.raises(InvalidInputError):
        accumulate_signal(small_net, Split(np.empty((0, 20)), np.empty(0, dtype=np.int64)))


# ---------------- fisher ----------------

def brute_force_fisher(net, data, labels):
    weights = [np.zeros_like(layer.weights) for layer in net.layers]
    biases = [np.zeros_like(layer.biases) for layer in net.layers]
    for i in range(len(data)):
        _, cache = forward(net, data.inputs[i:i + 1])
        grads = backward(net, cache, labels[i:i + 1])
        for k in range(len(net.layers)):
            weights[k] += grads.weights[k] ** 2
            biases[k] += grads.biases[k] ** 2
    return [w / len(data) for w in weights], [b / len(data) for b in biases]


@pytest.mark.parametrize("mode", [FisherLabels.sampled, FisherLabels.true])
def test_fisher_matches_per_example_gradients(small_net, small_split, mode):
    fisher = estimate_fisher_diag(small_net, small_split, seed=17, batch_size=16, label_mode=mode)
    labels = draw_fisher_labels(small_net, small_split, seed=17, batch_size=16, label_mode=mode)
    weights, biases = brute_force_fisher(small_net, small_split, labels)
    for got, want in zip(fisher.weights + fisher.biases, weights + biases):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-15)
    assert fisher.kind is SignificanceKind.fisher


def test_fisher_matches_finite_difference_log_likelihood():
    rng = np.random.default_rng(13)
    net = Network([Layer(rng.standard_normal((2, 3)), rng.standard_normal(2), "identity")])
    data = Split(rng.random((5, 3)), np.zeros(5, dtype=np.int64))
    fisher = estimate_fisher_diag(net, data, seed=99)
    labels = draw_fisher_labels(net, data, seed=99)

    def log_likelihood(x, label):
        logits = net.layers[0].weights @ x + net.layers[0].biases
        return logits[label] - np.log(np.exp(logits).sum())

    h = 1e-6
    for got, param in ((fisher.weights[0], net.layers[0].weights), (fisher.biases[0], net.layers[0].biases)):
        want = np.zeros_like(param)
        for x, label in zip(data.inputs, labels):
            for idx in np.ndindex(param.shape):
                saved = param[idx]
                param[idx] = saved + h
                plus = log_likelihood(x, label)
                param[idx] = saved - h
                minus = log_likelihood(x, label)
                param[idx] = saved
                want[idx] += ((plus - minus) / (2 * h)) ** 2
        np.testing.assert_allclose(got, want / 5, rtol=1e-3, atol=1e-12)


def test_fisher_is_reproducible_and_batch_independent(small_net, small_split):
    a = estimate_fisher_diag(small_net, small_split, seed=5, batch_size=7)
    b = estimate_fisher_diag(small_net, small_split, seed=5, batch_size=7)
    c = estimate_fisher_diag(small_net, small_split, seed=5, batch_size=1000)
    for (_, x), (_, y), (_, z) in zip(a.arrays(), b.arrays(), c.arrays()):
        assert np.array_equal(x, y)
        np.testing.assert_allclose(x, z, rtol=1e-10, atol=1e-15)


def test_fisher_true_labels_ignore_seed(small_net, small_split):
    a = estimate_fisher_diag(small_net, small_split, seed=1, label_mode=FisherLabels.true)
    b = estimate_fisher_diag(small_net, small_split, seed=2, label_mode=FisherLabels.true)
    for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)


def test_fisher_is_non_negative(small_net, small_split):
    fisher = estimate_fisher_diag(small_net, small_split, seed=0)
    assert fisher.n_examples == len(small_split)
    assert all((values >= 0).all() for _, values in fisher.arrays())


def test_sample_labels_follows_probabilities():
    rng = np.random.Generator(np.random.PCG64(0))
    onehot = np.eye(4)[[3, 1, 0, 2]]
    assert np.array_equal(sample_labels(onehot, rng), [3, 1, 0, 2])
    draws = sample_labels(np.tile([0.2, 0.8], (20000, 1)), rng)
    assert draws.mean() == pytest.approx(0.8, abs=0.015)


# ---------------- merge ----------------

def test_merge_sums_elementwise():
    a = store([[[1.0, 2.0]]], [[0.5]], tasks=(0,), n=10)
    b = store([[[0.25, 0.0]]], [[1.0]], tasks=(1,), n=20)
    merged = merge(a, b)
    np.testing.assert_array_equal(merged.weights[0], [[1.25, 2.0]])
    np.testing.assert_array_equal(merged.biases[0], [1.5])
    assert merged.source_tasks == (0, 1)
    assert merged.n_examples == 30


def test_merge_is_commutative_and_associative():
    rng = np.random.default_rng(0)
    a, b, c = (store([rng.random((2, 3))], [rng.random(2)]) for _ in range(3))
    left, right = merge(merge(a, b), c), merge(a, merge(b, c))
    np.testing.assert_allclose(left.weights[0], right.weights[0], rtol=1e-15)
    np.testing.assert_array_equal(merge(a, b).weights[0], merge(b, a).weights[0])


def test_merge_with_zeros_is_identity(small_net):
    rng = np.random.default_rng(2)
    sig = store([rng.random(layer.weights.shape) for layer in small_net.layers],
                [rng.random(layer.biases.shape) for layer in small_net.layers])
    merged = merge(sig, SignificanceStore.zeros_like(small_net, SignificanceKind.signal))
    for (_, x), (_, y) in zip(merged.arrays(), sig.arrays()):
        assert np.array_equal(x, y)


def test_merge_rejects_kind_mismatch():
    with pytest.raises(InvalidInputError):
        merge(store([[[1.0]]], [[1.0]]), store([[[1.0]]], [[1.0]], kind=SignificanceKind.fisher))


def test_merge_rejects_shape_mismatch():
    with pytest.raises(InvalidInputError):
        merge(store([[[1.0]]], [[1.0]]), store([[[1.0, 2.0]]], [[1.0]]))


def test_store_rejects_negative_values():
    with pytest.raises(InvariantViolationError):
        store([[[1.0, -0.1]]], [[0.0]])


def test_store_rejects_non_finite_values():
    with pytest.raises(InvariantViolationError):
        store([[[np.inf]]], [[0.0]])


def blown_up(layer_sizes, scale):
    net = random_network(layer_sizes, np.random.default_rng(7))
    for layer in net.layers:
        layer.weights *= scale
    return net


def test_signal_overflow_is_a_numeric_error(small_split):
    net = blown_up([20, 8, 10], 1e200)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError) as exc:
        accumulate_signal(net, small_split)
    assert exc.value.location.startswith("layer 1 ")


def test_fisher_overflow_is_a_numeric_error(small_split):
    net = blown_up([20, 8, 8, 10], 1e80)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError) as exc:
        estimate_fisher_diag(net, small_split, seed=0)
    assert exc.value.location.startswith("layer ")
    assert "Fisher" in str(exc.value)


# ---------------- anchors and documents ----------------

def test_anchor_is_a_read_only_snapshot(small_net):
    anchor = take_anchor(small_net, source_task=0)
    original = anchor.weights[0].copy()
    small_net.layers[0].weights += 1.0
    assert np.array_equal(anchor.weights[0], original)
    with pytest.raises(ValueError):
        anchor.weights[0][0, 0] = 3.0


def test_anchor_equality_compares_values(small_net):
    assert take_anchor(small_net, 0) == take_anchor(small_net, 1)
    other = small_net.copy()
    other.layers[1].biases[0] += 1e-9
    assert take_anchor(small_net) != take_anchor(other)


def test_documents_reload_exactly(tmp_path, small_net, small_split):
    sig = estimate_fisher_diag(small_net, small_split, seed=4, source_task=2)
    anchor = take_anchor(small_net, source_task=2)
    reloaded = load_significance(save_document(sig.to_document(), tmp_path / "sig.json"))
    again = load_anchor(save_document(anchor.to_document(), tmp_path / "anchor.json"))

    assert reloaded.kind is SignificanceKind.fisher
    assert reloaded.source_tasks == (2,)
    for (_, x), (_, y) in zip(reloaded.arrays(), sig.arrays()):
        assert np.array_equal(x, y)
    assert again == anchor
    assert again.source_task == 2
