import numpy as np
import pytest

from smoothmark import detector as D
from smoothmark import evalkit, smoothing, toylm, wmgen
from smoothmark.rng import make_rng
from smoothmark.smoothing import NoiseConfig
from smoothmark.tokenspace import TokenSeq


def _small(seed=3):
    table = np.random.default_rng(0).normal(size=(40, 4))
    return D.DetectorModel(table, window=2, max_len=12, seed=seed)


def _toy_corpus(n=40):
    rng = np.random.default_rng(1)
    out = []
    for i in range(n):
        label = i % 2
        lo, hi = (0, 20) if label else (20, 40)  # separable by token range
        out.append(D.Sample(tuple(int(t) for t in rng.integers(lo, hi, size=int(rng.integers(5, 13)))), label))
    return out


def test_train_config_validation():
    for bad in (dict(strategy="mix"), dict(lr=0), dict(epochs=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            D.TrainConfig(**bad)


def test_probabilities_normalized_and_deterministic():
    det = _small()
    E = np.random.default_rng(2).normal(scale=5, size=(7, 12, 4))
    p = det.predict_proba(E)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert det.predict_proba(E).tobytes() == p.tobytes()
    a, b = D.forward(det, E[0])
    assert abs(a + b - 1) <= 1e-6


def test_variable_length_inputs():
    det = _small()
    short = np.random.default_rng(3).normal(size=(1, 5, 4))
    long_ = np.random.default_rng(3).normal(size=(1, 30, 4))
    assert det.classify(short).shape == (1,)
    assert det.classify(long_[:, :12]).shape == (1,)
    with pytest.raises(ValueError, match="max_len"):
        det.classify(long_)


@pytest.mark.parametrize("lengths", [[12, 9, 7, 12, 4], [3, 3, 3, 3, 3]])
def test_gradient_check(lengths):
    rng = np.random.default_rng(0)
    det = _small()
    E = rng.normal(size=(5, 12, 4))
    y = rng.integers(0, 2, size=5)
    mask = D._mask(det, np.array(lengths))
    _, grads = det.loss_and_grads(E, y, mask)
    h = 1e-6
    for name in D.PARAM_NAMES:
        P = det.params[name]
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = det.loss_and_grads(E, y, mask)[0]
            P[idx] = old - h
            down = det.loss_and_grads(E, y, mask)[0]
            P[idx] = old
            num = (up - down) / (2 * h)
            ana = grads[name][idx]
            denom = max(abs(num) + abs(ana), 1e-7)
            assert abs(num - ana) / denom <= 1e-3 or abs(num - ana) <= 1e-9, (name, idx)


def test_memorizes_single_sample():
    det = _small()
    corpus = [D.Sample((1, 2, 3, 4, 5, 6), 1)] * 16
    cfg = D.TrainConfig(noise=NoiseConfig(0.0, 1), strategy="joint", epochs=60, lr=0.5, batch_size=16)
    _, trace = D.train(det, corpus, cfg)
    assert trace[-1] < 0.02 < trace[0]


def test_training_deterministic_and_learns():
    corpus = _toy_corpus()
    for strategy in ("duplicate", "joint"):
        cfg = D.TrainConfig(noise=NoiseConfig(0.5, 2), strategy=strategy, epochs=30, lr=0.3, batch_size=8)
        a, ta = D.train(_small(), corpus, cfg)
        b, tb = D.train(_small(), corpus, cfg)
        assert ta == tb
        for name in D.PARAM_NAMES:
            assert a.params[name].tobytes() == b.params[name].tobytes()
        preds = D.predict_labels(a, corpus)
        assert (preds == [s.label for s in corpus]).mean() >= 0.9


def test_training_does_not_mutate_input():
    det = _small()
    before = {k: v.copy() for k, v in det.params.items()}
    D.train(det, _toy_corpus(8), D.TrainConfig(noise=NoiseConfig(0.1, 1), epochs=1))
    for k in before:
        np.testing.assert_array_equal(det.params[k], before[k])


def test_non_finite_loss_raises():
    table = np.full((10, 4), np.nan)
    det = D.DetectorModel(table, window=2, max_len=12)
    with pytest.raises(D.TrainingError):
        D.train(det, [D.Sample((1, 2, 3, 4), 1)], D.TrainConfig(noise=NoiseConfig(0.0, 1), epochs=1))
    with pytest.raises(ValueError):
        D.train(_small(), [], D.TrainConfig())


def test_payload_round_trip(ref_vocab):
    det = D.DetectorModel(ref_vocab.table, seed=4, embedding_checksum=ref_vocab.checksum())
    again = D.DetectorModel.from_payload(det.to_payload(), ref_vocab)
    E = det.embed(list(range(50)))[None]
    assert again.predict_proba(E).tobytes() == det.predict_proba(E).tobytes()


def test_build_dataset_small(lm, gen, human_docs, llm_vocab, ref_vocab):
    data = D.build_dataset(lm, gen, 10, 10, human_docs[:40], wmgen.GenParams(),
                           toylm.DecodeConfig(temperature=1.0), llm_vocab, ref_vocab, seed=3)
    assert len(data) == 20
    assert sum(s.label for s in data) == 10
    assert all(len(s.ref_ids) >= 200 for s in data)
    z = {lab: np.mean([D.z_score_ids(gen, s.ref_ids) for s in data if s.label == lab]) for lab in (0, 1)}
    assert z[1] > z[0]
    with pytest.raises(ValueError):
        D.build_dataset(lm, gen, 500, 500, human_docs[:5], wmgen.GenParams(), toylm.DecodeConfig(),
                        llm_vocab, ref_vocab)


@pytest.mark.slow
def test_desk_detector_on_held_out(desk):
    det = desk["det"]
    pos = [s for s in desk["test"] if s.label == 1]
    probs = [D.forward(det, det.embed(s.ref_ids))[1] for s in pos[:20]]
    assert np.mean(np.array(probs) > 0.5) >= 0.9
    assert desk["trace"][-1] < desk["trace"][0]


@pytest.mark.slow
def test_desk_certify_golden(desk):
    det, noise = desk["det"], desk["noise"]
    s = next(s for s in desk["test"] if s.label == 1)
    r = smoothing.certify(det, TokenSeq(s.ref_ids, "ref"), noise, 1000, 0.05, rng=make_rng(123))
    assert r.label == 1 and r.rad_e > 0 and r.rad_p > 0
    again = smoothing.certify(det, TokenSeq(s.ref_ids, "ref"), noise, 1000, 0.05, rng=make_rng(123))
    assert again == r


@pytest.mark.slow
def test_noise_free_training_not_worse_on_clean_data(desk, ref_vocab):
    det0 = D.DetectorModel(ref_vocab.table, embedding_checksum=ref_vocab.checksum())
    clean, _ = D.train(det0, desk["train"], D.TrainConfig(noise=NoiseConfig(0.0, 1), strategy="joint", epochs=10))
    truth = [s.label for s in desk["test"]]
    f_clean = evalkit.confusion_metrics(D.predict_labels(clean, desk["test"]), truth).f1
    f_noisy = evalkit.confusion_metrics(D.predict_labels(desk["det"], desk["test"]), truth).f1
    assert f_clean >= f_noisy
