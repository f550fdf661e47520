from fractions import Fraction

import numpy as np
import pytest

from geodyn.fusion import FusionConfig, FusionModel
from geodyn.metrics import ScoreRecord, auc, binary_auc, classification_rates, eer_threshold
from geodyn.protocol import ModelBundle, ProtocolConfig, run_protocol, write_report, write_scores
from geodyn.stgcn import StgcnConfig, StgcnModel
from geodyn.synth import SynthConfig, synthesize


def records(**groups):
    out = []
    for label, scores in groups.items():
        out += [ScoreRecord(f"{label}{i}", label, s) for i, s in enumerate(scores)]
    return out


def brute_auc(pos, neg):
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def random_records(rng, n=None):
    n = n or int(rng.integers(4, 60))
    labels = rng.choice(["live", "print", "replay", "mask"], size=n)
    labels[:2] = ["live", "print"]
    # coarse grid so ties occur
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    return [ScoreRecord(f"r{i}", str(l), float(s)) for i, (l, s) in enumerate(zip(labels, scores))]


# -- AUC --------------------------------------------------------------------------

def test_auc_examples():
    assert binary_auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert binary_auc([0.5], [0.5]) == 0.5
    with pytest.raises(ValueError):
        binary_auc([], [0.1])


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_pairwise_brute_force(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng, 200)
    live = [r.score for r in recs if r.label == "live"]
    spoof = [r.score for r in recs if r.label != "live"]
    assert abs(auc(recs) - brute_auc(live, spoof)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_auc_rank_invariance_and_complement(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng)
    cubed = [ScoreRecord(r.id, r.label, r.score ** 3) for r in recs]
    flipped = [ScoreRecord(r.id, r.label, 1 - r.score) for r in recs]
    assert abs(auc(cubed) - auc(recs)) < 1e-12
    assert abs(auc(recs) + auc(flipped) - 1) < 1e-12


# -- EER --------------------------------------------------------------------------

def test_eer_examples():
    thr, eer = eer_threshold(records(live=[0.8, 0.9], spoof=[0.1, 0.2]))
    assert thr == pytest.approx(0.5, abs=1e-15) and eer == 0
    thr, eer = eer_threshold(records(live=[0.3] * 3, spoof=[0.3] * 4))
    assert thr == 0.3 and eer == 0.5
    n = 40
    scores = np.arange(n) / n
    inter = records(live=scores[0::2], spoof=scores[1::2])
    assert abs(eer_threshold(inter)[1] - 0.5) <= 1 / n
    with pytest.raises(ValueError):
        eer_threshold(records(live=[0.1, 0.2]))


@pytest.mark.parametrize("seed", range(5))
def test_eer_matches_exhaustive_sweep(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng)
    live = np.array([r.score for r in recs if r.label == "live"])
    spoof = np.array([r.score for r in recs if r.label != "live"])
    grid = np.unique(np.concatenate([live, spoof]))
    best = min(abs(np.mean(spoof >= t) - np.mean(live < t))
               for t in (grid[:-1] + grid[1:]) / 2) if grid.size > 1 else 0
    thr, eer = eer_threshold(recs)
    far, frr = np.mean(spoof >= thr), np.mean(live < thr)
    assert abs(abs(far - frr) - best) < 1e-12
    assert eer == pytest.approx((far + frr) / 2, abs=1e-15)


# -- error rates ------------------------------------------------------------------------

def test_classification_rates_hand_count():
    recs = records(print=[0.6, 0.4, 0.3], replay=[0.2, 0.8], live=[0.7, 0.6, 0.4])
    rep = classification_rates(recs, 0.5)
    assert Fraction(rep.apcer_per_type["print"]).limit_denominator(100) == Fraction(1, 3)
    assert rep.apcer_per_type["replay"] == 0.5
    assert rep.apcer == 0.5
    assert Fraction(rep.bpcer).limit_denominator(100) == Fraction(1, 3)
    assert rep.acer == pytest.approx(5 / 12, abs=1e-15)
    assert rep.hter == pytest.approx(11 / 30, abs=1e-15)
    assert rep.far == pytest.approx(2 / 5, abs=1e-15)
    zero = classification_rates(recs, 0.0)
    assert zero.bpcer == 0 and zero.apcer == 1


def test_tie_counts_as_live():
    rep = classification_rates(records(live=[0.5], print=[0.5]), 0.5)
    assert rep.bpcer == 0 and rep.apcer == 1


def test_classification_rates_errors():
    with pytest.raises(ValueError):
        classification_rates([], 0.5)
    with pytest.raises(ValueError):
        classification_rates(records(live=[0.5]), float("nan"))
    with pytest.raises(ValueError):
        ScoreRecord("x", "live", 1.5)


@pytest.mark.parametrize("seed", range(20))
def test_acer_identity_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng)
    prev = None
    for thr in np.linspace(0, 1, 41):
        rep = classification_rates(recs, thr)
        assert rep.acer == pytest.approx((rep.apcer + rep.bpcer) / 2, abs=1e-15)
        assert rep.hter == pytest.approx((rep.far + rep.frr) / 2, abs=1e-15)
        if prev is not None:
            assert rep.bpcer >= prev.bpcer
            for k, v in rep.apcer_per_type.items():
                assert v <= prev.apcer_per_type[k]
        prev = rep


# -- protocol ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_setup():
    d = synthesize(SynthConfig(counts={"live": 6, "replay": 6, "print_rigid": 6}, frames=12))
    model = StgcnModel(d.graph, StgcnConfig(channels=[4], strides=[1], kernel_size=3, seq_len=8),
                       np.random.default_rng(0))
    return d, ModelBundle(model, None, model.metadata())


def test_protocol_fixed_threshold_recorded(small_setup, tmp_path):
    d, bundle = small_setup
    cfg = ProtocolConfig(threshold_policy="fixed", threshold=0.5)
    report, recs = run_protocol(bundle, d.sequences, d.splits, cfg)
    assert report.threshold == 0.5 and report.threshold_policy == "fixed"
    assert report.extra["protocol"]["threshold"] == 0.5
    assert report.auc is not None
    assert [r.id for r in recs] == [i for i in d.splits if d.splits[i] == "test"]
    write_report(report, tmp_path / "a.json")
    write_scores(recs, tmp_path / "a.csv")
    again, recs2 = run_protocol(bundle, d.sequences, d.splits, cfg)
    write_report(again, tmp_path / "b.json")
    write_scores(recs2, tmp_path / "b.csv")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "id,label,score"


def test_protocol_policies_and_errors(small_setup):
    d, bundle = small_setup
    rep, _ = run_protocol(bundle, d.sequences, d.splits, ProtocolConfig())
    assert rep.threshold_policy == "eer-dev" and rep.threshold_split == "dev"
    rep, _ = run_protocol(bundle, d.sequences, d.splits, ProtocolConfig(threshold_policy="eer-test"))
    assert rep.threshold_split == "test"
    with pytest.raises(ValueError, match="empty or missing"):
        run_protocol(bundle, d.sequences, d.splits, ProtocolConfig(test_split="holdout"))
    with pytest.raises(ValueError, match="fusion checkpoint"):
        run_protocol(bundle, d.sequences, d.splits, ProtocolConfig(score_source="fusion"))
    fused = ModelBundle(bundle.gcn, FusionModel(4, 32, FusionConfig(attn_dim=4)), bundle.gcn_meta)
    with pytest.raises(ValueError, match="features"):
        run_protocol(fused, d.sequences, d.splits, ProtocolConfig(score_source="fusion"))
    feats = {f.id: f for f in d.features}
    rep, recs = run_protocol(fused, d.sequences, d.splits, ProtocolConfig(score_source="fusion"), feats)
    assert all(0 <= r.score <= 1 for r in recs)
    del feats[recs[0].id]
    with pytest.raises(KeyError, match=recs[0].id):
        run_protocol(fused, d.sequences, d.splits, ProtocolConfig(score_source="fusion"), feats)
    with pytest.raises(ValueError):
        ProtocolConfig(threshold_policy="median")
    with pytest.raises(ValueError):
        ProtocolConfig.from_dict({"policy": "fixed"})
