import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jdp import fpca, simgen
from jdp.dataset import truncate_history
from jdp.similarity import (
    FeatureVector,
    ZeroNormError,
    build_features,
    cosine,
    fit_standardization,
    rank_similar,
    select_subpopulation,
    FeatureSet,
    SimilarityRanking,
    Standardization,
)

# Feature vectors are z-scored covariates plus component scores, so keep the
# generated entries at realistic magnitudes (avoids squared-norm underflow).
finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_subnormal=False)
vectors = st.lists(finite, min_size=1, max_size=8).filter(
    lambda v: max(abs(x) for x in v) > 1e-100
)


def fv(sid, vals):
    return FeatureVector(sid, tuple(float(v) for v in vals))


class TestCosine:
    def test_identical_direction(self):
        assert cosine(fv("a", (1, 0)), fv("b", (1, 0))) == 1.0

    def test_orthogonal(self):
        assert cosine(fv("a", (1, 0)), fv("b", (0, 1))) == 0.0

    def test_hand_value(self):
        expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
        got = cosine(fv("a", (1, 2, 3)), fv("b", (4, 5, 6)))
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(0.974631846, abs=1e-9)

    def test_zero_norm(self):
        with pytest.raises(ZeroNormError):
            cosine(fv("a", (0.0, 0.0)), fv("b", (1.0, 0.0)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine(fv("a", (1.0,)), fv("b", (1.0, 2.0)))

    @given(vectors)
    def test_self_similarity(self, vals):
        assert cosine(fv("a", vals), fv("b", vals)) == pytest.approx(1.0, abs=1e-12)

    @given(vectors)
    def test_antipodal(self, vals):
        neg = [-x for x in vals]
        assert cosine(fv("a", vals), fv("b", neg)) == pytest.approx(-1.0, abs=1e-12)

    @given(vectors, st.floats(min_value=1e-3, max_value=1e3))
    def test_scale_invariance(self, vals, scale):
        scaled = [scale * x for x in vals]
        a = cosine(fv("a", vals), fv("b", scaled))
        assert a == pytest.approx(1.0, abs=1e-9)

    @given(vectors, vectors)
    def test_bounds(self, v1, v2):
        k = min(len(v1), len(v2))
        v1, v2 = v1[:k], v2[:k]
        if max(abs(x) for x in v1) <= 1e-100 or max(abs(x) for x in v2) <= 1e-100:
            return
        assert -1.0 <= cosine(fv("a", v1), fv("b", v2)) <= 1.0


class TestRanking:
    def make_set(self, named_vecs):
        vecs = tuple(fv(sid, vals) for sid, vals in named_vecs)
        stdz = Standardization((), (), (), ())
        return FeatureSet(("x", "y"), vecs, stdz)

    def test_identical_subject_ranks_first(self):
        training = self.make_set([("t1", (1, 2)), ("t2", (2, -1)), ("t3", (0.5, 1.0))])
        ranking = rank_similar(fv("idx", (1, 2)), training)
        assert ranking.ranked[0][0] == "t1"
        assert ranking.ranked[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_order(self):
        training = self.make_set([("pos", (0.3, 0.4)), ("neg", (-0.3, -0.4))])
        ranking = rank_similar(fv("idx", (0.3, 0.4)), training)
        assert [r[0] for r in ranking.ranked] == ["pos", "neg"]
        assert ranking.ranked[1][1] == pytest.approx(-1.0)

    def test_tie_breaks_lexicographic(self):
        training = self.make_set([("b", (2, 0)), ("a", (3, 0))])  # both cosine 1
        ranking = rank_similar(fv("idx", (1, 0)), training)
        assert [r[0] for r in ranking.ranked] == ["a", "b"]

    def test_zero_norm_training_vector_excluded(self, caplog):
        training = self.make_set([("ok", (1, 0)), ("bad", (0, 0))])
        with caplog.at_level(logging.WARNING):
            ranking = rank_similar(fv("idx", (1, 1)), training)
        assert [r[0] for r in ranking.ranked] == ["ok"]
        assert "bad" in caplog.text


class TestSelectSubpopulation:
    def ranking(self, n):
        ranked = tuple((f"s{i:03d}", 1.0 - i / n) for i in range(n))
        return SimilarityRanking("idx", ranked)

    def test_full_population(self):
        r = self.ranking(10)
        assert len(select_subpopulation(r, 1.0, 10)) == 10

    def test_paper_fold_arithmetic(self):
        r = self.ranking(1600)
        assert len(select_subpopulation(r, 0.2, 1600)) == 320

    def test_floor_at_one(self):
        r = self.ranking(1600)
        assert len(select_subpopulation(r, 0.0005, 1600)) == 1

    def test_half_even_rounding(self):
        r = self.ranking(10)
        # 0.25 * 10 = 2.5 rounds to 2 under banker's rounding
        assert len(select_subpopulation(r, 0.25, 10)) == 2

    def test_nesting(self):
        r = self.ranking(40)
        small = set(select_subpopulation(r, 0.2, 40))
        large = set(select_subpopulation(r, 0.6, 40))
        assert small <= large

    def test_invalid_mp(self):
        with pytest.raises(ValueError):
            select_subpopulation(self.ranking(5), 0.0, 5)


@pytest.fixture(scope="module")
def fitted():
    cohort = simgen.generate_scenario(simgen.scenario_1(80), seed=31)
    trunc = truncate_history(cohort, 1.0)
    model = fpca.fit_fpca(trunc, grid=np.linspace(0, 1, 51))
    return cohort, trunc, model


class TestBuildFeatures:
    def test_training_columns_standardized(self, fitted):
        cohort, trunc, model = fitted
        feats = build_features(trunc, model)
        mat = feats.matrix()
        for j, name in enumerate(("w1", "w2")):
            assert mat[:, j].mean() == pytest.approx(0.0, abs=1e-10)
            assert mat[:, j].std(ddof=0) == pytest.approx(1.0, abs=1e-10)

    def test_feature_dimension(self, fitted):
        cohort, trunc, model = fitted
        feats = build_features(trunc, model)
        assert len(feats.columns) == 2 + model.n_selected
        assert feats.columns[:2] == ("w1", "w2")

    def test_test_set_uses_training_stats(self, fitted):
        cohort, trunc, model = fitted
        stdz = fit_standardization(trunc)
        other = simgen.generate_scenario(simgen.scenario_1(40), seed=77)
        other_trunc = truncate_history(other, 1.0)
        feats = build_features(other_trunc, model, stdz)
        # shape only: standardized with foreign stats, mean generally nonzero
        assert feats.matrix().shape == (other_trunc.n_subjects, 2 + model.n_selected)
        assert feats.standardization is stdz

    def test_zero_variance_covariate_dropped(self, caplog):
        from conftest import build_cohort

        cohort = build_cohort(
            [(f"S{i}", 3.0, False, (1.0, 0.1 * i), [(0.0, 0.1 * i), (0.5, 0.2 * i)])
             for i in range(12)],
        )
        model = fpca.fit_fpca(cohort, grid=np.linspace(0, 0.5, 11))
        with caplog.at_level(logging.WARNING):
            feats = build_features(cohort, model)
        assert "w1" in caplog.text
        assert "w1" not in feats.columns

    def test_score_cap_alignment(self, fitted):
        cohort, trunc, model = fitted
        feats = build_features(trunc, model, n_scores=0)
        assert feats.columns == ("w1", "w2")

    def test_feature_csv_dump(self, fitted, tmp_path):
        from jdp.similarity import write_feature_csv

        cohort, trunc, model = fitted
        feats = build_features(trunc, model)
        path = tmp_path / "features.csv"
        write_feature_csv(feats, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "subject_id," + ",".join(feats.columns)
        assert len(lines) == 1 + len(feats.vectors)
        first = lines[1].split(",")
        assert first[0] == feats.vectors[0].subject_id
        assert float(first[1]) == feats.vectors[0].values[0]
