import numpy as np
import pandas as pd
import pytest

from codeprov import ingest
from codeprov.correction import CorrectionParams
from codeprov.simulate import (
    SimScenario,
    attenuation_scenario,
    attenuation_study,
    default_adoption_path,
    generate,
    materialize,
    replication_seed,
    simulate_corpus,
    simulate_detection_flags,
    validate_pipeline,
)


def small_scenario(**kw):
    defaults = dict(
        n_users=6, start_quarter="2021Q1", n_quarters=8,
        adoption_path=(0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4),
        beta_true=0.1, commit_intensity_base=6.0, functions_per_commit=4.0,
        seed=11, onset_delay_max=1,
    )
    defaults.update(kw)
    return SimScenario(**defaults)


class TestScenario:
    def test_validation(self):
        with pytest.raises(ValueError):
            small_scenario(adoption_path=(0.5,) * 3)
        with pytest.raises(ValueError):
            small_scenario(tpr=0.2, fpr=0.3)
        with pytest.raises(ValueError):
            small_scenario(commit_intensity_base=0.0)

    def test_json_round_trip(self):
        sc = small_scenario()
        assert SimScenario.from_json(sc.to_json()) == sc

    def test_default_path_shape(self):
        path = default_adoption_path()
        assert len(path) == 16 and path[0] == 0.0 and path[-1] == pytest.approx(0.55)


class TestGenerate:
    def test_deterministic(self):
        a = generate(small_scenario())
        b = generate(small_scenario())
        assert [c.commit_id for c in a.commits] == [c.commit_id for c in b.commits]
        assert [f.detected for f in a.functions()] == [f.detected for f in b.functions()]

    def test_zero_share_before_adoption(self):
        data = generate(small_scenario())
        for t in data.quarter_truth:
            if pd.Period(t.quarter, freq="Q") < pd.Period("2022Q1", freq="Q"):
                assert t.true_share == 0.0

    def test_perfect_detector_matches_realized_share(self):
        data = generate(small_scenario(tpr=1.0, fpr=0.0))
        by_uq = {}
        for fn in data.functions():
            q = str(pd.Period(fn.timestamp.strftime("%Y-%m-%d"), freq="Q"))
            by_uq.setdefault((fn.user_id, q), []).append(fn)
        for t in data.quarter_truth:
            fns = by_uq.get((t.user_id, t.quarter), [])
            if fns:
                detected_rate = np.mean([f.detected for f in fns])
                assert detected_rate == pytest.approx(t.realized_share)

    def test_function_ids_match_ingest_hashing(self):
        data = generate(small_scenario())
        fn = data.functions()[0]
        commit = next(c for c in data.commits if c.commit_id == fn.commit_id)
        expected = ingest.function_identity(commit.project_id, fn.path, fn.name)
        assert fn.function_id == expected

    def test_materialized_commit_parses(self):
        data = generate(small_scenario())
        commit = next(c for c in data.commits if c.functions and c.imports)
        rec = materialize(commit)
        extracted = ingest.extract_function_changes(rec)
        assert len(extracted) == len(commit.functions)
        assert all(f.modified_fraction == 1.0 for f in extracted)
        assert ingest.commit_added_imports(rec) == set(commit.imports)


class TestSimulateCorpus:
    def test_byte_identical_given_seed(self, tmp_path):
        p1 = simulate_corpus(small_scenario(), tmp_path / "a")
        p2 = simulate_corpus(small_scenario(), tmp_path / "b")
        assert p1.dump.read_bytes() == p2.dump.read_bytes()
        assert p1.truth.read_bytes() == p2.truth.read_bytes()
        assert p1.scores.read_bytes() == p2.scores.read_bytes()
        assert p1.users.read_bytes() == p2.users.read_bytes()

    def test_dump_round_trips_through_ingest(self, tmp_path):
        data = generate(small_scenario())
        paths = simulate_corpus(small_scenario(), tmp_path, data=data)
        loaded = list(ingest.load_commit_dump(paths.dump))
        assert len(loaded) == len(data.commits)
        extracted_ids = {
            f.function_id
            for rec in loaded
            for f in ingest.extract_function_changes(rec)
        }
        assert extracted_ids == {f.function_id for f in data.functions()}


class TestDetectionChannel:
    def test_expected_detection_rate(self):
        # E[d] = y*tpr + (1-y)*fpr, tested at sampling accuracy
        params = CorrectionParams(tpr=0.9550, fpr=0.2321)
        rng = np.random.default_rng(3)
        y = 0.35
        flags = simulate_detection_flags(400_000, y, params, rng)
        expected = y * params.tpr + (1 - y) * params.fpr
        assert flags.mean() == pytest.approx(expected, abs=0.003)

    def test_correction_bias_shrinks_with_n(self):
        params = CorrectionParams(tpr=0.9550, fpr=0.2321)
        y = 0.25
        biases = []
        for n in (500, 5000, 50000):
            abs_bias = []
            for seed in range(30):
                rng = np.random.default_rng(seed)
                flags = simulate_detection_flags(n, y, params, rng)
                corrected = (flags.mean() - params.fpr) / (params.tpr - params.fpr)
                abs_bias.append(abs(corrected - y))
            biases.append(np.mean(abs_bias))
        assert biases[0] > biases[1] > biases[2]


class TestValidatePipeline:
    def test_flags_mode_report(self):
        report = validate_pipeline(small_scenario(n_users=20, commit_intensity_base=12.0,
                                                  functions_per_commit=8.0),
                                   replications=3)
        assert report["completed"] == 3
        assert report["failures"] == []
        assert report["beta_mean"] is not None
        assert 0.0 <= report["ci_coverage"] <= 1.0

    def test_files_mode_matches_flags_mode(self, tmp_path):
        sc = small_scenario(n_users=10, commit_intensity_base=10.0, functions_per_commit=6.0)
        flags_report = validate_pipeline(sc, replications=1, mode="flags")
        files_report = validate_pipeline(sc, replications=1, mode="files", workdir=tmp_path)
        assert files_report["beta_mean"] == pytest.approx(flags_report["beta_mean"], abs=1e-12)
        assert files_report["prevalence_bias_mean"] == pytest.approx(
            flags_report["prevalence_bias_mean"], abs=1e-12)

    def test_replication_seeds_distinct(self):
        seeds = {replication_seed(7, r) for r in range(100)}
        assert len(seeds) == 100


class TestAttenuationStudy:
    def test_single_seed_structure(self):
        report = attenuation_study(attenuation_scenario(seed=1))
        assert report["k_values"] == [4, 8, 16, 32]
        assert len(report["b_hat"]) == 4
        assert report["n_common"] > 100
        # analytic factors rise toward 1 with k
        factors = [report["analytic_factors"][k] for k in (4, 8, 16, 32)]
        assert all(b > a for a, b in zip(factors, factors[1:]))

    def test_validate_attenuation_mode(self):
        report = validate_pipeline(attenuation_scenario(seed=5), replications=2)
        assert report["mode"] == "attenuation"
        assert report["completed"] == 2
        assert report["beta_extrapolated_mean"] == pytest.approx(0.5, rel=0.25)
