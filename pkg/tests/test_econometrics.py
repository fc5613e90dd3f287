from datetime import datetime, timedelta, timezone

import numpy as np
import pandas as pd
import pytest

from codeprov.econometrics import (
    AttenuationInput,
    MovingAverageSeries,
    attenuation_extrapolate,
    build_design,
    cross_section_ols,
    interpolate_to_quarter,
    moving_average_ai,
    placebo_filter,
    quintile_bin,
    quintile_bounds,
    twoway_fe_ols,
)

UTC = timezone.utc


def make_panel(n_users, n_quarters, beta, seed, noise_sd=0.0, x_sd=1.0):
    """DGP y = beta*x + user effect + quarter effect (+ noise)."""
    rng = np.random.default_rng(seed)
    user_eff = rng.normal(0, 1.0, n_users)
    time_eff = rng.normal(0, 0.5, n_quarters)
    rows = []
    quarters = pd.period_range("2022Q1", periods=n_quarters, freq="Q")
    for u in range(n_users):
        for q in range(n_quarters):
            x = rng.normal(0, x_sd)
            y = beta * x + user_eff[u] + time_eff[q] + rng.normal(0, noise_sd)
            rows.append({"user_id": f"u{u:03d}", "quarter": quarters[q], "x": x, "y": y})
    return pd.DataFrame(rows)


def dummy_ols_oracle(df, y, x_cols):
    """Explicit user+quarter dummies, plain OLS via lstsq."""
    users = sorted(df["user_id"].unique())
    quarters = sorted(df["quarter"].astype(str).unique())
    cols = [df[c].to_numpy(dtype=float) for c in x_cols]
    for u in users[1:]:
        cols.append((df["user_id"] == u).to_numpy(dtype=float))
    for q in quarters[1:]:
        cols.append((df["quarter"].astype(str) == q).to_numpy(dtype=float))
    cols.append(np.ones(len(df)))
    X = np.column_stack(cols)
    beta, *_ = np.linalg.lstsq(X, df[y].to_numpy(dtype=float), rcond=None)
    return beta[:len(x_cols)]


def cr1_sandwich_oracle(df, y, x_cols, beta_by_name):
    """Direct CR1 computation on explicitly demeaned data (loops)."""
    d = df.copy()
    cols = [y] + list(x_cols)
    # iterate demeaning to convergence, independently of the implementation
    for _ in range(200):
        for group in ("user_id", "quarter"):
            d[cols] = d[cols] - d.groupby(group)[cols].transform("mean")
        if max(abs(d.groupby("user_id")[c].mean()).max() for c in cols) < 1e-12:
            break
    X = d[list(x_cols)].to_numpy(dtype=float)
    yv = d[y].to_numpy(dtype=float)
    beta = np.array([beta_by_name[c] for c in x_cols])
    e = yv - X @ beta
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    for u in df["user_id"].unique():
        mask = (df["user_id"] == u).to_numpy()
        s = X[mask].T @ e[mask]
        meat += np.outer(s, s)
    g = df["user_id"].nunique()
    v = g / (g - 1) * (n - 1) / (n - k) * bread @ meat @ bread
    return np.sqrt(np.diag(v))


class TestTwowayFE:
    def test_exact_recovery_no_noise(self):
        df = make_panel(6, 6, beta=0.5, seed=1, noise_sd=0.0)
        fit = twoway_fe_ols(df, "y", ["x"])
        assert fit.coefficients["x"] == pytest.approx(0.5, abs=1e-10)

    def test_matches_dummy_variable_oracle(self):
        df = make_panel(20, 8, beta=0.3, seed=2, noise_sd=0.5)
        fit = twoway_fe_ols(df, "y", ["x"])
        oracle = dummy_ols_oracle(df, "y", ["x"])
        assert fit.coefficients["x"] == pytest.approx(oracle[0], abs=1e-8)

    def test_matches_dummy_oracle_multivariate(self):
        df = make_panel(15, 6, beta=0.3, seed=3, noise_sd=0.5)
        rng = np.random.default_rng(4)
        df["z"] = rng.normal(size=len(df))
        df["y"] = df["y"] + 0.7 * df["z"]
        fit = twoway_fe_ols(df, "y", ["x", "z"])
        oracle = dummy_ols_oracle(df, "y", ["x", "z"])
        assert fit.coefficients["x"] == pytest.approx(oracle[0], abs=1e-8)
        assert fit.coefficients["z"] == pytest.approx(oracle[1], abs=1e-8)

    def test_cr1_matches_direct_sandwich(self):
        df = make_panel(20, 8, beta=0.3, seed=5, noise_sd=0.8)
        fit = twoway_fe_ols(df, "y", ["x"])
        se = cr1_sandwich_oracle(df, "y", ["x"], fit.coefficients)
        assert fit.clustered_se["x"] == pytest.approx(se[0], abs=1e-8)

    def test_row_permutation_bit_identical(self):
        df = make_panel(12, 5, beta=0.4, seed=6, noise_sd=0.6)
        fit1 = twoway_fe_ols(df, "y", ["x"])
        shuffled = df.sample(frac=1.0, random_state=99).reset_index(drop=True)
        fit2 = twoway_fe_ols(shuffled, "y", ["x"])
        assert fit1.coefficients["x"] == fit2.coefficients["x"]
        assert fit1.clustered_se["x"] == fit2.clustered_se["x"]

    def test_fe_invariance_to_group_constants(self):
        df = make_panel(10, 6, beta=0.25, seed=7, noise_sd=0.4)
        fit1 = twoway_fe_ols(df, "y", ["x"])
        shifted = df.copy()
        user_shift = {u: i * 3.0 for i, u in enumerate(sorted(df["user_id"].unique()))}
        q_shift = {q: i * -2.0 for i, q in enumerate(sorted(df["quarter"].unique()))}
        shifted["y"] = (df["y"] + df["user_id"].map(user_shift)
                        + df["quarter"].map(q_shift))
        fit2 = twoway_fe_ols(shifted, "y", ["x"])
        assert fit2.coefficients["x"] == pytest.approx(fit1.coefficients["x"], abs=1e-8)

    def test_within_cluster_permutation_leaves_se(self):
        df = make_panel(10, 6, beta=0.25, seed=8, noise_sd=0.4)
        fit1 = twoway_fe_ols(df, "y", ["x"])
        # reverse rows within each user
        parts = [g.iloc[::-1] for _, g in df.groupby("user_id", sort=False)]
        fit2 = twoway_fe_ols(pd.concat(parts).reset_index(drop=True), "y", ["x"])
        assert fit1.clustered_se["x"] == fit2.clustered_se["x"]

    def test_collinear_regressor_rejected(self):
        df = make_panel(8, 5, beta=0.3, seed=9, noise_sd=0.2)
        user_const = {u: float(i) for i, u in enumerate(sorted(df["user_id"].unique()))}
        df["bad"] = df["user_id"].map(user_const)  # absorbed by user FE
        with pytest.raises(ValueError, match="collinear with fixed effects: bad"):
            twoway_fe_ols(df, "y", ["x", "bad"])

    def test_single_user_rejected(self):
        df = make_panel(1, 6, beta=0.3, seed=10, noise_sd=0.2)
        with pytest.raises(ValueError):
            twoway_fe_ols(df, "y", ["x"])

    def test_listwise_deletion(self):
        df = make_panel(10, 6, beta=0.5, seed=11, noise_sd=0.0)
        df.loc[df.index[:7], "x"] = np.nan
        fit = twoway_fe_ols(df, "y", ["x"])
        assert fit.n_obs == len(df) - 7
        assert fit.coefficients["x"] == pytest.approx(0.5, abs=1e-8)


class TestBuildDesign:
    def _panel(self):
        rng = np.random.default_rng(12)
        df = make_panel(10, 8, beta=0.0, seed=12, noise_sd=1.0)
        df["ai_share_lag1"] = rng.uniform(0, 1, len(df))
        df["experience_years"] = rng.integers(0, 12, len(df))
        return df

    def test_baseline(self):
        _, cols = build_design(self._panel(), "baseline")
        assert cols == ["ai_share_lag1"]

    def test_interaction_columns(self):
        df, cols = build_design(self._panel(), "interaction")
        assert cols == ["ai_share_lag1", "high_exp", "ai_x_high_exp"]
        high = df["experience_years"] >= 6
        assert (df.loc[high, "ai_x_high_exp"] == df.loc[high, "ai_share_lag1"]).all()
        assert (df.loc[~high, "ai_x_high_exp"] == 0).all()

    def test_interaction_degenerate_collinear_downstream(self):
        df = self._panel()
        df["experience_years"] = 7
        df2, cols = build_design(df, "interaction")
        with pytest.raises(ValueError, match="collinear"):
            twoway_fe_ols(df2, "y", cols)

    def test_quintile_partition(self):
        df, cols = build_design(self._panel(), "quintiles")
        ind = df[cols].to_numpy()
        bins = ind.sum(axis=1)
        assert set(bins.tolist()) <= {0.0, 1.0}  # 0 means first quintile

    def test_five_distinct_values_one_per_bin(self):
        values = np.repeat([0.1, 0.2, 0.3, 0.4, 0.5], 20)
        cuts = quintile_bounds(values)
        assert [quintile_bin(v, cuts) for v in (0.1, 0.2, 0.3, 0.4, 0.5)] == [1, 2, 3, 4, 5]

    def test_tie_goes_to_lower_bin(self):
        cuts = np.array([0.2, 0.4, 0.6, 0.8])
        assert quintile_bin(0.2, cuts) == 1
        assert quintile_bin(0.2000001, cuts) == 2

    def test_all_missing_regressor(self):
        df = self._panel()
        df["ai_share_lag1"] = np.nan
        with pytest.raises(ValueError, match="entirely missing"):
            build_design(df, "baseline")


class TestPlacebo:
    def test_boundary(self):
        df = pd.DataFrame({
            "user_id": ["u1"] * 3,
            "quarter": pd.PeriodIndex(["2021Q4", "2022Q1", "2022Q3"], freq="Q"),
            "y": [1.0, 2.0, 3.0],
        })
        out = placebo_filter(df)
        assert list(out["quarter"].astype(str)) == ["2021Q4"]

    def test_empty_warns(self):
        df = pd.DataFrame({
            "user_id": ["u1"], "quarter": pd.PeriodIndex(["2023Q1"], freq="Q"), "y": [1.0],
        })
        with pytest.warns(UserWarning):
            out = placebo_filter(df)
        assert out.empty

    def test_null_dgp_rejection_rate(self):
        rejections = 0
        n_reps = 40
        for seed in range(n_reps):
            df = make_panel(40, 8, beta=0.0, seed=200 + seed, noise_sd=1.0)
            fit = twoway_fe_ols(df, "y", ["x"])
            rejections += fit.p_values["x"] < 0.05
        assert rejections <= 0.15 * n_reps


class TestCrossSection:
    def test_two_groups_difference_in_means(self):
        df = pd.DataFrame({
            "ai": [0.3, 0.5, 0.4, 0.9, 1.1, 1.0],
            "grp": ["a", "a", "a", "b", "b", "b"],
        })
        fit = cross_section_ols(df, "ai", "grp")
        assert fit.coefficients["intercept"] == pytest.approx(0.4, abs=1e-12)
        assert fit.coefficients["b"] == pytest.approx(0.6, abs=1e-12)

    def test_hc1_matches_brute_force(self):
        rng = np.random.default_rng(13)
        df = pd.DataFrame({
            "yv": rng.normal(size=50),
            "grp": rng.choice(["a", "b", "c"], size=50),
        })
        fit = cross_section_ols(df, "yv", "grp")
        levels = ["b", "c"]
        X = np.column_stack([np.ones(50)] + [(df["grp"] == lv).astype(float) for lv in levels])
        y = df["yv"].to_numpy()
        xtx_inv = np.linalg.inv(X.T @ X)
        beta = xtx_inv @ X.T @ y
        e = y - X @ beta
        meat = sum(np.outer(X[i], X[i]) * e[i] ** 2 for i in range(50))
        v = 50 / (50 - 3) * xtx_inv @ meat @ xtx_inv
        for j, name in enumerate(["intercept", "b", "c"]):
            assert fit.robust_se[name] == pytest.approx(np.sqrt(v[j, j]), abs=1e-10)

    def test_experience_profile_fixture(self):
        # synthetic groups whose means reproduce intercept 0.371 and the
        # most-experienced bin's -0.099 offset exactly
        offsets = {"Exp00": 0.0, "Exp02": -0.017, "Exp04": -0.026, "Exp06": -0.052,
                   "Exp08": -0.066, "Exp10": -0.075, "Exp12": -0.083, "Exp14": -0.099}
        rows = []
        for name, off in offsets.items():
            mean = 0.371 + off
            for delta in (-0.05, 0.0, 0.05):  # symmetric, keeps the mean exact
                rows.append({"ai": mean + delta, "exp_bin": name})
        fit = cross_section_ols(pd.DataFrame(rows), "ai", "exp_bin", reference="Exp00")
        assert fit.coefficients["intercept"] == pytest.approx(0.371, abs=1e-12)
        assert fit.coefficients["Exp14"] == pytest.approx(-0.099, abs=1e-12)

    def test_singular_design_lists_columns(self):
        df = pd.DataFrame({"yv": [1.0, 2.0], "grp": ["a", "b"]})
        # duplicate level b making one observation per level is fine; force
        # aliasing instead by a level with zero rows after dropna
        df2 = pd.DataFrame({"yv": [1.0, 1.5, 2.0, 2.5], "grp": ["a", "a", "b", "b"]})
        fit = cross_section_ols(df2, "yv", "grp")
        assert "b" in fit.coefficients
        with pytest.raises(ValueError):
            cross_section_ols(pd.DataFrame({"yv": [1.0, 2.0], "grp": ["a", "a"]}), "yv", "grp")


def at_day(d):
    return datetime(2023, 1, 1, tzinfo=UTC) + timedelta(days=d)


class TestMovingAverage:
    def test_k1_identity(self):
        pts = [(at_day(i), float(i)) for i in range(5)]
        series = moving_average_ai("u", pts, k=1)
        assert [p.value for p in series.points] == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_constant_scores(self):
        pts = [(at_day(i), 0.4) for i in range(10)]
        series = moving_average_ai("u", pts, k=4)
        assert all(p.value == pytest.approx(0.4) for p in series.points)
        assert len(series.points) == 10 - 4 + 1

    def test_window_arithmetic(self):
        pts = [(at_day(i), float(i)) for i in range(6)]
        series = moving_average_ai("u", pts, k=4)
        # first center index 2: mean of values 0..3
        assert series.points[0].value == pytest.approx(1.5)
        assert series.points[0].time == at_day(2)

    def test_long_span_dropped(self):
        pts = [(at_day(0), 1.0), (at_day(1), 1.0), (at_day(2), 1.0), (at_day(185), 1.0)]
        series = moving_average_ai("u", pts, k=4)
        assert series.points == []
        ok = [(at_day(0), 1.0), (at_day(1), 1.0), (at_day(2), 1.0), (at_day(184), 1.0)]
        assert len(moving_average_ai("u", ok, k=4).points) == 1

    def test_too_few_functions(self):
        assert moving_average_ai("u", [(at_day(0), 1.0)], k=4).points == []


class TestInterpolate:
    def _series(self, points):
        from codeprov.econometrics import MovingAveragePoint
        s = MovingAverageSeries(user_id="u")
        for t, v in points:
            s.points.append(MovingAveragePoint(time=t, value=v, k=4, span_days=1.0))
        return s

    def test_point_exactly_at_midpoint(self):
        q = pd.Period("2023Q1", freq="Q")
        from codeprov.econometrics import quarter_midpoint
        mid = quarter_midpoint(q).to_pydatetime()
        series = self._series([(mid, 0.7)])
        assert interpolate_to_quarter(series, [q])[q] == pytest.approx(0.7)

    def test_equal_values_both_sides(self):
        q = pd.Period("2023Q1", freq="Q")
        series = self._series([(at_day(10), 0.3), (at_day(70), 0.3)])
        assert interpolate_to_quarter(series, [q])[q] == pytest.approx(0.3)

    def test_linear_between(self):
        q = pd.Period("2023Q1", freq="Q")
        from codeprov.econometrics import quarter_midpoint
        mid = quarter_midpoint(q)
        t1 = (mid - pd.Timedelta(days=10)).to_pydatetime()
        t2 = (mid + pd.Timedelta(days=30)).to_pydatetime()
        series = self._series([(t1, 0.0), (t2, 1.0)])
        assert interpolate_to_quarter(series, [q])[q] == pytest.approx(0.25)

    def test_wide_bracket_missing(self):
        q = pd.Period("2023Q1", freq="Q")
        from codeprov.econometrics import quarter_midpoint
        mid = quarter_midpoint(q)
        t1 = (mid - pd.Timedelta(days=95)).to_pydatetime()
        t2 = (mid + pd.Timedelta(days=95)).to_pydatetime()
        series = self._series([(t1, 0.0), (t2, 1.0)])
        assert interpolate_to_quarter(series, [q])[q] is None

    def test_one_sided_nearest(self):
        q = pd.Period("2023Q1", freq="Q")
        series = self._series([(at_day(200), 0.9), (at_day(260), 0.1)])
        assert interpolate_to_quarter(series, [q])[q] == pytest.approx(0.9)

    def test_empty_series(self):
        q = pd.Period("2023Q1", freq="Q")
        assert interpolate_to_quarter(self._series([]), [q])[q] is None


class TestAttenuation:
    def test_constant_bhat(self):
        inp = AttenuationInput(k_values=[4, 8, 16, 32], b_hat=[0.4] * 4)
        beta, _ = attenuation_extrapolate(inp)
        assert beta == pytest.approx(0.4, abs=1e-12)

    def test_no_noise_factors_one(self):
        inp = AttenuationInput(k_values=[4, 8], b_hat=[0.4, 0.4],
                               sigma_ai_sq=0.05, sigma_eta_sq=0.0)
        _, factors = attenuation_extrapolate(inp)
        assert factors == {4: 1.0, 8: 1.0}

    def test_equal_variances_k1_half(self):
        inp = AttenuationInput(k_values=[1, 2], b_hat=[0.2, 0.3],
                               sigma_ai_sq=0.2, sigma_eta_sq=0.1)
        _, factors = attenuation_extrapolate(inp)
        assert factors[1] == pytest.approx(0.5, abs=1e-12)

    def test_weighted_fit_uses_precision(self):
        # third point has huge SE: the fit should nearly ignore it
        inp = AttenuationInput(k_values=[4, 8, 16], b_hat=[0.30, 0.35, 5.0],
                               se=[0.01, 0.01, 100.0])
        beta, _ = attenuation_extrapolate(inp)
        ref = attenuation_extrapolate(
            AttenuationInput(k_values=[4, 8], b_hat=[0.30, 0.35], se=[0.01, 0.01]))[0]
        assert beta == pytest.approx(ref, abs=1e-3)

    def test_duplicate_k_rejected(self):
        with pytest.raises(ValueError):
            attenuation_extrapolate(AttenuationInput(k_values=[4, 4], b_hat=[0.1, 0.2]))
