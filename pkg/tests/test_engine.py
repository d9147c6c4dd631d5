import math

import numpy as np
import pytest

from fcsimpute.data import Dataset, IntervalGrid, VariableSpec, validate_dataset
from fcsimpute.fitters import FitError
from fcsimpute.engine import (ImputationConfig, ImputationState, bias_adjusted_rate, build_history,
                              impute_binary, impute_continuous, impute_tte, impute_ttre,
                              run_multiple_imputation, run_single_imputation,
                              truncate_after_terminal)
from fcsimpute.fitters import ParameterDraw
from fcsimpute.rng import StreamKey
from fcsimpute.simgen import censor_at, preset, simulate_trial

from conftest import GRID, SCHEMA, subject, toy_dataset


def clones(n, tc, schema=SCHEMA, grid=GRID):
    """``n`` identical subjects censored at ``tc`` with no events."""
    J = grid.J
    seen = np.asarray(grid.times) <= tc
    long = {s.name: np.where(seen, 0.0, np.nan)[None, :].repeat(n, axis=0)
            for s in schema if s.kind in ("continuous", "binary")}
    return Dataset(schema=tuple(schema), grid=grid, ids=[f"s{i}" for i in range(n)],
                   treatment=np.zeros(n, dtype=int), baseline=np.zeros((n, 1)),
                   censor_time=np.full(n, tc), t1_time=np.full(n, tc), t1_event=np.zeros(n, dtype=int),
                   rec_subject=np.zeros(0, dtype=np.int64), rec_time=np.zeros(0),
                   longitudinal=long, baseline_names=("x_1",))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(m=0), dict(history_mode="x"), dict(dependency="x"),
                                    dict(ttre_rate_mode="x"), dict(count_scale="x")])
    def test_rejects_bad_settings(self, kw):
        with pytest.raises(ValueError):
            ImputationConfig(**kw)


class TestHistory:
    def test_first_interval_has_baseline_only(self, toy):
        h = build_history(toy, "A", 1, "continuous")
        assert h.labels == ("(intercept)", "x_1", "treatment", "y3[0]", "y4[0]")
        assert h.values.tolist() == [1.0, 0.5, 0.0, 0.0, 0.0]

    def test_full_history_hand_enumerated(self, toy):
        h = build_history(toy, "A", 3, "ttre")
        assert h.labels == ("(intercept)", "x_1", "treatment", "y3[0]", "y4[0]",
                            "y1*[1]", "y2#[1]", "y3[1]", "y4[1]",
                            "y1*[2]", "y2#[2]", "y3[2]", "y4[2]")
        # A: recurrent events at 1 and 4, terminal-free TTE event at 7.5
        assert h.values.tolist() == [1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.1, 1.0, 0.0, 1.0, 0.2, 0.0]

    def test_time_to_event_model_omits_event_flags(self, toy):
        labels = build_history(toy, "A", 3, "tte").labels
        assert not any(l.startswith("y1*") for l in labels)
        assert len(labels) == 13 - 2

    def test_composite_history(self, toy):
        h = build_history(toy, "D", 3, "continuous", mode="composite")
        assert h.labels == ("(intercept)", "x_1", "treatment", "y1*[<=2]", "y2#[<=2]", "y3[2]", "y4[2]")
        assert h.values.tolist() == [1.0, 1.5, 1.0, 0.0, 2.0, 0.2, 0.0]

    def test_reduced_dependency_drops_cross_type_history(self, toy):
        cfg = ImputationConfig(dependency="reduced")
        long = build_history(toy, "A", 3, "continuous", cfg=cfg).labels
        clin = build_history(toy, "A", 3, "tte", cfg=cfg).labels
        assert not any(l.startswith(("y1", "y2")) for l in long)
        assert not any(l.startswith(("y3", "y4")) for l in clin)

    def test_log_count_scale(self, toy):
        cfg = ImputationConfig(count_scale="log1p")
        h = build_history(toy, "D", 3, "continuous", mode="composite", cfg=cfg)
        assert h.values[h.labels.index("y2#[<=2]")] == pytest.approx(math.log(3.0))

    def test_missing_history_is_an_ordering_error(self, toy):
        with pytest.raises(RuntimeError):
            build_history(toy, "C", 3, "continuous")


class TestBiasAdjustedRate:
    def test_zero_variance(self):
        assert bias_adjusted_rate([0.3, -0.2], [1.0, 2.0], np.zeros((2, 2))) == pytest.approx(math.exp(-0.1))

    def test_hand_value(self):
        # w'theta = 0 and w'Vw = 2
        assert bias_adjusted_rate([1.0, -1.0], [1.0, 1.0], np.eye(2)) == pytest.approx(math.exp(-1), abs=1e-15)
        assert math.exp(-1) == pytest.approx(0.36788, abs=1e-5)

    def test_rowwise(self):
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        out = bias_adjusted_rate([0.5, 0.25], w, np.diag([0.2, 0.1]))
        assert out == pytest.approx([math.exp(0.5 - 0.1), math.exp(0.5 - 0.2)])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bias_adjusted_rate([1.0], [1.0, 2.0], np.eye(2))


class TestLongitudinalSteps:
    def setup_method(self):
        self.state = ImputationState(toy_dataset())
        self.W = build_history(toy_dataset(), "C", 1, "continuous")
        self.rows = np.zeros(10**5, dtype=int)

    def design(self, n):
        from fcsimpute.fitters import DesignMatrix
        return DesignMatrix(np.repeat(self.W.values[None, :], n, axis=0), self.W.labels)

    def test_noiseless_continuous(self):
        beta = np.array([0.2, 1.0, 0.5, -0.3, 0.1])
        vals = impute_continuous(self.state, "y3", 1, ParameterDraw(beta, 0.0), StreamKey(0).stream(),
                                 np.array([2]), self.design(1))
        assert vals[0] == pytest.approx(self.W.values @ beta)
        assert self.state.long["y3"][2, 1] == vals[0]

    def test_continuous_moments(self):
        beta = np.array([0.2, 1.0, 0.5, -0.3, 0.1])
        vals = impute_continuous(self.state, "y3", 1, ParameterDraw(beta, 0.49), StreamKey(1).stream(),
                                 self.rows, self.design(len(self.rows)))
        n = len(vals)
        assert abs(vals.mean() - self.W.values @ beta) < 3 * math.sqrt(0.49 / n)
        assert abs(vals.var(ddof=1) - 0.49) < 3 * 0.49 * math.sqrt(2 / (n - 1))

    @pytest.mark.parametrize("eta,p", [(0.0, 0.5), (20.0, 1.0), (1.2, 1 / (1 + math.exp(-1.2)))])
    def test_binary_frequency(self, eta, p):
        beta = np.array([eta, 0.0, 0.0, 0.0, 0.0])
        vals = impute_binary(self.state, "y4", 1, ParameterDraw(beta), StreamKey(2).stream(),
                             self.rows, self.design(len(self.rows)))
        se = math.sqrt(max(p * (1 - p), 1e-12) / len(vals))
        assert set(np.unique(vals)) <= {0.0, 1.0}
        assert abs(vals.mean() - p) < 3 * se + 1e-8


class TestClinicalSteps:
    def test_subject_with_earlier_event_untouched(self):
        d = Dataset.from_subjects(SCHEMA, GRID, [subject("A", tc=6.0, tte=(2.0, 1))])
        state = ImputationState(d)
        assert not state.pending[0]
        rows = np.flatnonzero(state.pending)
        impute_tte(state, 3, None, None, StreamKey(0).stream(), rows, None, rate=1e300)
        assert state.t1[0] == 2.0 and state.ev1[0] == 1

    def test_infinite_rate_fires_at_start(self):
        state = ImputationState(clones(3, 4.0))
        hit = impute_tte(state, 2, None, None, StreamKey(0).stream(), np.arange(3), None, rate=1e300)
        assert hit.all() and np.all(state.ev1 == 1)
        assert state.t1 == pytest.approx(np.full(3, 4.0))
        assert np.all(state.t1 >= 4.0) and not state.pending.any()

    def test_exponential_oracle(self):
        n, lam, tc = 10**5, 0.3, 4.0
        state = ImputationState(clones(n, tc))
        key = StreamKey(3)
        for j in (2, 3, 4):
            rows = np.flatnonzero(state.pending)
            impute_tte(state, j, None, None, key.child("j", j).stream(), rows, None, rate=lam)
        s = np.where(state.ev1 == 1, state.t1 - tc, np.inf)
        grid = np.linspace(0.0, 8.0, 801)
        emp = (s[None, :] > grid[:, None]).mean(axis=1)
        # Kolmogorov-Smirnov 1% critical value
        assert np.max(np.abs(emp - np.exp(-lam * grid))) < 1.63 / math.sqrt(n)
        # events never land before the censoring time or after the study ends
        assert s.min() > 0 and np.all(state.t1[state.ev1 == 1] <= 12.0)

    def test_zero_rate_appends_nothing(self):
        state = ImputationState(clones(5, 4.0))
        assert impute_ttre(state, 2, None, None, StreamKey(0).stream(), np.arange(5), None, rate=0.0) == 0
        assert state.counts.sum() == 0

    def test_diverged_rate_is_refused(self):
        state = ImputationState(clones(3, 4.0))
        with pytest.raises(FitError, match="interval 2: .*diverged"):
            impute_ttre(state, 2, None, None, StreamKey(0).stream(), np.arange(3), None, rate=1e6)
        assert state.counts.sum() == 0

    def test_poisson_process_oracle(self):
        n, lam, tc = 10**5, 0.7, 4.0
        state = ImputationState(clones(n, tc))
        impute_ttre(state, 2, None, None, StreamKey(4).stream(), np.arange(n), None, rate=lam)
        counts = state.counts[:, 2]
        mean = lam * (6.0 - tc)
        assert abs(counts.mean() - mean) < 3 * math.sqrt(mean / n)
        # Poisson: variance equals mean
        assert abs(counts.var(ddof=1) - mean) < 3 * math.sqrt((mean + 2 * mean**2) / n)
        t = np.concatenate(state.new_time)
        assert t.min() > tc and t.max() <= 6.0

    def test_rate_modes_agree_on_unit_intervals(self):
        cfg = preset("paper_main", n=150, grid=(0.0, 1.0, 2.0, 3.0, 4.0))
        _, cens = simulate_trial(cfg, StreamKey(8))
        a = run_single_imputation(cens, ImputationConfig(ttre_rate_mode="as_paper"), 1)
        b = run_single_imputation(cens, ImputationConfig(ttre_rate_mode="offset_consistent"), 1)
        assert a.same_as(b)


class TestTruncation:
    def terminal(self, **kw):
        schema = (VariableSpec("y1", "tte", terminal=True),) + SCHEMA[1:]
        return Dataset.from_subjects(schema, GRID, [subject("A", **kw)])

    def test_non_terminal_identity(self, toy):
        assert truncate_after_terminal(toy) is toy

    def test_truncates_after_event(self):
        d = truncate_after_terminal(self.terminal(tte=(7.5, 1), rec=(1.0, 7.0, 8.0, 11.0)))
        assert d.censor_time[0] == 7.5
        assert d.rec_time.tolist() == [1.0, 7.0]
        assert np.isnan(d.longitudinal["y3"][0, 3:]).all()
        assert not np.isnan(d.longitudinal["y3"][0, :3]).any()
        assert validate_dataset(d) == []

    def test_no_event_identity(self):
        d = self.terminal(tte=(12.0, 0), rec=(5.0,))
        assert truncate_after_terminal(d) is d


class TestRunImputation:
    def test_no_missing_data_is_identity(self, small_trial):
        full, _ = small_trial
        assert run_single_imputation(full, ImputationConfig(), 1).same_as(full)

    def test_completed_data_are_valid_and_agree_before_censoring(self, small_trial):
        _, cens = small_trial
        out = run_single_imputation(cens, ImputationConfig(), 1)
        assert validate_dataset(out) == []
        assert all(not np.isnan(v).any() for v in out.longitudinal.values())
        seen = np.asarray(GRID.times)[None, :] <= cens.censor_time[:, None]
        for k, v in cens.longitudinal.items():
            assert np.array_equal(out.longitudinal[k][seen], v[seen])
        for i in range(cens.n):
            before = out.recurrent_times(i)
            assert np.array_equal(before[before <= cens.censor_time[i]], cens.recurrent_times(i))
        done = cens.t1_event == 1
        assert np.array_equal(out.t1_time[done], cens.t1_time[done])

    def test_mostly_censored_at_start(self, small_trial):
        full, _ = small_trial
        d = full.subset(np.arange(60))
        tc = np.where(np.arange(60) < 45, 12.0, 0.5)
        out = run_single_imputation(censor_at(d, tc), ImputationConfig(), 1)
        assert validate_dataset(out) == []
        assert np.all(out.censor_time == 12.0)
        assert all(not np.isnan(v).any() for v in out.longitudinal.values())

    def test_by_group_is_blind_to_the_other_arm(self, small_trial):
        _, cens = small_trial
        cfg = ImputationConfig(by_group=True)
        g1 = cens.treatment == 1
        long = {k: np.where(g1[:, None], v + 0.7 if k == "y3" else v, v) for k, v in cens.longitudinal.items()}
        shifted = cens.replace(longitudinal=long, baseline=np.where(g1[:, None], cens.baseline * 2, cens.baseline))
        a = run_single_imputation(cens, cfg, 1)
        b = run_single_imputation(shifted, cfg, 1)
        g0 = np.flatnonzero(~g1)
        assert a.subset(g0).same_as(b.subset(g0))
        assert not a.subset(np.flatnonzero(g1)).same_as(b.subset(np.flatnonzero(g1)))

    def test_m_one_matches_single(self, small_trial):
        _, cens = small_trial
        cfg = ImputationConfig(m=1)
        assert run_multiple_imputation(cens, cfg)[0].same_as(run_single_imputation(cens, cfg, 1))

    def test_imputations_differ(self, small_trial):
        _, cens = small_trial
        out = run_multiple_imputation(cens, ImputationConfig(m=3))
        missing = np.isnan(cens.longitudinal["y3"])
        vals = [o.longitudinal["y3"][missing] for o in out]
        assert not np.array_equal(vals[0], vals[1]) and not np.array_equal(vals[1], vals[2])

    def test_reproducible_and_worker_independent(self, small_trial):
        _, cens = small_trial
        cfg = ImputationConfig(m=2)
        a = run_multiple_imputation(cens, cfg, workers=1)
        b = run_multiple_imputation(cens, cfg, workers=2)
        assert all(x.same_as(y) for x, y in zip(a, b))
