import json
import math

import numpy as np
import pytest
from scipy.stats import kendalltau

from foresee.dataio import (
    Cohort,
    Schema,
    censoring_horizon,
    generate_cohort,
    kfold_split,
    read_cohort,
    write_cohort,
)
from foresee.errors import ValidationError
from foresee.metrics import c_index
from foresee.numerics import RngStream

SMALL = Schema(d_x=6, rna_dim=16, cnv_mut_dim=8, grid_shapes=((3, 3), (2, 2), (2, 1)))


def small_cohort(n=6, seed=0, **kw):
    return generate_cohort(n, SMALL, rng=RngStream(seed, "datagen"), **kw)


class TestGenerate:
    def test_no_censoring(self):
        c = small_cohort(40, censoring_rate=0.0)
        assert (c.events == 1).all()

    def test_deterministic(self):
        a, b = small_cohort(10, seed=3), small_cohort(10, seed=3)
        assert all(p == q for p, q in zip(a.patients, b.patients))
        assert np.array_equal(a.latent_risk, b.latent_risk)

    def test_invariants(self):
        c = small_cohort(30, censoring_rate=0.4)
        c.validate()
        assert (c.times > 0).all()
        assert set(np.unique(c.events)) <= {0, 1}
        for p in c.patients:
            assert len(p.pathology_small.coords) == 9
            assert len(p.pathology_medium.coords) == 4
            assert len(p.pathology_large.coords) == 2

    @pytest.mark.parametrize("n,rate", [(1, 0.3), (10, 1.0), (10, -0.1)])
    def test_bad_args(self, n, rate):
        with pytest.raises(ValidationError):
            small_cohort(n, censoring_rate=rate)

    def test_latent_risk_calibration(self):
        # default schema, n=200: the true latent risk must rank survival well
        c = generate_cohort(200, rng=RngStream(7, "datagen"))
        assert c_index(c.latent_risk, c.times, c.events) >= 0.80

    def test_censoring_rate_hit_in_expectation(self):
        fracs = [1 - small_cohort(400, seed=s, censoring_rate=0.3).events.mean() for s in range(5)]
        assert np.mean(fracs) == pytest.approx(0.3, abs=0.03)

    def test_censoring_horizon_monotone(self):
        assert censoring_horizon(0.0, 1e-3, 2.5) == math.inf
        assert censoring_horizon(0.5, 1e-3, 2.5) < censoring_horizon(0.2, 1e-3, 2.5)

    def test_higher_risk_shorter_survival(self):
        for seed in range(20):
            c = small_cohort(80, seed=seed)
            dead = c.events == 1
            tau, _ = kendalltau(c.latent_risk[dead], c.times[dead])
            assert tau < 0


class TestRoundTrip:
    def test_write_read_equal(self, tmp_path):
        c = small_cohort(5, censoring_rate=0.4)
        write_cohort(c, tmp_path)
        back = read_cohort(tmp_path)
        assert back.schema == c.schema
        assert all(p == q for p, q in zip(back.patients, c.patients))
        assert np.array_equal(back.latent_risk, c.latent_risk)

    def test_layout(self, tmp_path):
        c = small_cohort(2)
        write_cohort(c, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        pid = c.patients[0].id
        assert {"manifest.json", "survival.csv", f"P_{pid}_s.csv", f"P_{pid}_m.csv", f"P_{pid}_l.csv", f"R_{pid}.csv", f"CM_{pid}.csv"} <= names
        header = (tmp_path / f"P_{pid}_s.csv").read_text().splitlines()[0]
        assert header == "row,col," + ",".join(f"f{j}" for j in range(SMALL.d_x))
        assert (tmp_path / "survival.csv").read_text().splitlines()[0] == "id,time,event"

    def test_shortest_roundtrip_decimal(self, tmp_path):
        rng = np.random.default_rng(0)
        c = small_cohort(4)
        for p in c.patients:
            p.time = float(np.exp(rng.uniform(-20, 20)))
            p.rna = rng.standard_normal(SMALL.rna_dim) * 10.0 ** rng.integers(-300, 300, SMALL.rna_dim)
        write_cohort(c, tmp_path)
        back = read_cohort(tmp_path)
        for p, q in zip(c.patients, back.patients):
            assert p.time == q.time
            assert np.array_equal(p.rna, q.rna)

    def test_empty_cohort(self, tmp_path):
        with pytest.raises(ValidationError):
            write_cohort(Cohort([], SMALL), tmp_path)


class TestReadValidation:
    @pytest.fixture
    def cohort_dir(self, tmp_path):
        write_cohort(small_cohort(3), tmp_path)
        return tmp_path

    def test_valid(self, cohort_dir):
        c = read_cohort(cohort_dir)
        assert len(c) == 3

    def test_negative_time(self, cohort_dir):
        lines = (cohort_dir / "survival.csv").read_text().splitlines()
        pid = lines[2].split(",")[0]
        lines[2] = f"{pid},-1,1"
        (cohort_dir / "survival.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=f"{pid}.*time"):
            read_cohort(cohort_dir)

    def test_bad_event(self, cohort_dir):
        lines = (cohort_dir / "survival.csv").read_text().splitlines()
        pid, t, _ = lines[1].split(",")
        lines[1] = f"{pid},{t},2"
        (cohort_dir / "survival.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="event"):
            read_cohort(cohort_dir)

    def test_duplicate_coordinate(self, cohort_dir):
        path = sorted(cohort_dir.glob("P_*_s.csv"))[0]
        lines = path.read_text().splitlines()
        first = lines[1].split(",")
        second = lines[2].split(",")
        second[:2] = first[:2]
        lines[2] = ",".join(second)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match="duplicate grid coordinate"):
            read_cohort(cohort_dir)

    def test_non_finite(self, cohort_dir):
        path = sorted(cohort_dir.glob("R_*.csv"))[0]
        vals = path.read_text().strip().split(",")
        vals[3] = "nan"
        path.write_text(",".join(vals) + "\n")
        with pytest.raises(ValidationError, match="rna"):
            read_cohort(cohort_dir)

    def test_missing_file(self, cohort_dir):
        sorted(cohort_dir.glob("CM_*.csv"))[0].unlink()
        with pytest.raises(ValidationError, match="missing file"):
            read_cohort(cohort_dir)

    def test_schema_mismatch(self, cohort_dir):
        m = json.loads((cohort_dir / "manifest.json").read_text())
        m["schema"]["rna_dim"] = 17
        (cohort_dir / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError, match="rna"):
            read_cohort(cohort_dir)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            read_cohort(tmp_path)


class TestKFold:
    def test_even(self):
        folds = kfold_split(10, 5, RngStream(0, "folds"))
        assert [len(f) for f in folds] == [2] * 5

    def test_uneven(self):
        folds = kfold_split(7, 5, RngStream(0, "folds"))
        assert sorted(len(f) for f in folds) == [1, 1, 1, 2, 2]

    def test_partition_and_determinism(self):
        for n in range(2, 40):
            for k in range(2, min(n, 7) + 1):
                folds = kfold_split(n, k, RngStream(n, "folds"))
                allidx = np.concatenate(folds)
                assert sorted(allidx.tolist()) == list(range(n))
                sizes = [len(f) for f in folds]
                assert max(sizes) - min(sizes) <= 1
        a = kfold_split(20, 5, RngStream(9, "folds"))
        b = kfold_split(20, 5, RngStream(9, "folds"))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    @pytest.mark.parametrize("n,k", [(4, 5), (4, 1)])
    def test_errors(self, n, k):
        with pytest.raises(ValidationError):
            kfold_split(n, k, RngStream(0, "folds"))
