import math
import os

import numpy as np
import pytest

from planval import trainer as tr_mod
from planval.checkpoint import config_digest, load_checkpoint
from planval.config import (TABLE1, TrainerConfig, format_config, load_config, parse_config,
                            preset, rollout_schedule)
from planval.errors import ConfigError, NumericError
from planval.trainer import (METRICS_HEADER, MetricsRow, MetricsTable, Trainer, make_streams,
                             restore_trainer, run_ablation, run_mppve)

SMALL = """
epochs = 2
steps_per_epoch = 20
start_size = 200
rollouts = 16
critic_updates = 3
batch_size = 32
hidden = 16,16
model.hidden = 16
model.batch_size = 16
model.max_epochs = 3
metrics.eval_interval = 10
metrics.eval_episodes = 1
schedule.b = 300
"""


def small(extra=""):
    return parse_config(SMALL + extra)


@pytest.fixture(scope="module")
def sac_run():
    return run_mppve(small("variant = sac"))


# -- schedule and config files -----------------------------------------------------------------


class TestSchedule:

    def test_upper_clamp(self):
        assert rollout_schedule(50_000, 1, 4, 20_000, 50_000) == 4

    def test_lower_clamp(self):
        assert rollout_schedule(10_000, 1, 4, 20_000, 50_000) == 1

    def test_truncates_midpoint(self):
        assert rollout_schedule(35_000, 1, 4, 20_000, 50_000) == 2

    def test_needs_increasing_window(self):
        with pytest.raises(ValueError):
            rollout_schedule(0, 1, 4, 5, 5)

    def test_monotone_and_bounded(self):
        vals = [rollout_schedule(t, 1, 20, 20_000, 150_000) for t in range(0, 200_000, 997)]
        assert vals == sorted(vals) and vals[0] == 1 and vals[-1] == 20


class TestConfig:

    def test_round_trip(self):
        cfg = small("variant = sac-mve\nschedule.x = 2\nschedule.y = 3\nsoft = false\nstop_return = -150.5")
        again = parse_config(format_config(cfg))
        assert again == cfg
        unset = small()
        assert format_config(parse_config(format_config(unset))) == format_config(unset)

    def test_comments_and_dotted_keys(self):
        cfg = parse_config("# header\nk = 2   # plan length\nmodel.members = 7\n\nbuffer.env_capacity = 50\n")
        assert cfg.k == 2 and cfg.model.members == 7 and cfg.buffer.env_capacity == 50

    @pytest.mark.parametrize("text", ["nokey", "unknown = 3", "k = three", "model = 3",
                                      "variant = dqn", "k = 0", "schedule.a = 9\nschedule.b = 3",
                                      "model.elites = 9", "soft = maybe", "polyak = 0"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_load_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("variant = sac\nseed = 4\n", encoding="utf-8")
        cfg = load_config(p)
        assert cfg.variant == "sac" and cfg.seed == 4

    def test_mve_horizon_defaults_to_plan_length(self):
        assert TrainerConfig(k=3).horizon == 2
        assert TrainerConfig(k=3, mve_horizon=0).horizon == 0

    def test_presets_follow_published_table(self):
        hop = preset("hopper")
        assert (hop.k, hop.critic_updates, hop.target_entropy) == (3, 20, -1.0)
        s = hop.schedule
        assert (s.x, s.y, s.a, s.b) == (1, 4, 20_000, 50_000)
        assert preset("ant").schedule.y == 20 and preset("ant").k == 2
        assert preset("inverted-pendulum").target_entropy == -0.05
        assert {p["target_entropy"] for p in TABLE1.values()} == {-0.05, -1.0, -3.0, -4.0}


# -- metrics table -----------------------------------------------------------------------------


def test_metrics_csv_round_trip(tmp_path):
    t = MetricsTable()
    t.append(MetricsRow(10, -1.0 / 3.0, 0.5, -2.0, 0.0, 0.2, 1, 0.0))
    t.append(MetricsRow(20, 1e-300, 0.25, 3.0, 1.5, 0.1, 2, 0.0))
    p = tmp_path / "m.csv"
    t.write(p)
    assert p.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    back = MetricsTable.read(p)
    assert back.rows == t.rows
    with pytest.raises(ValueError):
        t.append(MetricsRow(20, 0, 0, 0, 0, 0, 0, 0))


def test_streams_are_independent():
    a, b = make_streams(3), make_streams(3)
    assert a["policy"].random() == b["policy"].random()
    assert a["policy"].random() != a["env"].random()


# -- training runs -----------------------------------------------------------------------------


class TestRuns:

    def test_zero_epochs_only_warmup(self):
        tr = Trainer(small("epochs = 0"))
        res = tr.run()
        assert len(res.metrics) == 0
        assert len(tr.env_buf) == 200
        assert res.counters["critic_updates"] == 0 and res.counters["actor_updates"] == 0

    @pytest.mark.parametrize("variant", ["mppve", "sac-mve-mpi"])
    def test_repeatable(self, variant):
        a = run_mppve(small(f"variant = {variant}")).metrics.to_csv()
        b = run_mppve(small(f"variant = {variant}")).metrics.to_csv()
        assert a == b

    @pytest.mark.parametrize("extra", ["variant = sac-mve\nmve_horizon = 0", "variant = sac-mppve\nk = 1"])
    def test_degenerate_variants_match_baseline(self, sac_run, extra):
        res = run_ablation(small(extra))
        for col in ("return", "critic_loss", "actor_loss", "alpha"):
            np.testing.assert_allclose(res.metrics.column(col), sac_run.metrics.column(col),
                                       rtol=0, atol=1e-12)

    def test_actor_batch_composition(self):
        plain = run_ablation(small("variant = sac-mve")).counters
        mixed = run_ablation(small("variant = sac-mve-mpi")).counters
        assert plain["actor_model_states"] == 0 and plain["actor_real_states"] > 0
        assert mixed["actor_model_states"] > 0

    def test_update_ratio_and_real_states_only(self):
        res = run_mppve(small())
        c = res.counters
        assert c["per_step_critic"] == {3} and c["per_step_actor"] == {1}
        assert c["critic_updates"] == 3 * 40 and c["actor_updates"] == 40
        assert c["actor_model_states"] == 0
        assert c["model_trainings"] == 2
        assert np.all(res.metrics.column("rollout_length") >= 1)

    def test_ablation_rejects_main_variant(self):
        with pytest.raises(ValueError):
            run_ablation(small())


class TestOutputs:

    def test_files_written(self, tmp_path):
        res = run_mppve(small("seed = 5"), str(tmp_path))
        assert sorted(os.listdir(tmp_path)) == ["final.ckpt", "metrics.csv", "timing.csv"]
        table = MetricsTable.read(tmp_path / "metrics.csv")
        assert table.rows == res.metrics.rows
        assert list(table.column("env_step")) == [210, 220, 230, 240]
        assert np.all(table.column("wall_clock") == 0.0)
        arrays, meta = load_checkpoint(tmp_path / "final.ckpt")
        assert meta["seed"] == 5 and meta["step"] == 240
        assert meta["config_digest"] == config_digest(meta["config"])
        assert "actor/actor.w0" in arrays and "model/trained" in arrays

    def test_wall_clock_column_opt_in(self):
        res = run_mppve(small("variant = sac\nmetrics.wall_clock = true"))
        assert np.all(res.metrics.column("wall_clock") > 0.0)

    def test_restore_matches_saved_weights(self, tmp_path):
        run_mppve(small(), str(tmp_path))
        tr = restore_trainer(tmp_path / "final.ckpt")
        arrays, _ = load_checkpoint(tmp_path / "final.ckpt")
        for name, v in tr.actor.params.items():
            np.testing.assert_array_equal(v, arrays[f"actor/{name}"])
        assert tr.model.trained and tr.t == 240

    def test_crash_leaves_checkpoint(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = tr_mod.critic_update

        def flaky(*a, **kw):
            calls["n"] += 1
            if calls["n"] > 5:
                raise NumericError("loss overflow")
            return real(*a, **kw)
        monkeypatch.setattr(tr_mod, "critic_update", flaky)
        with pytest.raises(NumericError):
            run_mppve(small(), str(tmp_path))
        _, meta = load_checkpoint(tmp_path / "crash.ckpt")
        assert "loss overflow" in meta["error"]
        assert not (tmp_path / "final.ckpt").exists()

    def test_stop_return(self):
        res = run_mppve(small("variant = sac\nstop_return = -1e9"))
        assert len(res.metrics) == 1


def test_sac_baseline_nonsoft_has_zero_alpha(sac_run):
    res = run_mppve(small("variant = sac\nsoft = false"))
    assert np.all(res.metrics.column("alpha") == 0.0)
    assert np.all(sac_run.metrics.column("alpha") > 0.0)
    assert math.isfinite(res.metrics.rows[-1].return_)
