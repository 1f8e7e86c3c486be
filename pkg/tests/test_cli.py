import json

import numpy as np
import pytest

from bisimlab.bisim import load_measurement
from bisimlab.cli import (
    EXIT_ASSERTION,
    EXIT_CONFIG,
    EXIT_CONVERGENCE,
    EXIT_OK,
    ConfigError,
    main,
    parse_config_text,
    validate_config,
)


def write(path, text):
    path.write_text(text)
    return path


def run(tmp_path, command, config_text, *extra):
    cfg = write(tmp_path / f"{command}.cfg", "version = 1\n" + config_text)
    return main([command, "--config", str(cfg), "--out", str(tmp_path), *extra])


def load_table(path):
    return load_measurement(path).g


@pytest.fixture
def mdp_dir(tmp_path):
    assert run(tmp_path, "gen", "n_states = 5\nn_actions = 2\nseed = 3\n") == EXIT_OK
    return tmp_path


class TestConfig:
    def test_parse_comments_and_overrides(self):
        raw = parse_config_text("# header\na = 1\nb = x  # trailing\na = 2\n")
        assert raw == {"a": "2", "b": "x"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            validate_config("gen", {"version": "1", "n_sates": "4"})

    def test_version_mismatch(self):
        with pytest.raises(ConfigError, match="version"):
            validate_config("gen", {"version": "2"})

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="required"):
            validate_config("collect", {"version": "1"})

    def test_defaults_filled(self):
        cfg = validate_config("gen", {"version": "1"})
        assert cfg["n_states"] == 10 and cfg["seed"] == 0


class TestExitCodes:
    def test_unknown_key_exit(self, tmp_path):
        assert run(tmp_path, "gen", "colour = blue\n") == EXIT_CONFIG

    def test_bad_value_exit(self, tmp_path):
        assert run(tmp_path, "gen", "n_states = many\n") == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_input_file(self, tmp_path):
        assert run(tmp_path, "collect", "mdp = absent.txt\n") == EXIT_CONFIG

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == EXIT_CONFIG

    def test_convergence_failure(self, mdp_dir):
        code = run(mdp_dir, "solve", "mdp = mdp.txt\nsolver = scaled\ntol = 1e-14\nmax_iter = 3\n")
        assert code == EXIT_CONVERGENCE

    def test_assertion_failure(self, tmp_path):
        text = "suites = tau-limit\ntau-limit.n_mdps = 1\ntau-limit.threshold = 1e-12\n"
        assert run(tmp_path, "verify", text) == EXIT_ASSERTION
        assert "fail" in (tmp_path / "report.csv").read_text()

    def test_unknown_suite(self, tmp_path):
        assert run(tmp_path, "verify", "suites = lemma3\n") == EXIT_CONFIG


class TestPipeline:
    def test_gen_collect_train(self, mdp_dir):
        assert run(mdp_dir, "collect", "mdp = mdp.txt\nn_transitions = 300\nnormalize = true\n") == EXIT_OK
        text = "dataset = dataset.txt\nsteps = 20\nbatch_size = 8\nc_r = 0.1\nc_k = 0.9\nlog_every = 10\n"
        assert run(mdp_dir, "train", text) == EXIT_OK
        log = (mdp_dir / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,mean_residual,effective_dimension" and len(log) == 3
        for name in ("gen", "collect", "train"):
            assert (mdp_dir / f"manifest-{name}.json").exists()

    def test_expectile_half_matches_scaled(self, mdp_dir):
        assert run(mdp_dir, "solve", "mdp = mdp.txt\nsolver = scaled\noutput = a.csv\n") == EXIT_OK
        text = "mdp = mdp.txt\nsolver = expectile\ntau = 0.5\noutput = b.csv\n"
        assert run(mdp_dir, "solve", text) == EXIT_OK
        a, b = load_table(mdp_dir / "a.csv"), load_table(mdp_dir / "b.csv")
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_solve_from_dataset(self, mdp_dir):
        assert run(mdp_dir, "collect", "mdp = mdp.txt\nn_transitions = 300\n") == EXIT_OK
        text = "dataset = dataset.txt\nsolver = g_star\nc_k = 0.9\n"
        assert run(mdp_dir, "solve", text) == EXIT_OK
        assert run(mdp_dir, "solve", "dataset = dataset.txt\nsolver = scaled\nc_k = 0.9\n") == EXIT_CONFIG

    def test_solve_needs_one_source(self, mdp_dir):
        assert run(mdp_dir, "solve", "solver = scaled\n") == EXIT_CONFIG

    def test_manifest_checksums_repeat(self, tmp_path):
        text = "kind = gridworld\nrows = 3\ncols = 3\nslip = 0.1\n"
        outs = []
        for k in range(2):
            out = tmp_path / str(k)
            out.mkdir()
            assert run(out, "gen", text) == EXIT_OK
            m = json.loads((out / "manifest-gen.json").read_text())
            outs.append((m["config_hash"], m["outputs"]))
        assert outs[0] == outs[1]

    def test_seed_flag_overrides_config(self, tmp_path):
        assert run(tmp_path, "gen", "seed = 1\n", "--seed", "9") == EXIT_OK
        m = json.loads((tmp_path / "manifest-gen.json").read_text())
        assert m["seed"] == 9

    def test_verify_small_and_report(self, tmp_path, capsys):
        text = ("suites = lemma2, contraction, fixed-point-bound, residual-identity, prop4\n"
                "lemma2.n_mdps = 3\ncontraction.n_configs = 5\nfixed-point-bound.n_mdps = 3\n"
                "residual-identity.n_draws = 3\nprop4.n_cases = 2\n")
        assert run(tmp_path, "verify", text, "--jobs", "2") == EXIT_OK
        assert "lemma2" in capsys.readouterr().out
        assert run(tmp_path, "report", "") == EXIT_OK
        summary = (tmp_path / "summary.txt").read_text()
        assert "overall: PASS" in summary
