"""Recipe runner: manifest shape, check kinds, and a real tiny replay."""
import json
import os
import shutil

import pytest

from amgformer.errors import ConfigError
from amgformer.repro import (RecipeResult, _check, load_recipes, run_recipe,
                             run_recipes, summary_markdown)

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RECIPES = os.path.join(REPO, "recipes", "recipes.json")

EXPECTED_NAMES = [
    "gradcheck", "dense-limit", "sparse-oracle", "fusion-invariants",
    "enhancer-invariants", "published-aggregates", "sliding-window",
    "train-stability", "ablations", "determinism",
]


def recipe_out_dirs(recipe):
    """Every output directory a recipe's CLI commands write into."""
    dirs = set()
    for cmd in recipe.get("commands", []):
        argv = cmd.get("cli", [])
        for flag, val in zip(argv, argv[1:]):
            if flag == "--out":
                dirs.add(val)
    return dirs


class TestManifest:
    def test_loads_and_names_are_unique(self):
        recipes = load_recipes(RECIPES)
        names = [r["name"] for r in recipes]
        assert len(names) == len(set(names))
        assert len(recipes) >= 1

    def test_one_recipe_per_acceptance_check(self):
        names = [r["name"] for r in load_recipes(RECIPES)]
        assert names == EXPECTED_NAMES

    def test_no_recipe_shares_output_dirs(self):
        recipes = load_recipes(RECIPES)
        seen = {}
        for r in recipes:
            for d in recipe_out_dirs(r):
                assert d not in seen, f"{d} used by {seen.get(d)} and {r['name']}"
                seen[d] = r["name"]

    def test_every_check_kind_is_known(self):
        known = {"exists", "same_hash", "report_bound", "loss_drop",
                 "csv_finite", "report_compare"}
        for r in load_recipes(RECIPES):
            for c in r.get("checks", []):
                assert c["kind"] in known

    def test_commands_are_cli_or_run(self):
        for r in load_recipes(RECIPES):
            assert r["commands"], r["name"]
            for cmd in r["commands"]:
                assert ("cli" in cmd) != ("run" in cmd)

    def test_empty_manifest_rejected(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text('{"recipes": []}')
        with pytest.raises(ConfigError):
            load_recipes(str(p))

    def test_duplicate_names_rejected(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text(json.dumps({"recipes": [{"name": "x"}, {"name": "x"}]}))
        with pytest.raises(ConfigError):
            load_recipes(str(p))

    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            load_recipes(str(p))

    def test_unmatched_filter_rejected(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text(json.dumps({"recipes": [{"name": "x", "commands": []}]}))
        with pytest.raises(ConfigError, match="matches no recipe"):
            run_recipes("zzz", str(p))


class TestChecks:
    def test_exists(self, tmp_path):
        (tmp_path / "a.txt").write_text("hi")
        assert _check({"kind": "exists", "path": "a.txt"}, str(tmp_path)) == ""
        msg = _check({"kind": "exists", "path": "b.txt"}, str(tmp_path))
        assert "missing" in msg

    def test_same_hash(self, tmp_path):
        (tmp_path / "a").write_bytes(b"data")
        (tmp_path / "b").write_bytes(b"data")
        (tmp_path / "c").write_bytes(b"other")
        assert _check({"kind": "same_hash", "paths": ["a", "b"]},
                      str(tmp_path)) == ""
        assert "mismatch" in _check({"kind": "same_hash", "paths": ["a", "c"]},
                                    str(tmp_path))

    def report(self, tmp_path, avg, std=0.01):
        data = {"aggregate": {"WT": {"avg": avg, "std": std}}}
        p = tmp_path / "report.json"
        p.write_text(json.dumps(data))
        return "report.json"

    def test_report_bound(self, tmp_path):
        rel = self.report(tmp_path, avg=0.8)
        ok = {"kind": "report_bound", "path": rel, "region": "WT",
              "field": "avg", "min": 0.7}
        assert _check(ok, str(tmp_path)) == ""
        bad = dict(ok, min=0.9)
        assert "below floor" in _check(bad, str(tmp_path))
        ceil = {"kind": "report_bound", "path": rel, "region": "WT",
                "field": "std", "max": 0.005}
        assert "above ceiling" in _check(ceil, str(tmp_path))

    def test_report_compare(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir(), b.mkdir()
        (a / "report.json").write_text(
            json.dumps({"aggregate": {"WT": {"avg": 0.75}}}))
        (b / "report.json").write_text(
            json.dumps({"aggregate": {"WT": {"avg": 0.80}}}))
        check = {"kind": "report_compare", "path_a": "a/report.json",
                 "path_b": "b/report.json", "region": "WT", "field": "avg",
                 "min_delta": -0.02}
        assert "below" in _check(check, str(tmp_path))
        check["min_delta"] = -0.10
        assert _check(check, str(tmp_path)) == ""

    def test_loss_drop(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("step,main\n0,4.0\n1,2.0\n2,0.9\n")
        ok = {"kind": "loss_drop", "path": "log.csv", "from_step": 1,
              "to_step": 2, "min_drop": 0.5}
        assert _check(ok, str(tmp_path)) == ""
        bad = dict(ok, min_drop=0.8)
        assert "below" in _check(bad, str(tmp_path))

    def test_csv_finite(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("step,total\n0,1.0\n1,nan\n")
        msg = _check({"kind": "csv_finite", "path": "log.csv",
                      "column": "total"}, str(tmp_path))
        assert "non-finite" in msg and "1" in msg
        p.write_text("step,total\n0,1.0\n1,0.5\n")
        assert _check({"kind": "csv_finite", "path": "log.csv",
                       "column": "total"}, str(tmp_path)) == ""

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ConfigError):
            _check({"kind": "wat"}, str(tmp_path))


class TestExecution:
    def stage(self, tmp_path):
        """Copy the determinism recipe into an isolated root."""
        rdir = tmp_path / "recipes"
        rdir.mkdir()
        shutil.copy(os.path.join(REPO, "recipes", "determinism.json"),
                    rdir / "determinism.json")
        full = load_recipes(RECIPES)
        det = [r for r in full if r["name"] == "determinism"]
        (rdir / "recipes.json").write_text(json.dumps({"recipes": det}))
        return str(rdir / "recipes.json")

    def test_determinism_recipe_passes(self, tmp_path, capsys):
        path = self.stage(tmp_path)
        results = run_recipes("determinism", path)
        capsys.readouterr()
        assert len(results) == 1
        assert results[0].passed, results[0].messages
        assert (tmp_path / "artifacts" / "determinism_a" / "final.ckpt").exists()

    def test_failing_command_stops_recipe(self, tmp_path, capsys):
        recipe = {"name": "broken",
                  "commands": [{"cli": ["eval", "--checkpoint", "missing.ckpt"]},
                               {"cli": ["gen", "--n", "1"]}],
                  "checks": [{"kind": "exists", "path": "never.txt"}]}
        result = run_recipe(recipe, str(tmp_path))
        capsys.readouterr()
        assert not result.passed
        assert len(result.messages) == 1  # stops at the first failure
        assert "exited 3" in result.messages[0]

    def test_failed_check_reported(self, tmp_path):
        recipe = {"name": "nocheck", "commands": [],
                  "checks": [{"kind": "exists", "path": "never.txt"}]}
        result = run_recipe(recipe, str(tmp_path))
        assert not result.passed
        assert "missing" in result.messages[0]

    def test_check_on_unreadable_file_reports_error(self, tmp_path):
        recipe = {"name": "x", "commands": [],
                  "checks": [{"kind": "report_bound", "path": "nope.json",
                              "region": "WT", "field": "avg", "min": 0.5}]}
        result = run_recipe(recipe, str(tmp_path))
        assert not result.passed
        assert "errored" in result.messages[0]


class TestSummary:
    def test_markdown_table(self):
        results = [RecipeResult("a", True, 1.0, ["ok"]),
                   RecipeResult("b", False, 2.5, ["missing x"])]
        md = summary_markdown(results)
        assert "1/2 recipes passed." in md
        assert "| a | PASS | 1.0 | ok |" in md
        assert "| b | FAIL | 2.5 | missing x |" in md

    def test_result_line(self):
        line = RecipeResult("name", False, 3.25, ["boom"]).line()
        assert line.startswith("FAIL name")
        assert "boom" in line
