"""Scripted reproduction: recipes as data, replayed through the CLI.

A recipe is a name, a command sequence, and expected-artifact checks
(hashes or metric bounds). Bounds live in the recipe file, not in code,
so they stay auditable. Run with `python3 -m amgformer.repro [--filter X]`.
"""
import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

from . import cli
from .config import resolve_out
from .errors import ConfigError, DataError

DEFAULT_RECIPES = "recipes/recipes.json"


@dataclass
class RecipeResult:
    name: str
    passed: bool
    seconds: float
    messages: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status:<4s} {self.name:<22s} {self.seconds:7.1f}s  " + \
               "; ".join(self.messages)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_report_metric(path, region, fld) -> float:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return float(data["aggregate"][region][fld])


def _check(check: dict, root: str) -> str:
    """Returns '' when the check holds, else a failure message."""
    kind = check.get("kind")
    path = check.get("path")
    if path is not None:
        path = resolve_out(path)
        if not os.path.isabs(path):
            path = os.path.join(root, path)
    if kind == "exists":
        return "" if os.path.exists(path) else f"missing {check['path']}"
    if kind == "same_hash":
        paths = []
        for p in check["paths"]:
            p = resolve_out(p)
            paths.append(p if os.path.isabs(p) else os.path.join(root, p))
        hashes = [_sha256(p) for p in paths]
        if len(set(hashes)) == 1:
            return ""
        return f"hash mismatch across {check['paths']}"
    if kind == "report_bound":
        value = _load_report_metric(path, check["region"], check["field"])
        lo, hi = check.get("min"), check.get("max")
        if lo is not None and value < lo:
            return (f"{check['region']}.{check['field']} = {value:.4f} "
                    f"below floor {lo}")
        if hi is not None and value > hi:
            return (f"{check['region']}.{check['field']} = {value:.4f} "
                    f"above ceiling {hi}")
        return ""
    if kind == "loss_drop":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        a = float(rows[check["from_step"]]["main"])
        b = float(rows[check["to_step"]]["main"])
        drop = (a - b) / a
        if drop >= check["min_drop"]:
            return ""
        return (f"main loss drop {drop:.3f} from step {check['from_step']} "
                f"to {check['to_step']} below {check['min_drop']}")
    if kind == "csv_finite":
        import math
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        bad = [i for i, r in enumerate(rows)
               if not math.isfinite(float(r[check["column"]]))]
        if not bad:
            return ""
        return f"non-finite {check['column']} at rows {bad[:5]}"
    if kind == "report_compare":
        paths = []
        for key in ("path_a", "path_b"):
            p = resolve_out(check[key])
            paths.append(p if os.path.isabs(p) else os.path.join(root, p))
        a = _load_report_metric(paths[0], check["region"], check["field"])
        b = _load_report_metric(paths[1], check["region"], check["field"])
        if a - b >= check["min_delta"]:
            return ""
        return (f"{check['region']}.{check['field']}: {a:.4f} vs {b:.4f}, "
                f"delta {a - b:.4f} below {check['min_delta']}")
    raise ConfigError(f"unknown check kind {kind!r}")


def _run_command(cmd: dict, root: str) -> str:
    """Returns '' on success, else a failure message."""
    if "cli" in cmd:
        argv = [str(a) for a in cmd["cli"]]
        here = os.getcwd()
        os.chdir(root)  # recipe paths are repo-relative
        try:
            rc = cli.main(argv)
        finally:
            os.chdir(here)
        return "" if rc == 0 else f"amgformer {' '.join(argv)} exited {rc}"
    if "run" in cmd:
        argv = [sys.executable if a == "python3" else str(a)
                for a in cmd["run"]]
        try:
            proc = subprocess.run(argv, cwd=root, capture_output=True, text=True)
        except FileNotFoundError as e:
            return f"cannot execute {argv[0]}: {e}"
        if proc.returncode == 0:
            return ""
        tail = (proc.stdout + proc.stderr).strip().splitlines()[-3:]
        return f"{' '.join(cmd['run'])} exited {proc.returncode}: " + " | ".join(tail)
    raise ConfigError(f"command needs a 'cli' or 'run' key, got {sorted(cmd)}")


def load_recipes(path=DEFAULT_RECIPES) -> list:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    recipes = data.get("recipes")
    if not recipes:
        raise ConfigError(f"{path}: no recipes defined")
    names = [r["name"] for r in recipes]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate recipe names")
    return recipes


def run_recipe(recipe: dict, root: str) -> RecipeResult:
    t0 = time.perf_counter()
    messages = []
    ok = True
    for cmd in recipe.get("commands", []):
        msg = _run_command(cmd, root)
        if msg:
            messages.append(msg)
            ok = False
            break  # later commands depend on earlier artifacts
    if ok:
        for check in recipe.get("checks", []):
            try:
                msg = _check(check, root)
            except (OSError, DataError, KeyError, ValueError) as e:
                msg = f"check {check.get('kind')} errored: {e}"
            if msg:
                messages.append(msg)
                ok = False
    if ok and not messages:
        messages.append("ok")
    return RecipeResult(recipe["name"], ok, time.perf_counter() - t0, messages)


def run_recipes(filter: str = None, recipes_path=DEFAULT_RECIPES) -> list:
    """Execute matching recipes sequentially; returns their results."""
    recipes = load_recipes(recipes_path)
    root = os.path.dirname(os.path.dirname(os.path.abspath(recipes_path)))
    if filter:
        recipes = [r for r in recipes if filter in r["name"]]
        if not recipes:
            raise ConfigError(f"filter {filter!r} matches no recipe")
    return [run_recipe(r, root) for r in recipes]


def summary_markdown(results: list) -> str:
    lines = ["# Reproduction summary", ""]
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} recipes passed.")
    lines.append("")
    lines.append("| Recipe | Status | Time (s) | Details |")
    lines.append("| --- | --- | --- | --- |")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = "; ".join(r.messages)
        lines.append(f"| {r.name} | {status} | {r.seconds:.1f} | {detail} |")
    lines.append("")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python3 -m amgformer.repro",
        description="Replay reproduction recipes and compare against bounds.")
    parser.add_argument("--filter", help="substring of recipe names to run")
    parser.add_argument("--recipes", default=DEFAULT_RECIPES,
                        help="recipe manifest path")
    parser.add_argument("--summary", default=None,
                        help="markdown summary output (default: alongside recipes)")
    args = parser.parse_args(argv)
    try:
        results = run_recipes(args.filter, args.recipes)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for r in results:
        print(r.line())
    summary_path = args.summary or os.path.join(
        os.path.dirname(os.path.abspath(args.recipes)), "repro_summary.md")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write(summary_markdown(results))
    print(f"summary -> {summary_path}")
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
