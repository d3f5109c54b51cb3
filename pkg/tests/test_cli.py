"""Command-line behaviour: artifacts on disk, exit codes, size parsing."""

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from helpers import hash_directory, make_llama_checkpoint, write_checkpoint
from modelmerge.cli import parse_size, run_merge
from modelmerge.errors import ConfigError
from modelmerge.tensorio import open_checkpoint


def read_out(root):
    ckpt = open_checkpoint(Path(root))
    return {name: ckpt.load_tensor(name) for name in ckpt.records}


@pytest.fixture(autouse=True)
def _drop_cli_log_handlers():
    # run_merge calls logging.basicConfig with the stderr active at the
    # time, which pytest swaps per test. Drop the handler afterwards so
    # the next test does not log into a closed capture stream.
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    for h in list(root.handlers):
        if h not in before:
            root.removeHandler(h)


@pytest.fixture
def two_models(tmp_path):
    rng = np.random.default_rng(100)
    a = make_llama_checkpoint(tmp_path / "a", rng, tokenizer=True)
    b = make_llama_checkpoint(tmp_path / "b", rng)
    return tmp_path, a, b


def linear_text(tmp_path, **extra):
    lines = [
        "merge_method: linear",
        "models:",
        f"  - model: {tmp_path / 'a'}",
        "    parameters: {weight: 0.75}",
        f"  - model: {tmp_path / 'b'}",
        "    parameters: {weight: 0.25}",
    ]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def write_recipe(tmp_path, text, name="recipe.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestMergeEndToEnd:
    def test_writes_expected_artifacts(self, two_models):
        tmp_path, a, b = two_models
        text = linear_text(tmp_path)
        recipe = write_recipe(tmp_path, text)
        out = tmp_path / "out"
        assert run_merge(["merge", recipe, str(out)]) == 0

        assert (out / "model.safetensors").is_file()
        assert (out / "config.json").is_file()
        assert (out / "tokenizer.json").is_file()
        assert (out / "tokenizer_config.json").is_file()
        assert (out / "merge_recipe.yaml").read_text(encoding="utf-8") == text

        merged = read_out(out)
        assert set(merged) == set(a)
        for name in a:
            want = np.float32(0.75) * a[name] + np.float32(0.25) * b[name]
            assert np.array_equal(merged[name], want), name
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["model_type"] == "llama"
        assert cfg["num_hidden_layers"] == 2

    def test_provenance_metadata_records_recipe_and_seed(self, two_models):
        tmp_path, _, _ = two_models
        text = linear_text(tmp_path)
        recipe = write_recipe(tmp_path, text)
        out = tmp_path / "out"
        assert run_merge(["merge", recipe, str(out), "--seed", "7"]) == 0
        meta = open_checkpoint(out).file_metadata
        assert meta["merge_recipe"] == text
        assert meta["merge_seed"] == "7"
        assert meta["merge_tool"].startswith("modelmerge ")

    def test_threads_do_not_change_bytes(self, two_models):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o1"), "--threads", "1"]) == 0
        assert run_merge(["merge", recipe, str(tmp_path / "o8"), "--threads", "8"]) == 0
        assert hash_directory(tmp_path / "o1") == hash_directory(tmp_path / "o8")

    def test_shard_cap_splits_output(self, two_models):
        tmp_path, a, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        out = tmp_path / "out"
        assert run_merge(["merge", recipe, str(out), "--max-shard-size", "2KB"]) == 0
        shards = sorted(p.name for p in out.glob("model-*.safetensors"))
        assert len(shards) > 1
        assert (out / "model.safetensors.index.json").is_file()
        merged = read_out(out)
        assert set(merged) == set(a)

    def test_dtype_from_recipe_controls_storage(self, two_models):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path, dtype="bfloat16"))
        out = tmp_path / "out"
        assert run_merge(["merge", recipe, str(out)]) == 0
        ckpt = open_checkpoint(out)
        assert {r.dtype for r in ckpt.records.values()} == {"BF16"}

    def test_verbose_logs_task_events(self, two_models, caplog):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        with caplog.at_level(logging.DEBUG, logger="modelmerge"):
            code = run_merge(["merge", recipe, str(tmp_path / "out"), "--verbose"])
        assert code == 0
        assert any(r.levelno == logging.DEBUG for r in caplog.records)


class TestDryRun:
    def test_prints_plan_and_writes_nothing(self, two_models, capsys):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        out = tmp_path / "out"
        assert run_merge(["merge", recipe, str(out), "--dry-run"]) == 0
        assert not out.exists()
        stdout = capsys.readouterr().out
        assert "merge method: linear" in stdout
        assert "dry run: nothing written" in stdout
        assert "predicted peak working set" in stdout


class TestExitCodes:
    def test_missing_recipe_file(self, tmp_path, capsys):
        assert run_merge(["merge", str(tmp_path / "nope.yaml"), str(tmp_path / "o")]) == 2
        assert capsys.readouterr().err.startswith("ERROR ConfigError:")

    def test_missing_model_directory(self, tmp_path, capsys):
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("ERROR ConfigError:")
        assert "model directory not found" in err

    def test_invalid_recipe(self, two_models, capsys):
        tmp_path, _, _ = two_models
        text = f"merge_method: ties\nmodels: [{tmp_path / 'a'}, {tmp_path / 'b'}]\n"
        recipe = write_recipe(tmp_path, text)
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 2
        assert capsys.readouterr().err.startswith("ERROR ConfigError:")

    def test_corrupt_checkpoint(self, two_models, capsys):
        tmp_path, _, _ = two_models
        shard = tmp_path / "b" / "model.safetensors"
        shard.write_bytes(b"\xff" * 32)
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 3
        assert capsys.readouterr().err.startswith("ERROR FormatError:")

    def test_shape_mismatch(self, tmp_path, capsys):
        rng = np.random.default_rng(101)
        make_llama_checkpoint(tmp_path / "a", rng, hidden=8)
        make_llama_checkpoint(tmp_path / "b", rng, hidden=4)
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 3
        assert capsys.readouterr().err.startswith("ERROR ShapeMismatch:")

    def test_vocab_mismatch_suggests_flag_then_flag_fixes_it(self, tmp_path, capsys):
        rng = np.random.default_rng(102)
        make_llama_checkpoint(tmp_path / "a", rng, vocab=32)
        make_llama_checkpoint(tmp_path / "b", rng, vocab=48)
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 3
        assert "--truncate-vocab" in capsys.readouterr().err
        assert run_merge(["merge", recipe, str(tmp_path / "o"), "--truncate-vocab"]) == 0
        merged = read_out(tmp_path / "o")
        assert merged["model.embed_tokens.weight"].shape == (32, 8)
        cfg = json.loads((tmp_path / "o" / "config.json").read_text())
        assert cfg["vocab_size"] == 32

    def test_shard_cap_below_largest_tensor(self, two_models, capsys):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        code = run_merge(
            ["merge", recipe, str(tmp_path / "o"), "--max-shard-size", "64B"]
        )
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR CapacityError:")

    def test_bad_shard_size_text(self, two_models, capsys):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        code = run_merge(
            ["merge", recipe, str(tmp_path / "o"), "--max-shard-size", "lots"]
        )
        assert code == 2
        assert "cannot parse" in capsys.readouterr().err

    def test_threads_must_be_positive(self, two_models, capsys):
        tmp_path, _, _ = two_models
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o"), "--threads", "0"]) == 2

    def test_degenerate_weights_exit_two(self, tmp_path, capsys):
        rng = np.random.default_rng(103)
        make_llama_checkpoint(tmp_path / "a", rng)
        make_llama_checkpoint(tmp_path / "b", rng)
        text = (
            "merge_method: linear\nmodels:\n"
            f"  - model: {tmp_path / 'a'}\n    parameters: {{weight: 1.0}}\n"
            f"  - model: {tmp_path / 'b'}\n    parameters: {{weight: -1.0}}\n"
        )
        recipe = write_recipe(tmp_path, text)
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 2
        assert capsys.readouterr().err.startswith("ERROR DegenerateWeights:")

    def test_missing_required_tensor_exit_three(self, tmp_path, capsys):
        rng = np.random.default_rng(104)
        a = make_llama_checkpoint(tmp_path / "a", rng)
        b = dict(a)
        del b["model.norm.weight"]
        write_checkpoint(
            tmp_path / "b",
            b,
            model_config={"model_type": "llama", "num_hidden_layers": 2},
        )
        recipe = write_recipe(tmp_path, linear_text(tmp_path))
        assert run_merge(["merge", recipe, str(tmp_path / "o")]) == 3
        assert capsys.readouterr().err.startswith("ERROR KeyError:")

    def test_usage_errors_exit_two(self, capsys):
        assert run_merge([]) == 2
        assert run_merge(["merge"]) == 2
        capsys.readouterr()

    def test_version_exits_zero(self, capsys):
        assert run_merge(["--version"]) == 0
        assert "modelmerge" in capsys.readouterr().out


class TestParseSize:
    @pytest.mark.parametrize(
        "text,want",
        [
            ("5GB", 5 * 1024**3),
            ("512MB", 512 * 1024**2),
            ("16 KB", 16 * 1024),
            ("2tb", 2 * 1024**4),
            ("1000", 1000),
            ("7b", 7),
        ],
    )
    def test_accepts(self, text, want):
        assert parse_size(text) == want

    @pytest.mark.parametrize("text", ["lots", "", "-5MB", "5.5GB", "MB", "5 XB"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_size(text)

    def test_rejects_zero(self):
        with pytest.raises(ConfigError, match="positive"):
            parse_size("0")
