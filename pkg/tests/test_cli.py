import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from patchbook.cli import dispatch

TINY = ["--preset", "tiny"]


def tree_digest(root):
    """Hash of every file under ``root``; wall time and the output root are dropped from run summaries."""
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        data = path.read_bytes()
        if path.name == "run_summary.json":
            summary = json.loads(data)
            summary.pop("wall_time_s")
            summary.pop("out")
            data = json.dumps(summary, sort_keys=True).encode()
        h.update(str(path.relative_to(root)).encode() + b"\0" + data)
    return h.hexdigest()


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["data-synth", "--count", "10", "--seed", "1", "--out", str(root / "data"), *TINY]) == 0
    assert dispatch(["pretrain", "--data", str(root / "data"), "--out", str(root / "run"), *TINY,
                     "--set", "epochs=2", "--set", "batch_size=4"]) == 0
    return root


class TestDispatch:
    def test_data_synth_reproducible(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, out, _ = run(capsys, "data-synth", "--count", 8, "--seed", 1, "--out", tmp_path / name)
            assert code == 0
            summary = json.loads(out)
            assert summary["command"] == "data-synth" and summary["seed"] == 1
            assert summary["outputs"]["manifest"] == "manifest.jsonl"
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        code, _, _ = run(capsys, "data-synth", "--count", 8, "--seed", 2, "--out", tmp_path / "c")
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")

    def test_unknown_flag_is_usage_error(self, capsys):
        code, _, err = run(capsys, "data-synth", "--count", 2, "--frobnicate")
        assert code == 2
        assert "usage:" in err
        assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_unknown_command(self, capsys):
        assert run(capsys, "train-everything")[0] == 2

    def test_bad_override_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "data-synth", "--count", 2, "--set", "n_tokens=abc", "--out", tmp_path)
        assert code == 2 and len(err.strip().splitlines()) == 1

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        code, out, err = run(capsys, "codebook-dump", "--ckpt", tmp_path / "nope.pt", "--out", tmp_path / "o")
        assert code == 1 and out == ""
        assert "message" in json.loads(err)

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# small faces\nimage_size = 16\npatch_size = 4\n")
        code, out, _ = run(capsys, "data-synth", "--count", 2, "--config", cfg, "--out", tmp_path / "o")
        assert code == 0 and json.loads(out)["config"]["image_size"] == 16
        assert Image.open(tmp_path / "o" / "images" / "00000.png").size == (16, 16)


class TestPipeline:
    def test_pretrain_outputs(self, trained):
        summary = json.loads((trained / "run" / "run_summary.json").read_text())
        assert summary["command"] == "pretrain" and summary["config"]["epochs"] == 2
        assert np.isfinite(summary["metrics"]["final_mse"])
        for name in ("checkpoint.pt", "train_log.csv", "checkpoint_epoch000.pt", "summary.json"):
            assert (trained / "run" / name).exists()

    def test_pretrain_reproducible(self, trained, tmp_path):
        args = ["pretrain", "--data", str(trained / "data"), *TINY, "--set", "epochs=2", "--set", "batch_size=4"]
        assert dispatch(args + ["--out", str(tmp_path / "again")]) == 0
        assert tree_digest(tmp_path / "again") == tree_digest(trained / "run")

    def test_inputs_untouched(self, trained, tmp_path):
        before = tree_digest(trained / "data"), tree_digest(trained / "run")
        ckpt = trained / "run" / "checkpoint.pt"
        assert dispatch(["reconstruct", "--ckpt", str(ckpt), "--out", str(tmp_path / "r")]) == 0
        assert dispatch(["data-prep", "--manifest", str(trained / "data"), "--output-size", "32",
                         "--out", str(tmp_path / "p")]) == 0
        assert (tree_digest(trained / "data"), tree_digest(trained / "run")) == before

    def test_reconstruct_panel(self, trained, tmp_path, capsys):
        ckpt = trained / "run" / "checkpoint.pt"
        first = trained / "run" / "checkpoint_epoch000.pt"
        code, out, _ = run(capsys, "reconstruct", "--ckpt", ckpt, "--ckpt", first,
                           "--image", trained / "data" / "images" / "00000.png", "--out", tmp_path)
        assert code == 0
        panel = np.asarray(Image.open(tmp_path / "panel.png"))
        # two rows of original | masked | reconstructed at 32 px with 2 px gaps
        assert panel.shape == (2 * 32 + 2, 3 * 32 + 4, 3)
        original = np.asarray(Image.open(trained / "data" / "images" / "00000.png"))
        assert np.array_equal(panel[:32, :32], original)
        assert len(json.loads(out)["metrics"]["masked_mse"]) == 2

    def test_codebook_dump(self, trained, tmp_path):
        ckpt = trained / "run" / "checkpoint.pt"
        assert dispatch(["codebook-dump", "--ckpt", str(ckpt), "--data", str(trained / "data"),
                         "--out", str(tmp_path)]) == 0
        tokens = np.load(tmp_path / "tokens.npy")
        assert tokens.shape == (64, 3, 32)
        lines = [json.loads(l) for l in (tmp_path / "selection_hist.jsonl").read_text().splitlines()]
        assert [l["position"] for l in lines] == list(range(64))
        assert all(sum(l["counts"]) == l["total"] == 8 for l in lines)

    @pytest.mark.parametrize("task", ["parsing", "alignment"])
    def test_evaluate(self, trained, tmp_path, task):
        ckpt = trained / "run" / "checkpoint.pt"
        assert dispatch(["evaluate", "--ckpt", str(ckpt), "--task", task, "--data", str(trained / "data"),
                         "--steps", "5", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert report["task"] == task
        rows = (tmp_path / "breakdown.csv").read_text().splitlines()
        assert len(rows) == (8 if task == "parsing" else 3)

    def test_cache_dir(self, trained, tmp_path, monkeypatch):
        monkeypatch.setenv("PACO_CACHE_DIR", str(trained))
        monkeypatch.chdir(tmp_path)
        assert dispatch(["codebook-dump", "--ckpt", "run/checkpoint.pt", "--count", "4"]) == 0
        assert (trained / "codebook-dump" / "tokens.npy").exists()

    def test_ablate_smoke(self, tmp_path, capsys):
        code, out, err = run(capsys, "ablate", "--preset", "table7-smoke", "--config-preset", "tiny",
                             "--set", "epochs=2", "--out", tmp_path)
        assert code == 0
        rows = json.loads((tmp_path / "ablation.json").read_text())
        arms = [r["arm"] for r in rows]
        assert len(arms) == 6
        assert any("random selection" in a for a in arms) and any("without incubation" in a for a in arms)
        assert all(np.isfinite(r["nme_diag"]) for r in rows)
        assert (tmp_path / "table.txt").read_text().count("\n") == 7
