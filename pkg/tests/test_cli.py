"""Subcommand round trips and pipeline orchestration on the small fixture."""

import json

import pytest

from convsdg import datamodel as dm
from convsdg.cli import main
from convsdg.pipeline import PipelineConfig, load_config, run_pipeline


@pytest.fixture
def ws(tmp_path):
    return tmp_path / "ws"


def _run(*argv) -> int:
    return main([str(a) for a in argv])


class TestSubcommands:
    def test_generate_dialogue(self, small_fixture_paths, ws, capsys):
        ws.mkdir()
        out = ws / "sessions.jsonl"
        rc = _run("generate-dialogue", "--topics", small_fixture_paths["topics"],
                  "--sessions-per-topic", "1", "--turns", "4", "--seed", "3",
                  "--out", out)
        assert rc == 0
        sessions = dm.read_sessions(out)
        assert len(sessions) == 6
        assert all(len(s.turns) == 4 for s in sessions)

    def test_full_cli_chain(self, small_fixture_paths, ws, capsys):
        ws.mkdir()
        sessions = ws / "sessions.jsonl"
        qrels = ws / "pseudo.txt"
        encoder = ws / "enc.bin"
        run_path = ws / "run.txt"
        assert _run("generate-dialogue", "--topics", small_fixture_paths["topics"],
                    "--turns", "4", "--seed", "3", "--out", sessions) == 0
        assert _run("build-supervision", "--sessions", sessions,
                    "--collection", small_fixture_paths["collection"],
                    "--form", "qat", "--top-k", "5", "--m", "3", "--seed", "3",
                    "--retriever", "bm25", "--out-qrels", qrels) == 0
        assert _run("train", "--sessions", sessions, "--qrels", qrels,
                    "--collection", small_fixture_paths["collection"],
                    "--epochs", "2", "--batch-size", "8", "--lr", "0.05",
                    "--seed", "3", "--out-encoder", encoder) == 0
        assert _run("retrieve", "--mode", "dense-exact", "--k", "20",
                    "--queries", small_fixture_paths["eval_sessions"],
                    "--collection", small_fixture_paths["collection"],
                    "--encoder", encoder, "--seed", "3",
                    "--out-run", run_path) == 0
        run = dm.read_run(run_path)
        assert len(run.per_query) == 24  # 6 topics x 4 turns
        assert _run("evaluate", "--run", run_path,
                    "--qrels", small_fixture_paths["eval_qrels"],
                    "--metrics", "mrr,ndcg@3,recall@100") == 0
        out = capsys.readouterr().out
        assert "macro mrr" in out
        assert "macro ndcg@3" in out

    def test_retrieve_bm25_tsv_queries(self, small_fixture_paths, ws, tmp_path):
        ws.mkdir()
        queries = tmp_path / "queries.tsv"
        queries.write_text("q1\tt00core0 t00asp0w0\n")
        out = ws / "run.txt"
        assert _run("retrieve", "--mode", "bm25", "--k", "5",
                    "--queries", queries, "--queries-format", "tsv",
                    "--collection", small_fixture_paths["collection"],
                    "--out-run", out) == 0
        run = dm.read_run(out)
        assert run.ranked_pids("q1")

    def test_augment_queries(self, small_fixture_paths, ws):
        ws.mkdir()
        out_sessions = ws / "merged.jsonl"
        out_qrels = ws / "merged.txt"
        assert _run("augment-queries", "--sessions",
                    small_fixture_paths["train_sessions"],
                    "--qrels", small_fixture_paths["train_qrels"],
                    "--t", "2", "--seed", "3",
                    "--out-sessions", out_sessions,
                    "--out-qrels", out_qrels) == 0
        merged = dm.read_sessions(out_sessions)
        originals = dm.read_sessions(small_fixture_paths["train_sessions"])
        # every original turn is annotated: t=2 adds 2 sample sessions per turn
        expected = len(originals) + 2 * sum(len(s.turns) for s in originals)
        assert len(merged) == expected

    def test_evaluate_compare_t_test(self, small_fixture_paths, ws, capsys):
        ws.mkdir()
        run_a = ws / "a.txt"
        run_b = ws / "b.txt"
        for path, seed in ((run_a, "3"), (run_b, "4")):
            assert _run("retrieve", "--mode", "bm25", "--k", "10",
                        "--queries", small_fixture_paths["eval_sessions"],
                        "--collection", small_fixture_paths["collection"],
                        "--seed", seed, "--out-run", path) == 0
        assert _run("evaluate", "--run", run_a,
                    "--qrels", small_fixture_paths["eval_qrels"],
                    "--metrics", "mrr", "--compare", run_b) == 0
        assert "t-test mrr" in capsys.readouterr().out

    def test_error_exit_code(self, tmp_path, capsys):
        rc = _run("evaluate", "--run", tmp_path / "missing.txt",
                  "--qrels", tmp_path / "missing2.txt")
        assert rc == 2
        assert "error:" in capsys.readouterr().err


def _write_config(path, fixture, ws, **extra):
    config = {
        "scenario": "dialogue_unsupervised",
        "workspace": str(ws),
        "collection": fixture["collection"],
        "topics": fixture["topics"],
        "test_sessions": fixture["eval_sessions"],
        "test_qrels": fixture["eval_qrels"],
        "seed": 3,
        "n_turns": 4,
        "epochs": 2,
        "learning_rate": 0.05,
        "batch_size": 8,
        "retrieve_k": 20,
    }
    config.update(extra)
    path.write_text(json.dumps(config))
    return path


class TestPipeline:
    def test_manifest_has_five_artifacts(self, small_fixture_paths, tmp_path, capsys):
        config = _write_config(tmp_path / "c.json", small_fixture_paths,
                               tmp_path / "ws")
        assert _run("pipeline", "--config", config) == 0
        manifest = json.loads((tmp_path / "ws" / "manifest.json").read_text())
        assert sorted(manifest["artifacts"]) == [
            "encoder", "qrels", "report", "run", "sessions"
        ]
        for info in manifest["artifacts"].values():
            assert len(info["sha256"]) == 64

    def test_resume_skips_all_stages(self, small_fixture_paths, tmp_path):
        ws = tmp_path / "ws"
        config = load_config(_write_config(tmp_path / "c.json",
                                           small_fixture_paths, ws))
        run_pipeline(config)
        manifest = run_pipeline(config, resume=True)
        assert all(s["skipped"] for s in manifest["stages"])

    def test_missing_collection_fails_before_stages(self, small_fixture_paths,
                                                    tmp_path, capsys):
        raw = {
            "scenario": "dialogue_unsupervised",
            "workspace": str(tmp_path / "ws"),
            "topics": small_fixture_paths["topics"],
            "test_sessions": small_fixture_paths["eval_sessions"],
            "test_qrels": small_fixture_paths["eval_qrels"],
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(raw))
        assert _run("pipeline", "--config", path) == 2
        assert "collection" in capsys.readouterr().err
        assert not (tmp_path / "ws").exists()

    def test_unknown_config_key_rejected(self, small_fixture_paths, tmp_path):
        path = _write_config(tmp_path / "c.json", small_fixture_paths,
                             tmp_path / "ws", typo_key=1)
        with pytest.raises(Exception, match="typo_key"):
            load_config(path)

    def test_env_interpolation(self, small_fixture_paths, tmp_path, monkeypatch):
        monkeypatch.setenv("MY_WS", str(tmp_path / "env-ws"))
        path = _write_config(tmp_path / "c.json", small_fixture_paths, "${MY_WS}")
        config = load_config(path)
        assert config.workspace == str(tmp_path / "env-ws")

    def test_semisupervised_scenario(self, small_fixture_paths, tmp_path):
        ws = tmp_path / "ws"
        config = PipelineConfig(
            scenario="query_semisupervised",
            workspace=str(ws),
            collection=small_fixture_paths["collection"],
            train_sessions=small_fixture_paths["train_sessions"],
            train_qrels=small_fixture_paths["train_qrels"],
            test_sessions=small_fixture_paths["eval_sessions"],
            test_qrels=small_fixture_paths["eval_qrels"],
            seed=3, t=1, epochs=2, learning_rate=0.05, batch_size=8,
            retrieve_k=20,
        )
        manifest = run_pipeline(config)
        assert (ws / "merged_sessions.jsonl").exists()
        report = json.loads((ws / "report.json").read_text())
        assert "mrr" in report["means"]

    def test_cli_flag_overrides_config_seed(self, small_fixture_paths, tmp_path):
        config_path = _write_config(tmp_path / "c.json", small_fixture_paths,
                                    tmp_path / "ws")
        assert _run("pipeline", "--config", config_path, "--seed", "9",
                    "--workspace", tmp_path / "ws9") == 0
        manifest = json.loads((tmp_path / "ws9" / "manifest.json").read_text())
        assert manifest["seed"] == 9


class TestAblations:
    @pytest.fixture
    def prepared_ws(self, small_fixture_paths, tmp_path):
        config_path = _write_config(tmp_path / "c.json", small_fixture_paths,
                                    tmp_path / "ws")
        assert _run("pipeline", "--config", config_path) == 0
        return config_path, tmp_path / "ws"

    def test_ablate_size_rows(self, prepared_ws):
        config_path, ws = prepared_ws
        assert _run("ablate-size", "--config", config_path) == 0
        lines = (ws / "ablate_size.csv").read_text().splitlines()
        assert lines[0] == "fraction,mrr,ndcg@3,recall@100"
        fractions = [line.split(",")[0] for line in lines[1:]]
        assert fractions == ["0.25", "0.50", "0.75", "1.00"]

    def test_ablate_size_rejects_zero_fraction(self, prepared_ws, capsys):
        config_path, _ = prepared_ws
        assert _run("ablate-size", "--config", config_path,
                    "--fractions", "0,0.5") == 2
        assert "fractions" in capsys.readouterr().err

    def test_ablate_form_rows(self, prepared_ws):
        config_path, ws = prepared_ws
        assert _run("ablate-form", "--config", config_path) == 0
        lines = (ws / "ablate_form.csv").read_text().splitlines()
        assert lines[0] == "form,mrr,ndcg@3,recall@100"
        assert [line.split(",")[0] for line in lines[1:]] == [
            "qa", "qat", "cqt", "cqat"
        ]

    def test_ablate_size_without_pipeline_errors(self, small_fixture_paths,
                                                 tmp_path, capsys):
        config_path = _write_config(tmp_path / "c.json", small_fixture_paths,
                                    tmp_path / "fresh-ws")
        assert _run("ablate-size", "--config", config_path) == 2
        assert "run the pipeline first" in capsys.readouterr().err
