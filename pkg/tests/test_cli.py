import json

import pytest

from tempsweep.base.utils import read_csv
from tempsweep.cli import build_parser, main
from tempsweep.model import load_params

TINY_ORACLE = [
    "--vocab-size", "8",
    "--seq-len", "4",
    "--train-size", "50",
    "--valid-size", "20",
    "--test-size", "20",
]
TINY_MODEL = ["--embed-dim", "4", "--hidden-dim", "4"]
TINY_SWEEP = [
    "--values", "1.0,0.5",
    "--samples-per-point", "100",
    "--seeds", "0",
    "--n", "2",
    "--max-len", "4",
    "--fixed-length", "true",
]


@pytest.fixture
def workdir(tmp_path):
    assert main(["oracle-gen", "--out-dir", str(tmp_path), *TINY_ORACLE]) == 0
    return tmp_path


@pytest.fixture
def trained(workdir):
    code = main(
        [
            "train",
            "--train", str(workdir / "train.txt"),
            "--valid", str(workdir / "valid.txt"),
            "--vocab", str(workdir / "vocab.txt"),
            "--out", str(workdir / "mle.params"),
            "--trace", str(workdir / "trace.csv"),
            "--max-epochs", "1",
            "--batch-size", "16",
            *TINY_MODEL,
        ]
    )
    assert code == 0
    return workdir


def _data(path):
    return [
        "--train", str(path / "train.txt"),
        "--valid", str(path / "valid.txt"),
        "--vocab", str(path / "vocab.txt"),
    ]


class TestPipeline:
    def test_oracle_gen(self, workdir):
        oracle = load_params(workdir / "oracle.params")
        assert oracle.is_oracle
        assert oracle.dims.vocab_size == 8
        lines = (workdir / "train.txt").read_text().splitlines()
        assert len(lines) == 50
        assert all(len(line.split()) == 4 for line in lines)

    def test_train(self, trained):
        params = load_params(trained / "mle.params")
        assert (params.dims.embed_dim, params.dims.hidden_dim) == (4, 4)
        rows = read_csv(trained / "trace.csv")
        assert [row["phase"] for row in rows] == ["mle", "mle"]
        assert {row["seconds"] for row in rows} == {"0.0"}

    def test_sample_and_eval(self, trained):
        samples = trained / "samples.txt"
        code = main(
            [
                "sample",
                "--model", str(trained / "mle.params"),
                "--vocab", str(trained / "vocab.txt"),
                "--num-samples", "100",
                "--out", str(samples),
                "--alpha", "0.7",
                "--max-len", "4",
                "--fixed-length", "true",
            ]
        )
        assert code == 0
        assert len(samples.read_text().splitlines()) == 100
        meta = json.loads((trained / "samples.txt.meta.json").read_text())
        assert (meta["alpha"], meta["n"], meta["fixed_length"]) == (0.7, 100, True)

        code = main(
            [
                "eval",
                "--vocab", str(trained / "vocab.txt"),
                "--hyp", str(samples),
                "--ref", str(trained / "test.txt"),
                "--metrics", "bleu,self-bleu,nll,unigram,bleu",
                "--scoring-model", str(trained / "oracle.params"),
                "--real-train", str(trained / "train.txt"),
                "--n", "2",
                "--out", str(trained / "metrics.csv"),
            ]
        )
        assert code == 0
        rows = read_csv(trained / "metrics.csv")
        assert [row["metric"] for row in rows] == ["bleu", "self-bleu", "nll", "unigram"]
        assert rows[0]["n"] == "2"
        assert 0.0 <= float(rows[0]["value"]) <= 1.0
        assert float(rows[2]["value"]) > 0

    def test_eval_missing_input_failed(self, trained):
        code = main(
            [
                "eval",
                "--vocab", str(trained / "vocab.txt"),
                "--hyp", str(trained / "test.txt"),
                "--metrics", "bleu",
                "--out", str(trained / "metrics.csv"),
            ]
        )
        assert code == 2

    def test_sweep_and_auc(self, trained):
        curves = []
        for name in ("first", "second"):
            out = trained / f"{name}.csv"
            code = main(
                [
                    "sweep",
                    *_data(trained),
                    "--test", str(trained / "test.txt"),
                    "--model", str(trained / "mle.params"),
                    "--oracle", str(trained / "oracle.params"),
                    "--metric-pair", "oracle",
                    "--out", str(out),
                    *TINY_SWEEP,
                ]
            )
            assert code == 0
            curves.append(out)
        assert curves[0].read_bytes() == curves[1].read_bytes()
        assert [row["control"] for row in read_csv(curves[0])] == ["1.0", "0.5"]

        code = main(["auc", str(curves[0]), "--out", str(trained / "auc.csv")])
        assert code == 0
        [row] = read_csv(trained / "auc.csv")
        assert row["model"] == "first"
        assert float(row["window_lo"]) < float(row["window_hi"])

        code = main(["auc", *map(str, curves), "--window", "0,1,2", "--out", str(trained / "x.csv")])
        assert code == 2

    def test_bench(self, trained):
        out = trained / "bench.csv"
        code = main(
            [
                "bench",
                "--model", str(trained / "mle.params"),
                "--strategies", "ancestral:1.0,greedy,gen_rejection:-50",
                "--num-samples", "100",
                "--max-len", "4",
                "--out", str(out),
            ]
        )
        assert code == 0
        rows = read_csv(out)
        assert [row["strategy"] for row in rows] == ["ancestral", "greedy", "gen_rejection"]
        assert rows[2]["acceptance_rate"] == "1.0"


class TestSyntheticCommands:
    adv = ["--adv-steps", "1", "--disc-pretrain-steps", "1", "--rollout-count", "1", "--eval-interval", "1"]

    def test_entropy_trace(self, tmp_path):
        out = tmp_path / "trace.csv"
        code = main(
            [
                "entropy-trace",
                "--out", str(out),
                "--max-epochs", "1",
                "--batch-size", "16",
                *TINY_ORACLE,
                *TINY_MODEL,
                *self.adv,
            ]
        )
        assert code == 0
        phases = [row["phase"] for row in read_csv(out)]
        assert phases == ["mle", "mle", "switch", "adversarial"]

    def test_train_temp_study(self, tmp_path):
        out = tmp_path / "study.csv"
        code = main(
            [
                "train-temp-study",
                "--alpha-trains", "1.0,2.0",
                "--num-samples", "100",
                "--n", "2",
                "--max-epochs", "1",
                "--batch-size", "16",
                "--out", str(out),
                *TINY_ORACLE,
                *TINY_MODEL,
            ]
        )
        assert code == 0
        assert [row["alpha_train"] for row in read_csv(out)] == ["1.0", "2.0"]

    def test_files_need_all_paths(self, tmp_path):
        code = main(["entropy-trace", "--train", "train.txt", "--out", str(tmp_path / "t.csv")])
        assert code == 2


class TestGradCheck:
    @pytest.mark.parametrize("kind", ["gen", "disc"])
    def test_passes(self, tmp_path, kind):
        out = tmp_path / "grad.csv"
        code = main(
            [
                "grad-check",
                "--kind", kind,
                "--vocab-size", "8",
                "--embed-dim", "3",
                "--hidden-dim", "4",
                "--num-layers", "2",
                "--length", "3",
                "--out", str(out),
            ]
        )
        assert code == 0
        rows = read_csv(out)
        assert rows
        assert {row["passed"] for row in rows} == {"true"}

    def test_explicit_sentence(self):
        assert main(["grad-check", "--vocab-size", "8", *TINY_MODEL, "--sentence", "4 7 5"]) == 0

    def test_tolerance_failed(self):
        assert main(["grad-check", "--vocab-size", "8", *TINY_MODEL, "--tolerance", "1e-30"]) == 1


class TestErrors:
    def test_missing_model(self, tmp_path):
        code = main(
            [
                "sample",
                "--model", str(tmp_path / "missing.params"),
                "--vocab", str(tmp_path / "vocab.txt"),
                "--out", str(tmp_path / "out.txt"),
            ]
        )
        assert code == 2

    @pytest.mark.parametrize(
        "extra",
        [["--set", "nowhere.seed=1"], ["--seed", "-1"], ["--fixed-length", "maybe"]],
    )
    def test_bad_settings(self, extra):
        assert main(["grad-check", "--vocab-size", "8", *TINY_MODEL, *extra]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["grad-check", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_config_file(self, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("[experiment]\nvocab_size = 8\n\n[model]\nembed_dim = 4\nhidden_dim = 4\n")
        assert main(["grad-check", "--config", str(config), "--length", "2"]) == 0

    def test_unknown_flag_exits(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sweep", "--temperature", "1.0"])
