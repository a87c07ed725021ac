import numpy as np
import pytest

from grafted import dataset as D
from grafted.cli import main
from grafted.oracles import Direction, HBA, PropertySpec


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "seeds.smi"
    path.write_text("\n".join(D.random_seed_corpus(10, max_atoms=9, seed=2)) + "\n")
    return path


@pytest.fixture(scope="module")
def pairs_file(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    corpus = D.random_seed_corpus(10, max_atoms=9, seed=2)
    pairs = D.build_pairs(
        corpus,
        [PropertySpec(HBA, Direction.INCREASE, 1)],
        0.55,
        D.MiningLimits(max_pairs_per_seed=8, frontier_cap=10, max_edits=2),
        np.random.default_rng(0),
    )
    assert len(pairs) >= 4
    path = tmp / "pairs.jsonl"
    D.write_samples(path, pairs)
    return path


@pytest.fixture(scope="module")
def checkpoint_file(tmp_path_factory, pairs_file):
    out = tmp_path_factory.mktemp("ckpt") / "model.grft"
    code = main(
        [
            "pretrain",
            "--data", str(pairs_file),
            "--steps", "6",
            "--batch-size", "4",
            "--layers", "1",
            "--heads", "2",
            "--hidden", "16",
            "--ffn", "32",
            "--diffusion-steps", "40",
            "--seed", "0",
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


class TestDatasetGen:
    def test_success_writes_jsonl(self, corpus_file, tmp_path, capsys):
        out = tmp_path / "pairs.jsonl"
        code = main(
            [
                "dataset-gen",
                "--corpus", str(corpus_file),
                "--task", "hba:increase:1",
                "--min-sim", "0.55",
                "--max-pairs", "10",
                "--max-pairs-per-seed", "5",
                "--seed", "0",
                "--out", str(out),
            ]
        )
        assert code == 0
        assert out.exists()
        printed = capsys.readouterr().out
        assert "pairs" in printed
        samples = D.read_samples(out)
        assert 0 < len(samples) <= 10

    def test_unknown_property_exit_2(self, corpus_file, tmp_path):
        code = main(
            [
                "dataset-gen",
                "--corpus", str(corpus_file),
                "--task", "zorble:increase:1",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert code == 2

    def test_min_sim_out_of_range_exit_2(self, corpus_file, tmp_path):
        code = main(
            [
                "dataset-gen",
                "--corpus", str(corpus_file),
                "--task", "hba:increase:1",
                "--min-sim", "1.5",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert code == 2

    def test_missing_corpus_exit_3(self, tmp_path):
        code = main(
            [
                "dataset-gen",
                "--corpus", str(tmp_path / "missing.smi"),
                "--task", "hba:increase:1",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert code == 3


class TestPretrain:
    def test_writes_checkpoint_and_curve(self, checkpoint_file):
        assert checkpoint_file.exists()
        curve = checkpoint_file.with_suffix(".loss.tsv")
        assert curve.exists()
        lines = curve.read_text().splitlines()
        assert lines[0] == "step\tloss"
        assert len(lines) == 7  # header + 6 steps

    def test_missing_data_exit_3(self, tmp_path):
        code = main(
            ["pretrain", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "m.grft")]
        )
        assert code == 3

    def test_resume_continues(self, pairs_file, checkpoint_file, tmp_path):
        out = tmp_path / "resumed.grft"
        code = main(
            [
                "pretrain",
                "--data", str(pairs_file),
                "--steps", "3",
                "--batch-size", "4",
                "--diffusion-steps", "40",
                "--resume", str(checkpoint_file),
                "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.with_suffix(".loss.tsv").read_text().splitlines()
        first_step = int(lines[1].split("\t")[0])
        assert first_step == 6  # counter carries on from the first run


class TestFinetune:
    def test_stride_must_divide_exit_2(self, checkpoint_file, pairs_file, tmp_path):
        code = main(
            [
                "finetune",
                "--ckpt", str(checkpoint_file),
                "--data", str(pairs_file),
                "--task", "hba:increase:1",
                "--stride", "7",
                "--diffusion-steps", "40",
                "--updates", "1",
                "--out", str(tmp_path / "ft.grft"),
            ]
        )
        assert code == 2

    def test_beta_zero_kl_column_zero(self, checkpoint_file, pairs_file, tmp_path):
        out = tmp_path / "ft.grft"
        metrics = tmp_path / "ft.metrics.tsv"
        code = main(
            [
                "finetune",
                "--ckpt", str(checkpoint_file),
                "--data", str(pairs_file),
                "--task", "hba:increase:1",
                "--beta-kl", "0",
                "--group", "2",
                "--stride", "10",
                "--diffusion-steps", "40",
                "--updates", "2",
                "--prompts-per-update", "1",
                "--metrics", str(metrics),
                "--out", str(out),
            ]
        )
        assert code == 0
        rows = [line.split("\t") for line in metrics.read_text().splitlines()]
        assert all(len(row) == 5 for row in rows)
        assert all(float(row[3]) == 0.0 for row in rows)

    @pytest.mark.parametrize("strategy", ["full_kl", "stepwise", "final_only"])
    def test_strategies_dispatch(self, checkpoint_file, pairs_file, tmp_path, strategy, capsys):
        code = main(
            [
                "finetune",
                "--ckpt", str(checkpoint_file),
                "--data", str(pairs_file),
                "--task", "hba:increase:1",
                "--group", "2",
                "--stride", "20",
                "--diffusion-steps", "40",
                "--updates", "1",
                "--prompts-per-update", "1",
                "--out", str(tmp_path / f"{strategy}.grft"),
                "--strategy", strategy,
            ]
        )
        assert code == 0
        assert strategy in capsys.readouterr().out


class TestEdit:
    def test_fixed_seed_identical(self, checkpoint_file, capsys):
        argv = [
            "edit",
            "--ckpt", str(checkpoint_file),
            "--smiles", "CCO",
            "--instruction", "Add more hydrogen bond acceptors to this molecule [SMILE].",
            "--m", "4",
            "--steps", "4",
            "--diffusion-steps", "40",
            "--seed", "9",
        ]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        second = capsys.readouterr().out
        assert first == second
        assert "edited molecule:" in first

    def test_topk1_deterministic_across_seeds(self, checkpoint_file, capsys):
        outs = []
        for seed in ("1", "2"):
            argv = [
                "edit",
                "--ckpt", str(checkpoint_file),
                "--smiles", "CCO",
                "--instruction", "x [SMILE].",
                "--m", "3",
                "--steps", "1",
                "--diffusion-steps", "40",
                "--topk", "1",
                "--seed", seed,
            ]
            assert main(argv) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]

    def test_invalid_smiles_exit_2(self, checkpoint_file):
        code = main(
            [
                "edit",
                "--ckpt", str(checkpoint_file),
                "--smiles", "C1CC",
                "--instruction", "x [SMILE].",
            ]
        )
        assert code == 2


class TestEval:
    def test_report_columns_and_identity(self, checkpoint_file, pairs_file, tmp_path, capsys):
        out = tmp_path / "report.tsv"
        code = main(
            [
                "eval",
                "--ckpt", str(checkpoint_file),
                "--testset", str(pairs_file),
                "--task", "hba:increase:1",
                "--taus", "0.15,0.65",
                "--steps", "4",
                "--diffusion-steps", "40",
                "--limit", "4",
                "--out", str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        header = lines[0].split("\t")
        assert header == [
            "task", "validity",
            "acc_all@0.65", "acc_valid@0.65",
            "acc_all@0.15", "acc_valid@0.15", "fdd",
        ]
        row = lines[1].split("\t")
        validity = float(row[1])
        for acc_all_col, acc_valid_col in ((2, 3), (4, 5)):
            assert float(row[acc_all_col]) == pytest.approx(float(row[acc_valid_col]) * validity, abs=1e-3)

    def test_empty_testset_exit_2(self, checkpoint_file, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = main(
            [
                "eval",
                "--ckpt", str(checkpoint_file),
                "--testset", str(empty),
                "--task", "hba:increase:1",
                "--out", str(tmp_path / "r.tsv"),
            ]
        )
        assert code == 2


class TestConfigLayering:
    def test_config_file_overridden_by_flags(self, corpus_file, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("min_sim=0.9\nmax_pairs=3\n")
        out = tmp_path / "pairs.jsonl"
        code = main(
            [
                "--config", str(cfg),
                "dataset-gen",
                "--corpus", str(corpus_file),
                "--task", "hba:increase:1",
                "--min-sim", "0.55",  # overrides the 0.9 in the file
                "--max-pairs-per-seed", "5",
                "--seed", "0",
                "--out", str(out),
            ]
        )
        assert code == 0
        samples = D.read_samples(out)
        assert len(samples) == 3  # max_pairs came from the file
        assert any(s.similarity < 0.9 for s in samples)
