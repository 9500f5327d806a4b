import csv
import json
from pathlib import Path

import numpy as np
import pytest

from marscache.cli import main
from marscache.presets import (
    available_presets,
    engine_params_from_dict,
    load_preset,
    merge_presets,
)

# Small-but-real run config reused across CLI tests.
FAST_CFG = {
    "seed": 42,
    "model": {
        "num_layers": 4, "num_heads": 2, "model_dim": 32, "head_dim": 16,
        "vocab_size": 64, "groups": 4,
    },
    "layout": {
        "num_frames": 4, "patches_per_frame": 4, "prompt_length": 8,
        "generation_length": 32, "block_length": 16,
    },
    "decode": {"num_steps": 16, "tokens_per_step": 2},
}


def write_cfg(tmp_path, **extra) -> str:
    cfg = json.loads(json.dumps(FAST_CFG))
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestPresets:
    def test_required_presets_ship(self):
        names = available_presets()
        assert "table10-pyramid" in names
        assert "table8-best" in names

    def test_table10_pyramid_values(self):
        p = load_preset("table10-pyramid")
        assert p["tau_text"] == [64, 32, 16, 8]
        assert p["tau_visual"] == [128, 64, 32, 16]

    def test_merge_and_build(self):
        params = engine_params_from_dict(
            merge_presets(["table10-pyramid", "table8-best"])
        )
        assert params.kind == "mars"
        assert params.schedule.tau_text == (64, 32, 16, 8)
        assert params.anchor_budgets == ("full", 8, 4, 2)

    def test_unknown_preset_errors(self):
        with pytest.raises(KeyError, match="unknown preset"):
            load_preset("table99-imaginary")

    def test_override_wins(self):
        merged = merge_presets(["table10-pyramid"], {"sample_size": 16})
        assert merged["sample_size"] == 16


class TestDecodeCommand:
    def test_artifacts_and_exit_code(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"),
                        engine={"kind": "dual_cache"})
        assert main(["decode", "--config", cfg]) == 0
        out = tmp_path / "out"
        assert (out / "tokens.txt").exists()
        assert (out / "trace.jsonl").exists()
        assert (out / "config.json").exists()
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["seed"] == 42
        assert echoed["model"]["num_layers"] == 4  # defaults expanded

    def test_byte_identical_reruns(self, tmp_path):
        cfg1 = write_cfg(tmp_path, output_dir=str(tmp_path / "a"),
                         engine={"kind": "vanilla"})
        main(["decode", "--config", cfg1])
        cfg2 = write_cfg(tmp_path, output_dir=str(tmp_path / "b"),
                         engine={"kind": "vanilla"})
        main(["decode", "--config", cfg2])
        assert (tmp_path / "a/tokens.txt").read_bytes() == (
            tmp_path / "b/tokens.txt"
        ).read_bytes()

    def test_mars_preset_refresh_counts_in_trace(self, tmp_path):
        # 128 steps against the pyramid schedule: refresh events per group are
        # the multiples of tau in 2..128.
        cfg = {
            "seed": 42,
            "output_dir": str(tmp_path / "out"),
            "layout": {"generation_length": 128},
            "decode": {"num_steps": 128, "tokens_per_step": 1},
            "engine": {"presets": ["table10-pyramid", "table8-best"]},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["decode", "--config", str(path)]) == 0
        from marscache.diffusion import DecodeTrace

        trace = DecodeTrace.from_jsonl(str(tmp_path / "out/trace.jsonl"))
        assert trace.refresh_counts("text_context") == [2, 4, 8, 16]
        assert trace.refresh_counts("visual") == [1, 2, 4, 8]

    def test_invalid_config_nonzero_exit(self, tmp_path, capsys):
        # 1 step cannot cover 2 blocks.
        out = tmp_path / "out"
        cfg = write_cfg(tmp_path, output_dir=str(out), decode={"num_steps": 1})
        assert main(["decode", "--config", cfg]) == 2
        assert "decode" in capsys.readouterr().err
        assert not out.exists()  # invalid configs write no artifacts

    def test_conflicting_commit_rules_rejected(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg = write_cfg(
            tmp_path,
            output_dir=str(out),
            decode={"num_steps": 16, "tokens_per_step": 2,
                    "confidence_threshold": 0.9},
        )
        assert main(["decode", "--config", cfg]) == 2
        assert "decode" in capsys.readouterr().err
        assert not out.exists()

    def test_set_overrides(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "o1"),
                        engine={"kind": "vanilla"})
        assert main(["decode", "--config", cfg, "--set",
                     f"output_dir={tmp_path / 'o2'}"]) == 0
        assert (tmp_path / "o2/tokens.txt").exists()


class TestBenchCommand:
    def test_empty_engine_list_rejected(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"), engines=[])
        assert main(["bench", "--config", cfg]) == 2
        assert "engines" in capsys.readouterr().err

    def test_degenerate_agreement_is_full(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            output_dir=str(tmp_path / "out"),
            engines=[
                {"name": "vanilla", "kind": "vanilla"},
                {
                    "name": "mars-degenerate", "kind": "mars",
                    "tau_text": [1, 1, 1, 1], "tau_visual": [1, 1, 1, 1],
                    "anchor_budgets": ["full", "full", "full", "full"],
                },
            ],
        )
        assert main(["bench", "--config", cfg]) == 0
        with open(tmp_path / "out/bench.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["name"] for r in rows] == ["vanilla", "mars-degenerate"]
        assert float(rows[1]["agreement_vs_vanilla"]) == 1.0
        assert float(rows[0]["entry_ratio_vs_vanilla"]) == 1.0

    def test_preset_engine_entry_ratio_on_default_workload(self, tmp_path):
        # Default toy workload, no model/layout overrides.
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "seed": 42,
            "output_dir": str(tmp_path / "out"),
            "engines": [
                {"name": "vanilla", "kind": "vanilla"},
                {"name": "mars", "presets": ["table10-pyramid", "table8-best"]},
            ],
        }))
        assert main(["bench", "--config", str(cfg_path)]) == 0
        with open(tmp_path / "out/bench.csv") as f:
            rows = {r["name"]: r for r in csv.DictReader(f)}
        assert float(rows["mars"]["entry_ratio_vs_vanilla"]) <= 0.35
        assert int(rows["vanilla"]["total_entries"]) > int(
            rows["mars"]["total_entries"]
        )

    def test_rows_in_declaration_order_with_ratio(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            output_dir=str(tmp_path / "out"),
            engines=[
                {"name": "a", "kind": "dual_cache"},
                {"name": "b", "kind": "vanilla"},
            ],
        )
        assert main(["bench", "--config", cfg]) == 0
        with open(tmp_path / "out/bench.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["name"] for r in rows] == ["a", "b"]
        assert float(rows[0]["entry_ratio_vs_vanilla"]) < 1.0


class TestAnalyzeCommand:
    def test_unknown_mode_lists_valid(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"))
        assert main(["analyze", "--config", cfg, "--mode", "vibes"]) == 2
        err = capsys.readouterr().err
        assert "drift" in err and "cost" in err

    def test_visibility_csv(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"),
                        analyze={"length": 1024})
        assert main(["analyze", "--config", cfg, "--mode", "visibility"]) == 0
        with open(tmp_path / "out/visibility.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1024
        assert rows[0]["visibility"] == "1024"
        assert rows[-1]["visibility"] == "1"

    def test_relocation_csv_bidirectional_flat(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"),
                        analyze={"high_norm_k": 4})
        assert main(["analyze", "--config", cfg, "--mode", "relocation"]) == 0
        with open(tmp_path / "out/relocation.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        for row in rows:
            assert float(row["bidirectional_max_delta"]) <= 1e-9

    def test_cost_csv_deltas_all_zero(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"),
                        engine={"kind": "dual_cache"})
        assert main(["analyze", "--config", cfg, "--mode", "cost"]) == 0
        with open(tmp_path / "out/cost.csv") as f:
            rows = list(csv.DictReader(f))
        assert rows and all(row["delta"] == "0" for row in rows)

    def test_cost_accepts_recorded_trace_file(self, tmp_path):
        decode_cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "run"),
                               engine={"kind": "dual_cache"})
        assert main(["decode", "--config", decode_cfg]) == 0
        cost_cfg = write_cfg(
            tmp_path, output_dir=str(tmp_path / "out"),
            engine={"kind": "dual_cache"},
            analyze={"trace": str(tmp_path / "run/trace.jsonl")},
        )
        assert main(["analyze", "--config", cost_cfg, "--mode", "cost"]) == 0
        with open(tmp_path / "out/cost.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 16
        assert all(row["delta"] == "0" for row in rows)

    def test_drift_csv(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"))
        assert main(["analyze", "--config", cfg, "--mode", "drift"]) == 0
        with open(tmp_path / "out/drift.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 15  # 15 pairs x 2 modalities
        assert {r["modality"] for r in rows} == {"visual", "text_context"}

    def test_sparsity_csv(self, tmp_path):
        cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"))
        assert main(["analyze", "--config", cfg, "--mode", "sparsity"]) == 0
        with open(tmp_path / "out/sparsity.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        for row in rows:
            assert float(row["mean_entropy_nats"]) >= 0.0
