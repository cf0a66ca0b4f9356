"""Pipeline orchestration: configs, prompt splitting, manifests, CLI."""

import dataclasses
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ministory.consistent_attention import instrumentation
from ministory.data import ACTIVITIES, encode_prompt, word_to_id
from ministory.diffusion import DenoiserConfig, denoiser_parameters, init_denoiser
from ministory.motion import encoder_checksum, init_motion_model
from ministory.rng import RngStream
from ministory.serialize import load_ppm
from ministory.story import (
    SCHEMA_VERSION,
    StoryConfig,
    config_dict,
    config_hash,
    load_config,
    load_image_checkpoint,
    load_motion_checkpoint,
    reproduce_manifest,
    resolve_config,
    run_ablation_sampling_rate,
    run_generate_story,
    run_generate_transitions,
    run_metrics,
    run_train_image,
    run_train_motion,
    save_image_checkpoint,
    save_motion_checkpoint,
    split_story,
    story_prompts,
    write_image_dataset,
    write_transition_dataset,
)
from ministory.tensor import ContractError


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Tiny trained checkpoints plus a base config mapping."""
    root = tmp_path_factory.mktemp("storywork")
    base = {
        "story": "walking\nreading\njumping",
        "identity_prefix": ["red", "circle", "hat"],
        "steps": 3,
        "clip_length": 3,
        "clip_steps": 2,
        "dataset_size": 8,
        "train_steps": 5,
        "train_batch": 4,
        "motion_clips": 2,
        "motion_steps": 3,
        "motion_batch": 2,
        "image_checkpoint": str(root / "img.tsr1"),
        "motion_checkpoint": str(root / "mot.tsr1"),
        "out_dir": str(root / "train_out"),
    }
    cfg = resolve_config(base)
    run_train_image(cfg)
    run_train_motion(cfg)
    return root, base


def variant(base, **over):
    return resolve_config({**base, **over})


class TestConfig:
    def test_defaults_fully_materialized(self):
        cfg = resolve_config({})
        assert cfg == StoryConfig()
        assert config_hash(cfg) == config_hash(StoryConfig())
        assert set(config_dict(cfg)) == {
            f.name for f in dataclasses.fields(StoryConfig)
        }

    def test_roundtrip_through_dict(self):
        cfg = resolve_config({"story": "walking", "identity_prefix":
                              ["red", "circle", "hat"], "seed": 9})
        assert resolve_config(config_dict(cfg)) == cfg

    def test_hash_tracks_every_field(self):
        a = resolve_config({"seed": 1})
        b = resolve_config({"seed": 2})
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(resolve_config({"seed": 1}))

    def test_unknown_keys_named(self):
        with pytest.raises(ContractError, match="tile_sizes"):
            resolve_config({"tile_sizes": 4})

    def test_schema_version_enforced(self):
        with pytest.raises(ContractError, match="schema version"):
            resolve_config({"schema_version": SCHEMA_VERSION + 1})

    @pytest.mark.parametrize("field,value", [
        ("sampling_rate", 1.5),
        ("tile_size", 0),
        ("clip_length", 1),
        ("seed", -1),
        ("lr", 0.0),
        ("steps", 0),
        ("guidance", -1.0),
    ])
    def test_field_validation(self, field, value):
        with pytest.raises(ContractError):
            resolve_config({field: value})

    def test_identity_prefix_validated(self):
        with pytest.raises(ContractError, match="blorp"):
            resolve_config({"identity_prefix": ["blorp"]})
        with pytest.raises(ContractError):
            resolve_config({"identity_prefix": "red"})

    def test_replace_revalidates(self):
        cfg = StoryConfig()
        with pytest.raises(ContractError):
            dataclasses.replace(cfg, sampling_rate=2.0)

    def test_load_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "absent.json"
        with pytest.raises(ContractError, match="absent.json"):
            load_config(missing)

    def test_malformed_json_reports_position(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": }')
        with pytest.raises(ContractError, match=r"line 1 column 10"):
            load_config(bad)

    def test_non_object_root_rejected(self, tmp_path):
        bad = tmp_path / "list.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ContractError, match="JSON object"):
            load_config(bad)


class TestSplitStory:
    def test_two_lines_share_identity_tokens(self):
        prompts = split_story("red circle hat walking\nred circle hat reading")
        assert len(prompts) == 2
        assert prompts[0][:3] == prompts[1][:3]
        assert prompts[0] == encode_prompt(("red", "circle", "hat", "walking"))

    def test_single_line(self):
        assert split_story("blue square scarf sitting") == [
            encode_prompt(("blue", "square", "scarf", "sitting"))
        ]

    def test_blank_lines_skipped_but_numbering_kept(self):
        with pytest.raises(ContractError, match=r"'blorp' on line 3"):
            split_story("red circle hat walking\n\nred circle hat blorp")

    def test_empty_text_rejected(self):
        for text in ("", "   \n  \n"):
            with pytest.raises(ContractError):
                split_story(text)

    def test_story_prompts_prepends_prefix(self):
        cfg = resolve_config({"story": "waving\nsleeping",
                              "identity_prefix": ["green", "triangle", "scarf"]})
        ids = story_prompts(cfg)
        assert ids.shape == (2, 4)
        assert ids[0].tolist() == [word_to_id[w] for w in
                                   ("green", "triangle", "scarf", "waving")]

    def test_story_prompts_arity_error_names_line(self):
        cfg = resolve_config({"story": "waving\nscarf sleeping",
                              "identity_prefix": ["green", "triangle", "scarf"]})
        with pytest.raises(ContractError, match="line 2"):
            story_prompts(cfg)


class TestCheckpoints:
    def test_image_roundtrip(self, tmp_path):
        params = init_denoiser(DenoiserConfig(), RngStream(3))
        path = tmp_path / "img.tsr1"
        save_image_checkpoint(path, params)
        loaded = load_image_checkpoint(path)
        for a, b in zip(denoiser_parameters(params),
                        denoiser_parameters(loaded)):
            assert a.name == b.name
            assert np.array_equal(a.tensor.data, b.tensor.data)

    def test_motion_roundtrip_preserves_encoder(self, tmp_path):
        model = init_motion_model(RngStream(6))
        path = tmp_path / "mot.tsr1"
        save_motion_checkpoint(path, model)
        loaded = load_motion_checkpoint(path)
        assert encoder_checksum(loaded.encoder) == encoder_checksum(model.encoder)

    def test_missing_checkpoint_names_path(self, tmp_path):
        with pytest.raises(ContractError, match="gone.tsr1"):
            load_image_checkpoint(tmp_path / "gone.tsr1")
        with pytest.raises(ContractError, match="no image checkpoint"):
            load_image_checkpoint("")


class TestGenerateStory:
    def test_same_config_twice_is_identical(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "a"))
        m1 = run_generate_story(cfg)
        m2 = run_generate_story(cfg)
        assert m1 == m2
        # pixels do not depend on where they are written
        m3 = run_generate_story(variant(base, out_dir=str(tmp_path / "b")))
        assert m3["outputs"] == m1["outputs"]

    def test_manifest_contents(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "s"))
        manifest = run_generate_story(cfg)
        assert manifest["kind"] == "story"
        assert manifest["config_hash"] == config_hash(cfg)
        assert manifest["seed"] == cfg.seed
        assert manifest["prompts"][0] == ["red", "circle", "hat", "walking"]
        assert len(manifest["outputs"]) == 3
        for name in manifest["outputs"]:
            img = load_ppm(os.path.join(cfg.out_dir, name))
            assert img.shape == (16, 16, 3)
        on_disk = json.load(open(os.path.join(cfg.out_dir,
                                              "story_manifest.json")))
        assert on_disk == manifest

    def test_seed_changes_pixels(self, work, tmp_path):
        root, base = work
        m1 = run_generate_story(variant(base, out_dir=str(tmp_path / "a")))
        m2 = run_generate_story(variant(base, out_dir=str(tmp_path / "b"),
                                        seed=99))
        assert m1["outputs"] != m2["outputs"]

    def test_missing_checkpoint(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "x"),
                      image_checkpoint=str(tmp_path / "gone.tsr1"))
        with pytest.raises(ContractError, match="gone.tsr1"):
            run_generate_story(cfg)

    def test_window_memory_independent_of_story_length(self, work, tmp_path):
        root, base = work
        lines = [ACTIVITIES[i % len(ACTIVITIES)] for i in range(12)]
        n = 16  # tokens per 16x16 image at patch size 4
        bound = 4 * n + int(0.5 * 4 * n)
        peaks = {}
        for count in (12, 8):
            instrumentation.reset()
            run_generate_story(variant(
                base, story="\n".join(lines[:count]), steps=2,
                tile_size=4, sampling_rate=0.5,
                out_dir=str(tmp_path / f"w{count}")))
            peaks[count] = instrumentation.max_paired_tokens
            if count == 12:
                # 12 - 4 + 1 windows per pass, depth 4, cond + uncond,
                # one transition for a 2-timestep schedule
                assert instrumentation.window_count == 9 * 4 * 2
        assert peaks[12] <= bound
        assert peaks[12] == peaks[8]


class TestTransitions:
    def test_three_images_two_clips(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "t"))
        run_generate_story(cfg)
        manifest = run_generate_transitions(cfg)
        assert [c["dir"] for c in manifest["clips"]] == ["clip_000", "clip_001"]
        for clip in manifest["clips"]:
            assert len(clip["frames"]) == cfg.clip_length
            assert clip["endpoint_mse_start"] >= 0.0
            assert np.isfinite(clip["endpoint_mse_end"])
            for name in clip["frames"]:
                frame = load_ppm(os.path.join(cfg.out_dir, clip["dir"], name))
                assert frame.shape == (16, 16, 3)

    def test_deterministic(self, work, tmp_path):
        root, base = work
        story_dir = str(tmp_path / "src")
        run_generate_story(variant(base, out_dir=story_dir))
        m1 = run_generate_transitions(
            variant(base, out_dir=str(tmp_path / "a")), images_dir=story_dir)
        m2 = run_generate_transitions(
            variant(base, out_dir=str(tmp_path / "b")), images_dir=story_dir)
        assert [c["frames"] for c in m1["clips"]] == \
               [c["frames"] for c in m2["clips"]]

    def test_too_few_images(self, work, tmp_path):
        root, base = work
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = variant(base, out_dir=str(tmp_path / "t2"))
        with pytest.raises(ContractError, match="at least 2"):
            run_generate_transitions(cfg, images_dir=str(empty))

    def test_prompt_image_count_mismatch(self, work, tmp_path):
        root, base = work
        story_dir = str(tmp_path / "src3")
        run_generate_story(variant(base, out_dir=story_dir))
        short = variant(base, story="walking\nreading",
                        out_dir=str(tmp_path / "t3"))
        with pytest.raises(ContractError, match="2 prompts but 3"):
            run_generate_transitions(short, images_dir=story_dir)


class TestAblation:
    def test_table_and_rate_zero_degeneracy(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "ab"), steps=2)
        rates = [0.0, 0.3, 0.5, 1.0]
        report = run_ablation_sampling_rate(cfg, rates)
        assert [row["rate"] for row in report.breakdown] == rates
        assert report.values["similarity_rate_0"] == \
               report.values["similarity_vanilla"]
        again = run_ablation_sampling_rate(cfg, rates)
        assert report.values == again.values
        parsed = json.loads(report.to_json())
        assert parsed["values"] == report.values

    def test_rate_validation(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "ab2"), steps=2)
        with pytest.raises(ContractError):
            run_ablation_sampling_rate(cfg, [])
        with pytest.raises(ContractError):
            run_ablation_sampling_rate(cfg, [0.5, 1.2])


class TestMetricsRun:
    def test_report_values(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "m"))
        run_generate_story(cfg)
        report = run_metrics(cfg)
        assert set(report.values) == {"character_similarity",
                                      "prompt_adherence"}
        assert report.values == run_metrics(cfg).values

    def test_count_mismatch(self, work, tmp_path):
        root, base = work
        story_dir = str(tmp_path / "m2")
        run_generate_story(variant(base, out_dir=story_dir))
        short = variant(base, story="walking\nreading")
        with pytest.raises(ContractError, match="2 prompts but 3"):
            run_metrics(short, images_dir=story_dir)


class TestDatasets:
    def test_image_dataset_index(self, tmp_path):
        cfg = resolve_config({"dataset_size": 5,
                              "out_dir": str(tmp_path / "ds")})
        manifest = write_image_dataset(cfg)
        assert manifest["kind"] == "image_dataset"
        assert len(manifest["entries"]) == 5
        for entry in manifest["entries"]:
            assert entry["words"] == [w for w in entry["words"]]
            assert entry["tokens"] == [word_to_id[w] for w in entry["words"]]
            assert os.path.exists(os.path.join(cfg.out_dir, entry["file"]))
        assert set(manifest["outputs"]) == {e["file"]
                                            for e in manifest["entries"]}

    def test_transition_dataset_index(self, tmp_path):
        cfg = resolve_config({"motion_clips": 2, "clip_length": 4,
                              "out_dir": str(tmp_path / "dc")})
        manifest = write_transition_dataset(cfg)
        assert manifest["kind"] == "transition_dataset"
        assert len(manifest["entries"]) == 2
        for entry in manifest["entries"]:
            assert entry["length"] == 4
            assert len(entry["frames"]) == 4
            for name in entry["frames"]:
                assert os.path.exists(os.path.join(cfg.out_dir, name))


class TestReproduce:
    def test_story_manifest(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "orig"))
        run_generate_story(cfg)
        result = reproduce_manifest(
            os.path.join(cfg.out_dir, "story_manifest.json"),
            tmp_path / "redo")
        assert result == {"identical": True, "mismatched": [], "checked": 3}

    def test_transitions_manifest(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "orig"))
        run_generate_story(cfg)
        run_generate_transitions(cfg)
        result = reproduce_manifest(
            os.path.join(cfg.out_dir, "transitions_manifest.json"),
            tmp_path / "redo")
        assert result["identical"] and result["checked"] == 2 * cfg.clip_length

    def test_train_manifest(self, work, tmp_path):
        root, base = work
        cfg = variant(base, out_dir=str(tmp_path / "orig"),
                      image_checkpoint=str(tmp_path / "img.tsr1"))
        run_train_image(cfg)
        result = reproduce_manifest(
            os.path.join(cfg.out_dir, "image_train_manifest.json"),
            tmp_path / "redo")
        assert result["identical"]
        # the original checkpoint must not have been touched
        assert os.path.exists(cfg.image_checkpoint)

    def test_dataset_manifest(self, tmp_path):
        cfg = resolve_config({"dataset_size": 3,
                              "out_dir": str(tmp_path / "ds")})
        write_image_dataset(cfg)
        result = reproduce_manifest(os.path.join(cfg.out_dir, "index.json"),
                                    tmp_path / "redo")
        assert result["identical"] and result["checked"] == 3

    def test_changed_checkpoint_detected(self, work, tmp_path):
        root, base = work
        ckpt = tmp_path / "img.tsr1"
        cfg = variant(base, out_dir=str(tmp_path / "orig"),
                      image_checkpoint=str(ckpt))
        run_train_image(cfg)
        gen = variant(base, out_dir=str(tmp_path / "gen"),
                      image_checkpoint=str(ckpt))
        run_generate_story(gen)
        raw = bytearray(ckpt.read_bytes())
        raw[-1] ^= 0xFF
        ckpt.write_bytes(bytes(raw))
        with pytest.raises(ContractError, match="changed since"):
            reproduce_manifest(
                os.path.join(gen.out_dir, "story_manifest.json"),
                tmp_path / "redo")

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"kind": "mystery", "config": {}}))
        with pytest.raises(ContractError, match="mystery"):
            reproduce_manifest(path, tmp_path / "redo")


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "ministory.cli", *args],
        capture_output=True, text=True)


class TestCli:
    def test_help_exits_zero(self):
        assert run_cli("--help").returncode == 0
        for sub in ("make-dataset", "train-image", "train-motion",
                    "generate-story", "generate-transitions", "metrics",
                    "ablate"):
            proc = run_cli(sub, "--help")
            assert proc.returncode == 0
            assert "--config" in proc.stdout

    def test_missing_config_names_path(self):
        proc = run_cli("generate-story", "--config", "/nowhere/missing.json")
        assert proc.returncode != 0
        assert "/nowhere/missing.json" in proc.stderr

    def test_unknown_flag_is_usage_error(self):
        assert run_cli("generate-story", "--bogus", "1").returncode == 2

    def test_malformed_config_reports_position(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": 1,}')
        proc = run_cli("metrics", "--config", str(bad))
        assert proc.returncode == 2
        assert "line 1" in proc.stderr

    def test_seed_flag_beats_config(self, work, tmp_path):
        root, base = work
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {**base, "out_dir": str(tmp_path / "out"), "seed": 1}))
        proc = run_cli("generate-story", "--config", str(cfg_path),
                       "--seed", "7")
        assert proc.returncode == 0, proc.stderr
        manifest = json.load(open(tmp_path / "out" / "story_manifest.json"))
        assert manifest["seed"] == 7
        assert manifest["config"]["seed"] == 7

    def test_metrics_and_ablate_write_reports(self, work, tmp_path):
        root, base = work
        out = str(tmp_path / "out")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({**base, "out_dir": out, "steps": 2}))
        assert run_cli("generate-story", "--config",
                       str(cfg_path)).returncode == 0
        proc = run_cli("metrics", "--config", str(cfg_path))
        assert proc.returncode == 0
        assert os.path.exists(os.path.join(out, "metrics_report.json"))
        proc = run_cli("ablate", "--config", str(cfg_path),
                       "--rate-list", "0.0,0.5")
        assert proc.returncode == 0, proc.stderr
        report = json.load(open(os.path.join(out, "ablation_report.json")))
        assert "similarity_rate_0.5" in report["values"]

    def test_bad_rate_list(self, work, tmp_path):
        root, base = work
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {**base, "out_dir": str(tmp_path / "out")}))
        proc = run_cli("ablate", "--config", str(cfg_path),
                       "--rate-list", "0.0,half")
        assert proc.returncode == 2
        assert "half" in proc.stderr

    def test_make_dataset(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "dataset_size": 3, "motion_clips": 1, "clip_length": 3,
            "out_dir": str(tmp_path / "ds")}))
        proc = run_cli("make-dataset", "--config", str(cfg_path))
        assert proc.returncode == 0, proc.stderr
        assert os.path.exists(tmp_path / "ds" / "images" / "index.json")
        assert os.path.exists(tmp_path / "ds" / "clips" / "index.json")