"""Experiment presets: golden hyperparameter freezes, desk/full pairing,
and spec validation."""

import json

import pytest

from depthgate.presets import ExperimentSpec, PRESETS, get_preset, preset_names

COPY_TSA_GOLDEN = {
    "name": "copy-tsa", "task": "copy", "mode": "tsa",
    "d": 128, "n_layers": 6, "n_heads": 4, "d_ff": 512, "context": 32,
    "lambda_depth": 0.001, "seed": 0, "steps": 10000, "batch": 64,
    "lr": 0.0003, "schedule": "constant", "warmup": 100, "eval_interval": 100,
    "n_train": 10000, "n_test": 1000, "length": 10, "limit_bytes": 0,
}

CHAR_TSA_GOLDEN = {
    "name": "char-tsa", "task": "lm", "mode": "tsa",
    "d": 256, "n_layers": 6, "n_heads": 8, "d_ff": 1024, "context": 128,
    "lambda_depth": 0.001, "seed": 0, "steps": 5000, "batch": 64,
    "lr": 0.0003, "schedule": "cosine", "warmup": 100, "eval_interval": 100,
    "n_train": 0, "n_test": 0, "length": 0, "limit_bytes": 0,
}


def test_copy_tsa_golden_hyperparameters():
    assert get_preset("copy-tsa").to_dict() == COPY_TSA_GOLDEN


def test_char_tsa_golden_hyperparameters():
    assert get_preset("char-tsa").to_dict() == CHAR_TSA_GOLDEN


def test_baseline_variants_disable_gating():
    for name in ("copy-baseline", "sort-baseline", "char-baseline"):
        spec = get_preset(name)
        assert spec.mode == "baseline"
        assert spec.lambda_depth == 0.0


def test_desk_variants_shrink_only_expected_fields():
    full = get_preset("copy-tsa").to_dict()
    desk = get_preset("copy-tsa-desk").to_dict()
    changed = {k for k in full if full[k] != desk[k]}
    assert changed == {"name", "steps", "batch"}
    assert desk["steps"] == 2000 and desk["batch"] == 32

    full = get_preset("char-tsa").to_dict()
    desk = get_preset("char-tsa-desk").to_dict()
    changed = {k for k in full if full[k] != desk[k]}
    assert changed == {"name", "d", "n_heads", "d_ff", "steps", "batch"}
    # desk keeps the head width and feed-forward ratio of the full config
    assert desk["d"] // desk["n_heads"] == full["d"] // full["n_heads"]
    assert desk["d_ff"] == 4 * desk["d"]


def test_every_full_preset_has_a_desk_sibling():
    names = set(preset_names())
    fulls = {n for n in names if not n.endswith("-desk")}
    assert fulls and all(f"{n}-desk" in names for n in fulls)
    assert len(names) == 2 * len(fulls)


def test_sort_presets_differ_from_copy_only_in_task():
    a = get_preset("copy-tsa").to_dict()
    b = get_preset("sort-tsa").to_dict()
    assert {k for k in a if a[k] != b[k]} == {"name", "task"}


def test_ee_preset_mode():
    spec = get_preset("char-ee")
    assert spec.mode == "early_exit"
    assert spec.lambda_depth == 0.0


def test_get_preset_returns_a_copy():
    spec = get_preset("copy-tsa")
    spec.steps = 1
    assert get_preset("copy-tsa").steps == 10000


def test_unknown_preset_lists_available():
    with pytest.raises(ValueError, match="copy-tsa"):
        get_preset("nope")


def test_from_dict_rejects_unknown_and_missing_keys():
    good = get_preset("copy-tsa").to_dict()
    with pytest.raises(ValueError, match="unknown experiment keys"):
        ExperimentSpec.from_dict({**good, "extra": 1})
    partial = dict(good)
    del partial["steps"]
    with pytest.raises(ValueError, match="missing experiment keys"):
        ExperimentSpec.from_dict(partial)


def test_spec_validation():
    good = get_preset("copy-tsa").to_dict()
    with pytest.raises(ValueError, match="context"):
        ExperimentSpec.from_dict({**good, "context": 10})
    with pytest.raises(ValueError, match="task"):
        ExperimentSpec.from_dict({**good, "task": "mystery"})
    with pytest.raises(ValueError, match="n_train"):
        ExperimentSpec.from_dict({**good, "n_train": 0})


def test_model_config_wiring():
    synth = get_preset("copy-tsa")
    cfg = synth.model_config()
    assert cfg.vocab == 35 and cfg.mode == "tsa" and cfg.lambda_depth == 0.001
    lm = get_preset("char-tsa")
    with pytest.raises(ValueError, match="vocab"):
        lm.model_config()
    assert lm.model_config(vocab=65).vocab == 65


def test_train_config_wiring():
    spec = get_preset("char-tsa")
    tc = spec.train_config()
    assert tc.schedule == "cosine" and tc.steps == 5000 and tc.batch == 64
    assert tc.lr == pytest.approx(3e-4)


def test_json_round_trip(tmp_path):
    spec = get_preset("sort-baseline-desk")
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert ExperimentSpec.from_json(path).to_dict() == spec.to_dict()


def test_preset_table_is_exactly_the_known_set():
    assert sorted(PRESETS) == [
        "char-baseline", "char-baseline-desk", "char-ee", "char-ee-desk",
        "char-tsa", "char-tsa-desk", "copy-baseline", "copy-baseline-desk",
        "copy-tsa", "copy-tsa-desk", "sort-baseline", "sort-baseline-desk",
        "sort-tsa", "sort-tsa-desk",
    ]
