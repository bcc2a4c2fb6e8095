import json
import os
import struct

import numpy as np
import pytest

from llr import attacks, models, training
from llr.errors import ConfigError, ContractError, FormatError
from llr.harness import checkpoint, cli, data, desk
from llr.harness.config import load_config, parse_epsilon
from llr.harness.surface import surface_grid
from llr.harness.sweep import strength_sweep
from llr.harness.verify import bound_trials
from oracles import cifar_record


# ------------------------------------------------------------------ CIFAR-10


def fixture_bytes(rng, n=3):
    pixels = [rng.integers(0, 256, (3, 32, 32)) for _ in range(n)]
    labels = [int(v) for v in rng.integers(0, 10, n)]
    return b"".join(cifar_record(lab, px) for lab, px in zip(labels, pixels)), pixels, labels


def test_cifar_decode_matches_hand_layout(rng):
    blob, pixels, labels = fixture_bytes(rng)
    images, got = data.decode_records(blob)
    assert got.tolist() == labels
    for i in range(3):
        assert np.array_equal(images[i], pixels[i])
        # red plane of record i starts right after its label byte
        assert images[i, 0, 0, 0] == blob[i * 3073 + 1]
        assert images[i, 2, 31, 31] == blob[i * 3073 + 3072]


def test_cifar_partial_record(rng):
    blob, _, _ = fixture_bytes(rng, 2)
    with pytest.raises(FormatError) as err:
        data.decode_records(blob[:-5])
    assert err.value.offset == 3073
    assert "offset 3073" in str(err.value)


def test_cifar_bad_label(rng):
    blob, _, _ = fixture_bytes(rng, 3)
    bad = bytearray(blob)
    bad[2 * 3073] = 11
    with pytest.raises(FormatError) as err:
        data.decode_records(bytes(bad))
    assert err.value.offset == 2 * 3073


def test_cifar_loader_filters_and_scales(rng, tmp_path):
    blob, pixels, labels = fixture_bytes(rng, 6)
    path = tmp_path / "batch.bin"
    path.write_bytes(blob)
    ds = data.load_cifar10(str(path))
    assert ds.images.shape == (6, 3, 32, 32)
    assert np.array_equal(ds.images[0], pixels[0] / 255.0)
    keep = [labels[0], labels[1]] if labels[0] != labels[1] else [labels[0]]
    sub = data.load_cifar10(str(path), classes=keep)
    assert set(sub.labels.tolist()) <= set(range(len(keep)))
    assert len(sub) == sum(lab in keep for lab in labels)


def test_cifar_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_cifar10(str(tmp_path))


# --------------------------------------------------------------- checkpoints


@pytest.fixture
def saved(tmp_path):
    spec = models.small_cnn(3, channels=(2, 3), hidden=5, size=8)
    p = models.init_params(spec, 9)
    p.epoch, p.seed = 4, 9
    path = tmp_path / "m.ckpt"
    checkpoint.save_checkpoint(str(path), spec, p, "abc")
    return spec, p, path


def test_checkpoint_round_trip_is_bitwise(saved, rng):
    spec, p, path = saved
    ck = checkpoint.load_checkpoint(str(path))
    assert ck.spec == spec and ck.params.epoch == 4 and ck.params.seed == 9
    x = rng.uniform(0, 1, (4,) + spec.input_shape)
    a = models.evaluate_logits(spec, p, x)
    b = models.evaluate_logits(ck.spec, ck.params, x)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_corrupt_byte(saved):
    _, _, path = saved
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="digest"):
        checkpoint.load_checkpoint(str(path))


def test_checkpoint_future_version(saved):
    _, _, path = saved
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", checkpoint.VERSION + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        checkpoint.load_checkpoint(str(path))
    assert str(checkpoint.VERSION + 1) in str(err.value) and str(checkpoint.VERSION) in str(err.value)


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_checkpoint_truncated(saved, cut):
    _, _, path = saved
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    with pytest.raises(FormatError):
        checkpoint.load_checkpoint(str(path))


def test_checkpoint_bad_magic(saved):
    _, _, path = saved
    blob = path.read_bytes()
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        checkpoint.load_checkpoint(str(path))


# -------------------------------------------------------------------- config


def test_parse_epsilon():
    assert parse_epsilon("8/255") == 8 / 255
    assert parse_epsilon(0.1) == 0.1
    assert parse_epsilon("0.25") == 0.25
    for bad in ("eight", -0.1, True, "1/0", None):
        with pytest.raises(ConfigError):
            parse_epsilon(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "bad.json"))
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "list.json"))


# ----------------------------------------------------------------- synthetic


def test_blobs_are_seeded_and_split():
    a = data.synthetic_blobs(3, 5, 30, seed=1)
    b = data.synthetic_blobs(3, 5, 30, seed=1)
    test = data.synthetic_blobs(3, 5, 30, seed=1, split="test")
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, test.images)
    assert np.bincount(a.labels).tolist() == [10, 10, 10]


def test_blob_centers_are_margin_apart():
    ds = data.synthetic_blobs(2, 4, 2, seed=3, margin=0.4, noise=0.0)
    gap = np.abs(ds.images[ds.labels == 0][0] - ds.images[ds.labels == 1][0])
    assert np.allclose(gap, 0.4)


def test_separable_blobs_are_learnt():
    ds = data.synthetic_blobs(2, 6, 128, seed=0, margin=0.6, noise=0.05)
    spec = models.linear(6, 2)
    cfg = training.TrainConfig(mode="erm", epochs=5, batch_size=32, ramp_epochs=0, lr_decays=())
    state = training.train(spec, ds, cfg)
    assert attacks.nominal_accuracy(spec, state.params, ds.images, ds.labels) == 1.0


def test_dataset_validation():
    with pytest.raises(ContractError):
        data.Dataset(np.full((2, 3), 1.5), [0, 1])
    with pytest.raises(ContractError):
        data.Dataset(np.zeros((2, 3)), [0, 1, 0])
    with pytest.raises(ContractError):
        data.Dataset(np.zeros((2, 3)), [0, 4], num_classes=3)


# ------------------------------------------------------------------- surface


@pytest.fixture
def mlp_model():
    spec = models.mlp(4, (6,), 3)
    return spec, models.init_params(spec, 2)


def test_surface_center_is_nominal_loss(mlp_model, rng):
    spec, p = mlp_model
    x = rng.uniform(0.2, 0.8, 4)
    grid = surface_grid(spec, p, x, 1, 0.1, 5, attacks.AttackConfig(0.1, steps=5))
    assert grid.losses.shape == (5, 5)
    z = models.evaluate_logits(spec, p, x[None])
    ref = float(np.log(np.sum(np.exp(z))) - z[0, 1])
    assert grid.center_loss() == pytest.approx(ref, rel=1e-12)
    assert np.max(np.abs(grid.u)) == pytest.approx(0.1)


def test_surface_of_linear_loss_is_a_plane(rng):
    spec = models.linear(4, 2)
    p = models.init_params(spec, 0)
    logit = lambda z, t: -z[np.arange(len(t)), t]  # noqa: E731
    grid = surface_grid(spec, p, rng.uniform(0.2, 0.8, 4), 0, 0.1, 7, attacks.AttackConfig(0.1, steps=3),
                        loss_fn=logit)
    assert grid.plane_residual() < 1e-12


def test_surface_grid_size_checked(mlp_model):
    spec, p = mlp_model
    with pytest.raises(ContractError):
        surface_grid(spec, p, np.full(4, 0.5), 0, 0.1, 4, attacks.AttackConfig(0.1, steps=2))


def test_surface_csv(mlp_model, tmp_path):
    spec, p = mlp_model
    grid = surface_grid(spec, p, np.full(4, 0.5), 0, 0.1, 3, attacks.AttackConfig(0.1, steps=2))
    grid.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "a,b,loss" and len(lines) == 10


# --------------------------------------------------------------------- sweep


def test_sweep_single_config_has_zero_drop(mlp_model, rng):
    spec, p = mlp_model
    x, t = rng.uniform(0, 1, (10, 4)), rng.integers(0, 3, 10)
    rep = strength_sweep(spec, p, x, t, [attacks.AttackConfig(0.05, steps=5)])
    assert rep.drop == 0.0


def test_sweep_is_monotone_for_nested_attacks(mlp_model, rng):
    spec, p = mlp_model
    x, t = rng.uniform(0, 1, (30, 4)), rng.integers(0, 3, 30)
    cfgs = [attacks.AttackConfig(0.1, steps=20, restarts=r) for r in (1, 2, 4)]
    rep = strength_sweep(spec, p, x, t, cfgs)
    assert rep.accuracies[0] >= rep.accuracies[1] >= rep.accuracies[2]
    with pytest.raises(ContractError):
        strength_sweep(spec, p, x, t, [])


def test_bound_trials_summary():
    res = bound_trials(50, seed=1)
    assert res.holds and res.summary()["trials"] == 50


# ----------------------------------------------------------------------- CLI


CLI_CONFIG = {
    "seed": 3,
    "model": {"arch": "mlp", "in_dim": 6, "hidden": [8], "num_classes": 2},
    "data": {"source": "blobs", "classes": 2, "dims": 6, "count": 64, "test_count": 12},
    "train": {"mode": "llr", "epochs": 2, "batch_size": 16, "ramp_epochs": 1, "lr_decays": [], "inner_steps": 2},
    "attack": {"steps": 5},
    "linearity": {"steps": 5},
    "surface": {"n": 3, "attack": {"steps": 3}},
    "sweep": [{"steps": 3}, {"steps": 10, "restarts": 2}],
}


@pytest.fixture
def cli_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CLI_CONFIG))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_cli_train_is_deterministic(cli_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", cli_config, "--run-dir", a) == 0
    assert run("train", "--config", cli_config, "--run-dir", b) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
    resolved = json.loads((a / "config.json").read_text())
    assert resolved["train"]["seed"] == 3


def test_cli_evaluation_commands(cli_config, tmp_path):
    tr = tmp_path / "train"
    assert run("train", "--config", cli_config, "--run-dir", tr) == 0
    ck = tr / "final.ckpt"
    for cmd, out in (("attack", "attack.csv"), ("linearity", "linearity.csv"), ("surface", "surface.csv"),
                     ("sweep", "sweep.csv")):
        d = tmp_path / cmd
        assert run(cmd, "--config", cli_config, "--checkpoint", ck, "--run-dir", d, "--epsilon", "8/255") == 0, cmd
        assert (d / out).exists() and (d / "config.json").exists()
    summary = json.loads((tmp_path / "attack" / "attack.json").read_text())
    assert 0.0 <= summary["adversarial_accuracy"] <= 1.0


def test_cli_verify_bounds(tmp_path):
    assert run("verify-bounds", "--trials", 20, "--run-dir", tmp_path) == 0
    assert json.loads((tmp_path / "bounds.json").read_text())["holds"] is True


def test_cli_errors(cli_config, tmp_path, capsys):
    assert run("train", "--config", cli_config, "--set", "train.lamda=1", "--run-dir", tmp_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and "lamda" in err["message"]
    assert run("attack", "--config", cli_config, "--run-dir", tmp_path) == 2
    assert run("attack", "--config", cli_config, "--checkpoint", tmp_path / "none.ckpt", "--run-dir", tmp_path) == 2
    with pytest.raises(SystemExit) as exc:
        run("nonsense")
    assert exc.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_exit_code(cli_config, tmp_path, capsys):
    assert run("train", "--config", cli_config, "--set", "train.lr=1e308", "--set", "train.epochs=1",
               "--run-dir", tmp_path) == 1
    assert "diagnostics" in json.loads(capsys.readouterr().err)


# ----------------------------------------------------------------- desk runs


def test_desk_configs_compress_the_schedule():
    cfg = desk.base_config()
    assert cfg.epochs == 30 and cfg.ramp_epochs == 5
    assert [e for e, _ in cfg.lr_decays] == [25, 28]
    assert desk.adv_config(8).pgd_steps == 8 and desk.llr_config(2).inner_steps == 2
    assert desk.base_config(epochs=6).lr_decays == ((5.0, 0.1), (6.0, 0.1))


def test_desk_drivers_smoke():
    spec = models.small_cnn(2, channels=(2, 2), hidden=4, size=8)
    tr = data.synthetic_images(2, 16, seed=0, size=8)
    te = data.synthetic_images(2, 8, seed=0, size=8, split="test")
    orig = desk.desk_model
    desk.desk_model = lambda num_classes=2: spec
    try:
        g = desk.inner_step_gamma(tr, epochs=1, probe=4)
        res, fitted = desk.obfuscation_gaps(tr, te, epochs=1, restarts=2)
        drops = desk.sweep_drops(fitted, te.take(4))
    finally:
        desk.desk_model = orig
    assert g["ratio"] > 0
    assert set(res) == {"adv-1", "adv-2", "llr-2"}
    assert "median_test_gamma" in res["llr-2"] and "gap_points" in res["adv-1"]
    assert set(drops) == {"adv-2", "llr-2"}


def test_cifar_dir_requires_all_files(tmp_path, monkeypatch):
    monkeypatch.setenv(data.DATA_ENV, str(tmp_path))
    assert data.cifar10_dir() is None
    for f in data.TRAIN_FILES + data.TEST_FILES:
        (tmp_path / f).write_bytes(b"")
    assert data.cifar10_dir() == str(tmp_path)
    assert os.path.isdir(data.cifar10_dir())
