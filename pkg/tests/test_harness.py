"""
Tests for the experiment harness: config loading, dataset ingestion,
metrics files and the command-line interface.
"""

import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from app.cli import EXIT_FAILURE, EXIT_INVALID, EXIT_OK, main
from app.core.errors import ConfigParseError, ConfigValidationError, IngestionError
from app.models.ledger import Block
from app.schemas.experiment import (
    ExperimentConfig,
    MnistIdxDataset,
    SyntheticBlobsDataset,
    SyntheticImagesDataset,
)
from app.schemas.reports import METRICS_COLUMNS, MetricsRecord
from app.services.config_service import load_config, parse_config, semantic_problems
from app.services.dataset_service import class_counts, generate_synthetic, load_dataset, load_mnist_idx
from app.services.ledger_store import load_channel, save_channel
from app.services.metrics_service import read_metrics, write_metrics

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"

SMALL_RUN = {
    "format_version": 1,
    "name": "small",
    "seed": 2,
    "dataset": {"kind": "synthetic_blobs", "n": 300, "dim": 4, "classes": 3},
    "n_clients": 3,
    "model": {"hidden": [4]},
    "t": 2,
    "c": 20,
    "epochs": 1,
    "batch_size": 10,
    "rounds": 2,
    "n_endorsing_peers": 1,
}


def _write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _write_idx_images(path, pixels, magic=0x00000803, declared=None):
    n, rows, cols = pixels.shape
    header = struct.pack(">IIII", magic, n if declared is None else declared, rows, cols)
    data = header + pixels.astype(np.uint8).tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fout:
            fout.write(data)
    else:
        path.write_bytes(data)
    return path


def _write_idx_labels(path, labels, magic=0x00000801):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + bytes(labels))
    return path


def _idx_pair(tmp_path, n=3, labels=None):
    pixels = np.arange(n * 4).reshape(n, 2, 2) * 20
    images = _write_idx_images(tmp_path / "images-idx3-ubyte", pixels)
    labels = _write_idx_labels(tmp_path / "labels-idx1-ubyte", labels or list(range(n)))
    return images, labels


def test_load_config_valid(tmp_path):
    """Test a minimal synthetic config loads with defaults filled in."""
    config = load_config(_write_json(tmp_path / "small.json", SMALL_RUN))
    assert config.name == "small"
    assert config.dp.mode.value == "none"
    assert config.attack.kind == "none"
    assert config.hyperparams().t == 2


def test_load_config_reports_field_path(tmp_path):
    """Test t = 0 is rejected with the offending field named."""
    with pytest.raises(ConfigValidationError) as excinfo:
        load_config(_write_json(tmp_path / "bad.json", {**SMALL_RUN, "t": 0}))
    assert any(problem.startswith("t:") for problem in excinfo.value.problems)


def test_load_config_reports_every_problem(tmp_path):
    """Test several violations are listed together."""
    with pytest.raises(ConfigValidationError) as excinfo:
        load_config(_write_json(tmp_path / "bad.json", {**SMALL_RUN, "t": 0, "lr": -1.0, "unknown": 1}))
    locations = {problem.split(":")[0] for problem in excinfo.value.problems}
    assert {"t", "lr", "unknown"} <= locations


def test_multikrum_bound_checked_against_client_count():
    """Test 2f + 2 < N is enforced at load time."""
    data = {**SMALL_RUN, "n_clients": 4, "defense": {"use_multikrum": True, "f": 1}}
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(data)
    assert any(problem.startswith("defense.f") for problem in excinfo.value.problems)


def test_field_and_cross_field_problems_reported_together():
    """Test a bad field does not hide a violated cross-field bound."""
    data = {**SMALL_RUN, "t": 0, "n_clients": 4, "defense": {"use_multikrum": True, "f": 3}}
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(data)
    problems = excinfo.value.problems
    assert any(problem.startswith("t:") for problem in problems)
    assert any(problem.startswith("defense.f") for problem in problems)
    assert len(problems) == len(set(problems))


def test_nested_field_error_keeps_cross_field_checks():
    """Test an invalid dataset field still lets label-flip classes be checked."""
    data = {
        **SMALL_RUN,
        "dataset": {**SMALL_RUN["dataset"], "separation": -1.0},
        "attack": {"kind": "label_flip", "c_src": 0, "c_target": 9},
    }
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(data)
    locations = {problem.split(":")[0] for problem in excinfo.value.problems}
    assert "attack.c_target" in locations
    assert any(location.startswith("dataset") for location in locations)


def test_label_flip_classes_checked():
    """Test flip classes must exist and differ."""
    data = {**SMALL_RUN, "attack": {"kind": "label_flip", "c_src": 1, "c_target": 1}}
    with pytest.raises(ConfigValidationError):
        parse_config(data)
    data = {**SMALL_RUN, "attack": {"kind": "label_flip", "c_src": 0, "c_target": 7}}
    with pytest.raises(ConfigValidationError):
        parse_config(data)


def test_load_config_parse_error_position(tmp_path):
    """Test malformed JSON reports line and column."""
    path = tmp_path / "broken.json"
    path.write_text('{"format_version": 1,\n"name": }', encoding="utf-8")
    with pytest.raises(ConfigParseError) as excinfo:
        load_config(path)
    assert excinfo.value.line == 2
    assert excinfo.value.column == 9


def test_load_config_missing_file(tmp_path):
    """Test a missing config file is a configuration error."""
    with pytest.raises(ConfigValidationError):
        load_config(tmp_path / "absent.json")


def test_mnist_path_resolved_relative_to_config(tmp_path):
    """Test IDX paths are looked up next to the config file."""
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    pixels = np.zeros((6, 2, 2))
    for name in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"):
        _write_idx_images(data_dir / name, pixels)
    for name in ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"):
        _write_idx_labels(data_dir / name, [0, 1, 2, 3, 4, 5])
    config_data = {**SMALL_RUN, "dataset": {"kind": "mnist_idx", "path": "data", "train_cap": 6, "test_cap": 6}}
    config = load_config(_write_json(tmp_path / "mnist.json", config_data))
    assert Path(config.dataset.path) == data_dir.resolve()
    split = load_dataset(config.dataset, np.random.default_rng(0))
    assert len(split.train) == 6
    assert split.n_classes == 10


def test_missing_idx_files_reported(tmp_path):
    """Test absent dataset files fail validation rather than the run."""
    config_data = {**SMALL_RUN, "dataset": {"kind": "mnist_idx", "path": "nowhere"}}
    with pytest.raises(ConfigValidationError) as excinfo:
        load_config(_write_json(tmp_path / "mnist.json", config_data))
    assert any("file not found" in problem for problem in excinfo.value.problems)


def test_shipped_experiments_are_well_formed():
    """Test every bundled config validates; synthetic ones pass every check."""
    paths = sorted(EXPERIMENTS.rglob("*.json"))
    assert paths
    for path in paths:
        config = ExperimentConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
        if not isinstance(config.dataset, MnistIdxDataset):
            assert semantic_problems(config) == [], path.name


def test_idx_reader_scales_pixels(tmp_path):
    """Test pixels are flattened and scaled to [0, 1]."""
    images, labels = _idx_pair(tmp_path)
    batch = load_mnist_idx(images, labels, cap=10)
    assert batch.inputs.shape == (3, 4)
    assert batch.image_shape == (2, 2)
    np.testing.assert_allclose(batch.inputs[0], np.array([0, 20, 40, 60]) / 255.0)
    np.testing.assert_array_equal(batch.labels, [0, 1, 2])


def test_idx_reader_applies_cap(tmp_path):
    """Test only the first `cap` examples are kept."""
    images, labels = _idx_pair(tmp_path)
    assert len(load_mnist_idx(images, labels, cap=2)) == 2


def test_idx_reader_reads_gzip(tmp_path):
    """Test gzip-compressed image files are accepted."""
    pixels = np.full((2, 2, 2), 255)
    images = _write_idx_images(tmp_path / "images-idx3-ubyte.gz", pixels)
    labels = _write_idx_labels(tmp_path / "labels-idx1-ubyte", [1, 2])
    batch = load_mnist_idx(images, labels, cap=5)
    assert np.all(batch.inputs == 1.0)


def test_idx_reader_rejects_bad_magic(tmp_path):
    """Test a wrong magic number is an ingestion error."""
    images = _write_idx_images(tmp_path / "images", np.zeros((1, 2, 2)), magic=0x00000801)
    labels = _write_idx_labels(tmp_path / "labels", [0])
    with pytest.raises(IngestionError) as excinfo:
        load_mnist_idx(images, labels, cap=1)
    assert "bad magic" in str(excinfo.value)


def test_idx_reader_rejects_truncation(tmp_path):
    """Test a file shorter than its header declares is refused."""
    images = _write_idx_images(tmp_path / "images", np.zeros((2, 2, 2)), declared=3)
    labels = _write_idx_labels(tmp_path / "labels", [0, 1, 2])
    with pytest.raises(IngestionError) as excinfo:
        load_mnist_idx(images, labels, cap=3)
    assert "truncated" in str(excinfo.value)


def test_idx_reader_rejects_count_mismatch(tmp_path):
    """Test image and label counts must agree."""
    images, _ = _idx_pair(tmp_path)
    labels = _write_idx_labels(tmp_path / "short-labels", [0, 1])
    with pytest.raises(IngestionError):
        load_mnist_idx(images, labels, cap=3)


def test_idx_reader_rejects_zero_cap(tmp_path):
    """Test a cap of zero leaves nothing to train on."""
    images, labels = _idx_pair(tmp_path)
    with pytest.raises(IngestionError):
        load_mnist_idx(images, labels, cap=0)


def test_idx_reader_rejects_label_out_of_range(tmp_path):
    """Test digit labels above 9 are refused."""
    images, labels = _idx_pair(tmp_path, labels=[0, 1, 12])
    with pytest.raises(IngestionError):
        load_mnist_idx(images, labels, cap=3)


def test_class_counts_largest_remainder():
    """Test counts sum to n and follow the weights."""
    np.testing.assert_array_equal(class_counts(10, [1, 1, 2], 3), [3, 2, 5])
    np.testing.assert_array_equal(class_counts(9, None, 3), [3, 3, 3])


def test_synthetic_is_seeded():
    """Test the same seed regenerates identical data."""
    spec = SyntheticImagesDataset(n=50, h=4, w=4)
    first, second = generate_synthetic(spec, 3), generate_synthetic(spec, 3)
    np.testing.assert_array_equal(first.inputs, second.inputs)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert not np.array_equal(first.inputs, generate_synthetic(spec, 4).inputs)


def test_synthetic_images_shape_and_range():
    """Test images stay in [0, 1] with exact class counts."""
    batch = generate_synthetic(SyntheticImagesDataset(n=90, h=5, w=6, classes=3, class_weights=[1, 1, 1]), 0)
    assert batch.inputs.shape == (90, 30)
    assert batch.image_shape == (5, 6)
    assert batch.inputs.min() >= 0.0 and batch.inputs.max() <= 1.0
    np.testing.assert_array_equal(np.bincount(batch.labels), [30, 30, 30])


def test_synthetic_image_margin_is_dark():
    """Test the frame pixels are zero and the interior keeps its stripes."""
    batch = generate_synthetic(SyntheticImagesDataset(n=60, h=6, w=6, margin=1, noise=0.3), 0)
    images = batch.inputs.reshape(60, 6, 6)
    assert np.all(images[:, 0, :] == 0.0) and np.all(images[:, -1, :] == 0.0)
    assert np.all(images[:, :, 0] == 0.0) and np.all(images[:, :, -1] == 0.0)
    assert images[:, 1:-1, 1:-1].mean() > 0.2


def test_margin_must_leave_content():
    """Test a frame covering the whole image is rejected."""
    data = {**SMALL_RUN, "dataset": {"kind": "synthetic_images", "n": 300, "h": 4, "w": 4, "margin": 2}}
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(data)
    assert any(problem.startswith("dataset.margin") for problem in excinfo.value.problems)


def test_blobs_are_linearly_separable():
    """Test a linear probe separates well-spaced blobs."""
    split = load_dataset(SyntheticBlobsDataset(n=2000, dim=16, classes=4), np.random.default_rng(0))
    probe = LogisticRegression(max_iter=1000).fit(split.train.inputs, split.train.labels)
    assert probe.score(split.test.inputs, split.test.labels) >= 0.99
    assert len(split.test) == 400


def test_metrics_header_only_when_empty(tmp_path):
    """Test a run with no global blocks still writes the header."""
    path = write_metrics([], tmp_path)
    assert path.read_text().splitlines() == [",".join(METRICS_COLUMNS)]


def test_metrics_round_trip(tmp_path):
    """Test floats survive the CSV bit for bit and blanks read back as None."""
    records = [
        MetricsRecord(round=1, global_accuracy=0.1 + 0.2, global_loss=1 / 3, blocks_merged=5, blocks_rejected=0),
        MetricsRecord(
            round=2, global_accuracy=0.75, global_loss=0.5, backdoor_accuracy=0.125,
            blocks_merged=4, blocks_rejected=1, fg_min_weight=0.0, wallclock_ms=12,
        ),
    ]
    assert read_metrics(write_metrics(records, tmp_path)) == records


def _flip_payload_byte(block):
    data = bytearray(block.encode())
    offset = 3 + len(block.channel_id.encode("utf-8")) + 8 + 16 + 32 + 12
    data[offset] ^= 0x01
    return Block.decode(bytes(data), block.payload.spec_fingerprint)


def _cli_run(tmp_path):
    config = _write_json(tmp_path / "small.json", SMALL_RUN)
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_OK
    return out / "small.beas"


def test_cli_run_then_verify(tmp_path, capsys):
    """Test a finished run leaves a ledger that verifies."""
    ledger = _cli_run(tmp_path)
    assert (tmp_path / "out" / "metrics.csv").is_file()
    capsys.readouterr()
    assert main(["verify", "--ledger", str(ledger)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("OK: channel 'small'")


def test_cli_verify_reports_tampered_block(tmp_path, capsys):
    """Test a flipped payload byte exits 2 and names the block."""
    ledger = _cli_run(tmp_path)
    network, channel = load_channel(ledger)
    channel.chain[1] = _flip_payload_byte(channel.chain[1])
    save_channel(channel, network, ledger)
    capsys.readouterr()
    assert main(["verify", "--ledger", str(ledger)]) == EXIT_FAILURE
    assert "TAMPERED: first bad block 1" in capsys.readouterr().out


def test_cli_verify_reports_edited_member_role(tmp_path, capsys):
    """Test changing a role byte in the member table exits 2."""
    ledger = _cli_run(tmp_path)
    data = bytearray(ledger.read_bytes())
    (descriptor_len,) = struct.unpack_from("<I", data, 6)
    role_offset = 10 + descriptor_len + 4 + 48
    data[role_offset] ^= 0x01
    ledger.write_bytes(bytes(data))
    capsys.readouterr()
    assert main(["verify", "--ledger", str(ledger)]) == EXIT_FAILURE
    assert "TAMPERED" in capsys.readouterr().out


def test_cli_verify_unreadable_file(tmp_path, capsys):
    """Test a file that is not a ledger exits 2."""
    path = tmp_path / "junk.beas"
    path.write_bytes(b"not a ledger")
    assert main(["verify", "--ledger", str(path)]) == EXIT_FAILURE
    assert capsys.readouterr().out.startswith("UNREADABLE")


def test_cli_inspect_prints_block(tmp_path, capsys):
    """Test inspect prints the genesis block as JSON."""
    ledger = _cli_run(tmp_path)
    capsys.readouterr()
    assert main(["inspect", "--ledger", str(ledger), "--block", "0"]) == EXIT_OK
    block = json.loads(capsys.readouterr().out)
    assert block["index"] == 0
    assert block["channel_id"] == "small"
    assert main(["inspect", "--ledger", str(ledger), "--block", "999"]) == EXIT_FAILURE


def test_cli_invalid_config_exits_1(tmp_path):
    """Test a missing or invalid config is exit code 1."""
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_INVALID
    bad = _write_json(tmp_path / "bad.json", {**SMALL_RUN, "t": 0})
    assert main(["run", "--config", str(bad)]) == EXIT_INVALID


def test_cli_unknown_flag_exits_1():
    """Test argument errors use exit code 1."""
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--no-such-flag"])
    assert excinfo.value.code == EXIT_INVALID


def test_cli_missing_ledger_exits_2(tmp_path):
    """Test an unreadable ledger path is a runtime failure."""
    assert main(["verify", "--ledger", str(tmp_path / "absent.beas")]) == EXIT_FAILURE


def test_cli_dlg_writes_traces(tmp_path):
    """Test the leakage subcommand writes the summary table."""
    config = _write_json(
        tmp_path / "dlg.json",
        {
            "format_version": 1,
            "name": "dlg",
            "dataset": {"kind": "synthetic_images", "n": 30, "h": 3, "w": 3},
            "n_clients": 1,
            "dlg": {"iters": 2, "hidden": [2], "countermeasures": [{"mode": "prune", "sparsity": 0.5}]},
        },
    )
    out = tmp_path / "dlg-out"
    assert main(["dlg", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert (out / "dlg_trace_none.csv").is_file()
    assert (out / "dlg_trace_prune_0.5.csv").is_file()
    assert (out / "dlg_summary.csv").is_file()


if __name__ == "__main__":
    pytest.main([__file__])
