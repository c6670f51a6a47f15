import numpy as np
import pytest
import torch

from sbl.anchors import generate_anchors
from sbl.model import (
    Checkpoint,
    DetectorConfig,
    DetectorNet,
    load_checkpoint,
    predict,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def config():
    return DetectorConfig(num_classes=3, input_size=64)


@pytest.fixture(scope="module")
def net(config):
    return DetectorNet(config, seed=0)


class TestDetectorConfig:
    def test_defaults(self):
        cfg = DetectorConfig(num_classes=15)
        assert cfg.input_size == 512
        assert cfg.anchors_per_cell == 9

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_classes": 0},
            {"num_classes": 3, "prior": 0.0},
            {"num_classes": 3, "prior": 1.0},
            {"num_classes": 3, "strides": (8,)},  # base_sizes no longer pairs up
            {"num_classes": 3, "strides": (64, 128), "base_sizes": (32.0, 64.0)},
            {"num_classes": 3, "input_size": 100},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            DetectorConfig(**kwargs)

    def test_dict_roundtrip(self, config):
        assert DetectorConfig.from_dict(config.to_dict()) == config

    def test_anchor_config_mirrors_settings(self, config):
        ac = config.anchor_config
        assert ac.strides == config.strides
        assert ac.base_sizes == config.base_sizes
        assert ac.aspect_ratios == config.aspect_ratios


class TestDetectorNet:
    def test_build_deterministic(self, config):
        a = DetectorNet(config, seed=0).state_dict()
        b = DetectorNet(config, seed=0).state_dict()
        assert a.keys() == b.keys()
        for key in a:
            torch.testing.assert_close(a[key], b[key], rtol=0, atol=0)

    def test_seed_changes_weights(self, config):
        a = DetectorNet(config, seed=0).state_dict()
        b = DetectorNet(config, seed=1).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_build_leaves_global_rng_alone(self, config):
        torch.manual_seed(123)
        expected = torch.rand(4)
        torch.manual_seed(123)
        DetectorNet(config, seed=7)
        torch.testing.assert_close(torch.rand(4), expected, rtol=0, atol=0)

    def test_forward_layout_matches_anchor_grid(self, config, net):
        anchors = generate_anchors(config.input_size, config.input_size, config.anchor_config)
        x = torch.rand(2, 3, config.input_size, config.input_size)
        with torch.no_grad():
            outputs = net(x)
        assert len(outputs) == len(config.strides)
        total = 0
        for (probs, deltas), (gh, gw), n_level in zip(outputs, anchors.grid_shapes, anchors.level_sizes):
            n = gh * gw * config.anchors_per_cell
            assert n == n_level
            assert probs.shape == (2, n, config.num_classes)
            assert deltas.shape == (2, n, 4)
            total += n
        assert total == anchors.boxes.shape[0]

    def test_forward_probabilities_in_unit_interval(self, config, net):
        x = torch.rand(1, 3, config.input_size, config.input_size)
        with torch.no_grad():
            for probs, _ in net(x):
                assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0

    def test_fresh_net_scores_near_prior(self, config, net):
        x = torch.full((1, 3, config.input_size, config.input_size), 0.5)
        with torch.no_grad():
            scores = torch.cat([p.reshape(-1) for p, _ in net(x)])
        median = float(scores.median())
        assert 1e-4 < median < 0.1
        assert float((scores < 0.25).float().mean()) > 0.99

    def test_rejects_wrong_input_shape(self, config, net):
        with pytest.raises(ValueError):
            net(torch.rand(1, 3, 32, 32))
        with pytest.raises(ValueError):
            net(torch.rand(3, config.input_size, config.input_size))


class TestPredict:
    def test_detections_well_formed(self, config, net, rng):
        image = rng.uniform(0, 1, size=(config.input_size, config.input_size, 3)).astype(np.float32)
        detections = predict(net, image, score_threshold=0.0, max_detections=50)
        assert 0 < len(detections) <= 50
        scores = [d.score for d in detections]
        assert scores == sorted(scores, reverse=True)
        for det in detections:
            assert 0.0 <= det.box.x_min < det.box.x_max <= config.input_size
            assert 0.0 <= det.box.y_min < det.box.y_max <= config.input_size
            assert 0 <= det.class_id < config.num_classes

    def test_score_threshold_respected(self, config, net, rng):
        image = rng.uniform(0, 1, size=(config.input_size, config.input_size, 3)).astype(np.float32)
        for det in predict(net, image, score_threshold=0.02):
            assert det.score > 0.02

    def test_no_salience_work(self, config, net, rng):
        from sbl.salience import reset_salience_call_count, salience_call_count

        image = rng.uniform(0, 1, size=(config.input_size, config.input_size, 3)).astype(np.float32)
        reset_salience_call_count()
        predict(net, image, score_threshold=0.0)
        assert salience_call_count() == 0

    def test_restores_training_mode(self, config, net, rng):
        image = rng.uniform(0, 1, size=(config.input_size, config.input_size, 3)).astype(np.float32)
        net.train()
        predict(net, image)
        assert net.training
        net.eval()
        predict(net, image)
        assert not net.training

    def test_validation(self, config, net):
        image = np.zeros((config.input_size, config.input_size, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            predict(net, image, score_threshold=1.5)
        with pytest.raises(ValueError):
            predict(net, image, nms_threshold=-0.1)
        with pytest.raises(ValueError):
            predict(net, np.zeros((32, 32, 3), dtype=np.float32))

    def test_model_module_never_imports_salience(self):
        # Inference must stand alone: the model module's import graph has no
        # edge to the salience machinery.
        import ast
        import inspect

        import sbl.model

        tree = ast.parse(inspect.getsource(sbl.model))
        imported = []
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                imported.extend(alias.name for alias in node.names)
            elif isinstance(node, ast.ImportFrom):
                imported.append(node.module or "")
                imported.extend(alias.name for alias in node.names)
        assert not any("salience" in name for name in imported)


def _adam_step(net, config):
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    x = torch.rand(1, 3, config.input_size, config.input_size)
    loss = sum(p.sum() + d.sum() for p, d in net(x))
    opt.zero_grad()
    loss.backward()
    opt.step()
    return opt


class TestCheckpoints:
    def test_roundtrip_restores_weights(self, config, tmp_path):
        net = DetectorNet(config, seed=4)
        path = str(tmp_path / "ckpt.sblckpt")
        save_checkpoint(path, net, None, step=17, learning_rate=0.01, train_config={"k": 1}, stats={"s": 2})
        ckpt = load_checkpoint(path)
        assert ckpt.step == 17
        assert ckpt.learning_rate == 0.01
        assert ckpt.detector_config == config
        assert ckpt.train_config == {"k": 1}
        assert ckpt.stats == {"s": 2}
        for name, tensor in net.state_dict().items():
            np.testing.assert_array_equal(ckpt.model_state[name], tensor.numpy())

    def test_save_is_byte_stable(self, config, tmp_path):
        net = DetectorNet(config, seed=4)
        a, b = str(tmp_path / "a.sblckpt"), str(tmp_path / "b.sblckpt")
        save_checkpoint(a, net, None, step=1, learning_rate=0.1)
        save_checkpoint(b, net, None, step=1, learning_rate=0.1)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_load_save_cycle_is_byte_identical(self, config, tmp_path):
        net = DetectorNet(config, seed=4)
        _adam_step(net, config)
        first = str(tmp_path / "first.sblckpt")
        save_checkpoint(first, net, None, step=5, learning_rate=0.05)
        rebuilt = load_checkpoint(first).build_net()
        second = str(tmp_path / "second.sblckpt")
        save_checkpoint(second, rebuilt, None, step=5, learning_rate=0.05)
        assert open(first, "rb").read() == open(second, "rb").read()

    def test_rebuilt_net_forward_parity(self, config, tmp_path, rng):
        net = DetectorNet(config, seed=4)
        _adam_step(net, config)
        path = str(tmp_path / "ckpt.sblckpt")
        save_checkpoint(path, net, None, step=1, learning_rate=0.1)
        rebuilt = load_checkpoint(path).build_net()
        x = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, config.input_size, config.input_size)).astype(np.float32))
        net.eval()
        rebuilt.eval()
        with torch.no_grad():
            for (pa, da), (pb, db) in zip(net(x), rebuilt(x)):
                torch.testing.assert_close(pa, pb, rtol=0, atol=0)
                torch.testing.assert_close(da, db, rtol=0, atol=0)

    def test_optimizer_state_roundtrip(self, config, tmp_path):
        net = DetectorNet(config, seed=4)
        opt = _adam_step(net, config)
        path = str(tmp_path / "ckpt.sblckpt")
        save_checkpoint(path, net, opt, step=1, learning_rate=1e-3)
        ckpt = load_checkpoint(path)
        assert ckpt.optimizer_state is not None
        original = opt.state_dict()
        for idx, entry in ckpt.optimizer_state["state"].items():
            torch.testing.assert_close(
                entry["exp_avg"], original["state"][idx]["exp_avg"], rtol=0, atol=0
            )
            assert float(entry["step"]) == float(original["state"][idx]["step"])

    def test_checkpoint_dataclass_build_net(self, config):
        net = DetectorNet(config, seed=2)
        state = {k: v.numpy().astype(np.float32) for k, v in net.state_dict().items()}
        ckpt = Checkpoint(detector_config=config, step=0, learning_rate=0.1, model_state=state, optimizer_state=None)
        rebuilt = ckpt.build_net()
        for k, v in rebuilt.state_dict().items():
            np.testing.assert_array_equal(v.numpy(), state[k])

    def test_load_rejects_garbage(self, config, tmp_path):
        path = str(tmp_path / "bad.sblckpt")
        with open(path, "wb") as fh:
            fh.write(b"abc")
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_load_rejects_foreign_format(self, tmp_path):
        import json as _json
        import struct as _struct

        path = str(tmp_path / "foreign.sblckpt")
        blob = _json.dumps({"format": "other", "tensors": []}).encode()
        with open(path, "wb") as fh:
            fh.write(_struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_load_rejects_trailing_bytes(self, config, tmp_path):
        net = DetectorNet(config, seed=4)
        path = str(tmp_path / "ckpt.sblckpt")
        save_checkpoint(path, net, None, step=1, learning_rate=0.1)
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(ValueError, match="length mismatch"):
            load_checkpoint(path)
