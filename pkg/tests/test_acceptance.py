"""End-to-end acceptance checks, one ``criterion`` marker per requirement.

The RL and SDL runs use the full desk-scale dataset and take several minutes
each; everything else finishes in seconds.
"""

import math
import struct
import time

import numpy as np
import pytest

from volq import autodiff as ad
from volq.autodiff import Conv3dSpec, Tensor
from volq.cli import main
from volq.errors import FormatError
from volq.labeler import (HashingEncoder, generate_pairs, label_manifest, read_label_map, synthetic_corpus,
                          train_encoder)
from volq.models import (DqnNetwork, SdlNetwork, checkpoint_bytes, derive_conv_shapes, dqn_forward,
                         load_checkpoint, parse_checkpoint, save_checkpoint, trunk_specs)
from volq.phantom import DEFAULT_COUNTS, PRESETS, generate_dataset, generate_phantom, load_split, read_manifest
from volq.phantom import read_volume, volume_from_bytes, volume_to_bytes, write_volume
from volq.rl import (EpsilonSchedule, QLearningSpec, ReplayBuffer, Transition, env_step, epsilon_value,
                     metrics_csv, tabular_q_learning, train_rl)
from volq.sdl import SdlTrainConfig, predict_sdl, train_sdl
from volq.stats import mcnemar

pytestmark = pytest.mark.acceptance

RL_FLOOR = 0.85
SDL_TRAIN_FLOOR = 0.95


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    generate_dataset(PRESETS["desk"], root, DEFAULT_COUNTS)
    manifest = root / "manifest.jsonl"
    return manifest, load_split(manifest, "train"), load_split(manifest, "test")


@pytest.fixture(scope="session")
def rl_runs(desk):
    _, train, test = desk
    t0 = time.perf_counter()
    first = train_rl(train, test, QLearningSpec(), seed=0)
    elapsed = time.perf_counter() - t0
    second = train_rl(train, test, QLearningSpec(), seed=0)
    return first, second, elapsed


# gradient correctness -----------------------------------------------------------

def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.mark.criterion("gradient correctness")
class TestGradients:
    TOL = 1e-4

    def test_dense_each_activation(self):
        rng = np.random.default_rng(0)
        x, w, b = _leaf(rng, 3, 5), _leaf(rng, 4, 5), _leaf(rng, 4)
        for act in ("relu", "elu", "sigmoid"):
            rep = ad.grad_check(lambda: (ad.dense(x, w, b, act) ** 2).sum(), {"x": x, "w": w, "b": b})
            assert rep.max_rel_error < self.TOL, (act, rep.per_tensor)

    def test_conv3d_one_to_two_channels(self):
        rng = np.random.default_rng(1)
        spec = Conv3dSpec(1, 2)
        x, w, b = _leaf(rng, 1, 6, 6, 6), _leaf(rng, *spec.weight_shape), _leaf(rng, 2)
        rep = ad.grad_check(lambda: (ad.relu(ad.conv3d(x, spec, w, b)) ** 2).sum() + ad.conv3d(x, spec, w, b).sum(),
                            {"x": x, "w": w, "b": b})
        assert rep.max_rel_error < self.TOL, rep.per_tensor

    def test_masked_mse(self):
        rng = np.random.default_rng(2)
        q = _leaf(rng, 6, 2)
        actions, targets = rng.integers(0, 2, 6), rng.standard_normal(6)
        rep = ad.grad_check(lambda: ad.masked_mse_loss(q, actions, targets), {"q": q})
        assert rep.max_rel_error < self.TOL

    def test_bce_through_sigmoid(self):
        rng = np.random.default_rng(3)
        z = _leaf(rng, 7)
        labels = rng.integers(0, 2, 7)
        rep = ad.grad_check(lambda: ad.bce_loss(ad.sigmoid(z), labels), {"z": z})
        assert rep.max_rel_error < self.TOL

    def test_elu_both_branches(self):
        z = Tensor(np.array([-2.0, -0.3, 0.4, 1.7]), requires_grad=True)
        assert ad.grad_check(lambda: (ad.elu(z) ** 3).sum(), {"z": z}).max_rel_error < self.TOL


# shape chain ------------------------------------------------------------------

@pytest.mark.criterion("shape chain")
class TestShapeChain:
    def test_full_size_input(self):
        chain = derive_conv_shapes((64, 64, 36), trunk_specs())
        assert chain.layer_dims == ((31, 31, 17), (15, 15, 8))
        assert chain.flatten_size == 115200

    def test_two_q_values(self):
        net = DqnNetwork((64, 64, 36), seed=0)
        q = dqn_forward(net, np.zeros((64, 64, 36), np.float32), 0)
        assert len(q) == 2 and all(math.isfinite(v) for v in q)


# tabular oracle ---------------------------------------------------------------

@pytest.mark.criterion("tabular TD(0) oracle")
def test_tabular_td0():
    t0 = time.perf_counter()
    q, sweeps = tabular_q_learning(sweeps=10_000, tol=1e-12)
    elapsed = time.perf_counter() - t0
    for k in range(5):
        q_star = sum(0.99 ** i for i in range(5 - k))
        assert abs(q[k, :, 1].max() - q_star) < 1e-3
    assert abs(q[0, 0, 1] - 4.90099501) < 1e-3
    assert sweeps <= 10_000 and elapsed < 10


# MDP and buffer ---------------------------------------------------------------

@pytest.mark.criterion("MDP/buffer invariants")
class TestInvariants:
    def test_reward_identity(self):
        rng = np.random.default_rng(0)
        for label, action in rng.integers(0, 2, size=(100_000, 2)):
            r, pc = env_step(int(label), int(action))
            assert r == 2 * pc - 1

    def test_buffer_fifo_cap(self):
        buf = ReplayBuffer(15000)
        items = [Transition(0, i, 0, -1, 0) for i in range(15001 + 499)]
        for it in items:
            buf.push(it)
        assert len(buf) == 15000
        assert [t.image_index for t in buf] == list(range(500, 15500))

    def test_epsilon(self):
        s = EpsilonSchedule()
        seq = [epsilon_value(s, k) for k in range(0, 10_000, 7)]
        assert all(a >= b for a, b in zip(seq, seq[1:]))
        assert min(seq) == 1e-4 and seq[0] == 0.7


# end-to-end RL ----------------------------------------------------------------

@pytest.mark.criterion("end-to-end RL run")
class TestRlRun:
    def test_final_accuracy(self, rl_runs):
        first, _, _ = rl_runs
        acc = first.final_eval.accuracy
        print(f"final RL test accuracy {acc:.4f}")
        assert acc >= RL_FLOOR

    def test_metrics_rows(self, rl_runs):
        first, _, _ = rl_runs
        assert [r.episode for r in first.evaluation_rows()] == list(range(10, 141, 10)) + [145]

    def test_deterministic(self, rl_runs):
        first, second, _ = rl_runs
        assert metrics_csv(first.metrics).encode() == metrics_csv(second.metrics).encode()

    def test_wall_clock(self, rl_runs):
        assert rl_runs[2] < 30 * 60


# SDL baseline -----------------------------------------------------------------

@pytest.mark.criterion("SDL baseline run")
def test_sdl_run(desk):
    _, train, test = desk
    res = train_sdl(train, SdlTrainConfig(epochs=100))
    assert len(res.history) == 100
    test_acc = predict_sdl(res.net, test).accuracy
    print(f"SDL train accuracy {res.history[-1].train_accuracy:.4f}, test accuracy {test_acc:.4f}")
    assert res.history[-1].train_accuracy >= SDL_TRAIN_FLOOR
    assert 0.0 <= test_acc <= 1.0


# pairs ------------------------------------------------------------------------

@pytest.mark.criterion("pair generation")
def test_pairs():
    pairs = generate_pairs(synthetic_corpus(45))
    assert len(pairs) == 90 * 89 // 2 == 4005
    assert sum(p.same_class for p in pairs) == 2 * (45 * 44 // 2) == 1980
    assert sum(not p.same_class for p in pairs) == 45 * 45 == 2025


# NLP pipeline -----------------------------------------------------------------

@pytest.mark.criterion("NLP pipeline")
class TestNlp:
    def test_heldout(self):
        corpus = synthetic_corpus(45, seed=0)
        enc = HashingEncoder(seed=0)
        train_encoder(enc, corpus, generate_pairs(corpus), epochs=20)
        held = synthetic_corpus(10, seed=99, prefix="held")
        assert len(held) == 20
        preds = label_manifest(enc, corpus, [{"id": h.id, "impression": h.text} for h in held])
        assert sum(preds[h.id].label == h.label for h in held) == 20

    def test_label_map_feeds_train_rl(self, tmp_path):
        cfg = tmp_path / "small.toml"
        cfg.write_text("[data]\ntrain_normal = 3\ntrain_tumor = 3\ntest_normal = 2\ntest_tumor = 2\n")
        data = tmp_path / "data"
        assert main(["gen-data", "--out", str(data), "--config", str(cfg)]) == 0
        assert main(["labels-train", "--reports", str(data / "corpus.jsonl"), "--out", str(tmp_path / "enc")]) == 0
        assert main(["labels-predict", "--encoder", str(tmp_path / "enc" / "encoder.ckpt"),
                     "--reports", str(data / "reports.jsonl"), "--manifest", str(data / "manifest.jsonl"),
                     "--out", str(tmp_path / "labels.jsonl")]) == 0
        labels = read_label_map(tmp_path / "labels.jsonl")
        assert labels == {e.id: e.label for e in read_manifest(data / "manifest.jsonl")}
        assert main(["train-rl", "--manifest", str(data / "manifest.jsonl"), "--labels",
                     str(tmp_path / "labels.jsonl"), "--out", str(tmp_path / "rl"), "--episodes", "6",
                     "--batch", "4"]) == 0
        assert (tmp_path / "rl" / "predictions.jsonl").exists()


# McNemar ----------------------------------------------------------------------

def _popcounts(n):
    seqs = np.arange(2 ** n, dtype=np.uint32)
    ones = np.zeros_like(seqs)
    for bit in range(n):
        ones += (seqs >> bit) & 1
    return ones


def _enumerated_p(b, c, ones):
    """Share of all 2^n sign sequences at least as unbalanced as (b, c)."""
    n = b + c
    if n == 0:
        return 1.0
    lo, hi = min(b, c), max(b, c)
    return min(1.0, int(np.sum((ones <= lo) | (ones >= hi))) / 2 ** n)


@pytest.mark.criterion("McNemar oracle")
class TestMcNemar:
    def test_enumeration(self):
        for n in range(21):
            ones = _popcounts(n)
            for b in range(n + 1):
                assert mcnemar(b, n - b).p_value == pytest.approx(_enumerated_p(b, n - b, ones), rel=1e-12)

    def test_reference_values(self):
        assert mcnemar(10, 0).p_value == 0.001953125
        assert mcnemar(10, 0, "chi2_corrected").statistic == pytest.approx(8.1)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for b, c in rng.integers(0, 100, size=(1000, 2)):
            for method in ("exact", "chi2_corrected"):
                assert mcnemar(int(b), int(c), method).p_value == mcnemar(int(c), int(b), method).p_value


# persistence ------------------------------------------------------------------

@pytest.mark.criterion("persistence")
class TestPersistence:
    def test_volume_roundtrip(self, tmp_path):
        v = generate_phantom(PRESETS["desk"], 1, "p0").volume
        write_volume(tmp_path / "v.volb", v)
        assert read_volume(tmp_path / "v.volb").voxels.tobytes() == v.voxels.tobytes()

    def test_checkpoint_roundtrip(self, tmp_path):
        for cls in (DqnNetwork, SdlNetwork):
            net = cls((32, 32, 16), seed=4)
            save_checkpoint(tmp_path / "n.ckpt", net)
            back = load_checkpoint(tmp_path / "n.ckpt", cls((32, 32, 16), seed=5))
            assert all(net.params[k].data.tobytes() == back.params[k].data.tobytes() for k in net.params)

    def test_corrupt_volume(self):
        raw = volume_to_bytes(generate_phantom(PRESETS["desk"], 0, "p1").volume)
        with pytest.raises(FormatError) as err:
            volume_from_bytes(b"VOLX" + raw[4:])
        assert err.value.offset == 0
        with pytest.raises(FormatError, match="truncated"):
            volume_from_bytes(raw[:-1])

    def test_corrupt_checkpoint(self):
        raw = checkpoint_bytes(SdlNetwork((12, 12, 8)).state_dict(), b"SDLW")
        with pytest.raises(FormatError) as err:
            parse_checkpoint(b"DQNW" + raw[4:], b"SDLW")
        assert err.value.offset == 0
        with pytest.raises(FormatError, match="truncated"):
            parse_checkpoint(raw[:-4], b"SDLW")
        bad_version = raw[:4] + struct.pack("<I", 9) + raw[8:]
        with pytest.raises(FormatError, match="version"):
            parse_checkpoint(bad_version, b"SDLW")
