import math

import numpy as np
import pytest

from conftest import wire_linear_net
from refcycle.autodiff import Var
from refcycle.geometry import BBox, CoordFormat
from refcycle.policy import (
    EOS,
    ROLE_DESCRIBE,
    ROLE_LOCATE,
    ArchDescriptor,
    CaptionSequence,
    DecodingState,
    PolicyNetwork,
    SequenceModel,
    backward,
    describer_conditioning,
)
from refcycle.rl import (
    PPOConfig,
    RewardVector,
    Trajectory,
    TrajectoryBatch,
    compute_advantages,
    compute_baseline,
    compute_rewards,
    locator_tokens_to_box,
    ppo_loss,
    ppo_surrogate,
    reconstruction_iou,
)


def seq_with(logp_live, logp_ref=None, logp_old=None, tokens=None):
    logp_live = np.asarray(logp_live, dtype=np.float64)
    n = logp_live.shape[0]
    return CaptionSequence(
        tokens=tuple(tokens) if tokens is not None else tuple([5] * (n - 1) + [EOS]),
        logp_live=logp_live,
        logp_old=None if logp_old is None else np.asarray(logp_old, dtype=np.float64),
        logp_ref=None if logp_ref is None else np.asarray(logp_ref, dtype=np.float64),
    )


class TestPPOConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PPOConfig(clip_ratio=0.0)
        with pytest.raises(ValueError):
            PPOConfig(clip_ratio=1.0)
        with pytest.raises(ValueError):
            PPOConfig(kl_coef=-0.1)
        with pytest.raises(ValueError):
            PPOConfig(ppo_epochs=0)
        assert PPOConfig.from_dict(PPOConfig().to_dict()) == PPOConfig()


class TestRewards:
    def test_kl_vanishes_when_live_equals_ref(self):
        lp = np.array([-1.0, -2.0, -0.5])
        rv = compute_rewards(seq_with(lp, logp_ref=lp.copy()), 0.8, kl_coef=0.01)
        np.testing.assert_array_equal(rv.per_token, [0.0, 0.0, 0.8])

    def test_kl_entry_value(self):
        rv = compute_rewards(
            seq_with([-1.0, -0.3], logp_ref=[-1.5, -0.3]), 0.0, kl_coef=0.01
        )
        assert rv.per_token[0] == pytest.approx(-0.005, abs=1e-15)

    def test_beta_zero_terminal_only(self):
        rv = compute_rewards(
            seq_with([-1.2, -3.4, -0.1, -2.2], logp_ref=[-0.4, -1.1, -7.0, -0.9]),
            0.3,
            kl_coef=0.0,
        )
        assert np.all(rv.per_token[:-1] == 0.0)
        assert rv.per_token[-1] == 0.3

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            compute_rewards(seq_with([-1.0, -2.0], logp_ref=[-1.0]), 0.5, 0.01)

    def test_missing_ref_raises(self):
        with pytest.raises(ValueError):
            compute_rewards(seq_with([-1.0]), 0.5, 0.01)


class TestAdvantages:
    def test_suffix_sums_minus_baseline(self):
        rv = RewardVector(np.array([0.0, 0.0, 0.8]), 0.8, 0.5)
        np.testing.assert_allclose(compute_advantages(rv), [0.3, 0.3, 0.3], atol=1e-15)

    def test_zero_when_sample_matches_baseline(self):
        rv = RewardVector(np.array([0.0, 0.0, 0.8]), 0.8, 0.8)
        np.testing.assert_allclose(compute_advantages(rv), [0.0, 0.0, 0.0], atol=1e-15)

    def test_kl_perturbed_first_entry(self):
        rv = RewardVector(np.array([-0.005, 0.0, 0.8]), 0.8, 0.5)
        np.testing.assert_allclose(compute_advantages(rv), [0.295, 0.3, 0.3], atol=1e-15)

    def test_constant_when_terminal_only(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            r = np.zeros(n)
            r[-1] = rng.random()
            base = rng.random()
            adv = compute_advantages(RewardVector(r, r[-1], base))
            np.testing.assert_allclose(adv, r[-1] - base, atol=1e-15)

    def test_baseline_preserves_return_ordering(self):
        rng = np.random.default_rng(1)
        totals = rng.random(10)
        base = rng.random()
        first_advantages = totals - base
        assert np.argmax(totals) == np.argmax(first_advantages)


@pytest.fixture()
def toy_fmt(tiny_vocab):
    return CoordFormat(range_max=tiny_vocab.coord_range)


@pytest.fixture()
def model(tiny_encoder):
    return SequenceModel(tiny_encoder)


def locator_emitting(encoder, coords):
    vocab = encoder.vocab
    return wire_linear_net(encoder, {t: vocab.coord_token(c) for t, c in enumerate(coords)})


class TestReconstruction:
    def test_exact_box_gives_unit_iou(self, tiny_encoder, tiny_units, model, toy_fmt):
        target = BBox(4 / 16, 8 / 16, 12 / 16, 14 / 16)
        locator = locator_emitting(tiny_encoder, [4, 8, 12, 14])
        value, box = reconstruction_iou(
            target, (5, EOS), locator, tiny_units[0].features, model, toy_fmt
        )
        assert value == 1.0
        assert box == target

    def test_non_monotone_output_is_parse_failure(self, tiny_encoder, tiny_units, model, toy_fmt):
        locator = locator_emitting(tiny_encoder, [5, 7, 2, 9])  # x2 < x1
        value, box = reconstruction_iou(
            BBox(0.1, 0.1, 0.4, 0.4), (5, EOS), locator, tiny_units[0].features, model, toy_fmt
        )
        assert value == 0.0 and box is None

    def test_disjoint_box_scores_zero_but_parses(self, tiny_encoder, tiny_units, model, toy_fmt):
        locator = locator_emitting(tiny_encoder, [12, 12, 16, 16])
        value, box = reconstruction_iou(
            BBox(0.0, 0.0, 0.25, 0.25), (5, EOS), locator, tiny_units[0].features, model, toy_fmt
        )
        assert value == 0.0 and box is not None

    def test_token_pattern_guards(self, tiny_vocab, toy_fmt):
        ct = tiny_vocab.coord_token
        ok = locator_tokens_to_box((ct(1), ct(2), ct(3), ct(4), EOS), tiny_vocab, toy_fmt)
        assert ok is not None and ok.as_tuple() == (1 / 16, 2 / 16, 3 / 16, 4 / 16)
        assert locator_tokens_to_box((ct(1), ct(2), ct(3), ct(4)), tiny_vocab, toy_fmt) is None
        assert locator_tokens_to_box((5, ct(2), ct(3), ct(4), EOS), tiny_vocab, toy_fmt) is None
        assert locator_tokens_to_box((ct(4), ct(2), ct(3), ct(4), EOS, EOS), tiny_vocab, toy_fmt) is None


class TestBaseline:
    def test_perfect_roundtrip_baseline_one(self, tiny_encoder, tiny_units, model, toy_fmt):
        target = BBox(4 / 16, 8 / 16, 12 / 16, 14 / 16)
        vocab = tiny_encoder.vocab
        ref = wire_linear_net(tiny_encoder, {0: vocab.category_token(0), 1: EOS})
        locator = locator_emitting(tiny_encoder, [4, 8, 12, 14])
        state = DecodingState(
            tiny_units[0].features, ROLE_DESCRIBE, describer_conditioning(target, vocab)
        )
        assert compute_baseline(state, ref, locator, target, model, toy_fmt) == 1.0

    def test_unparseable_baseline_zero(self, tiny_encoder, tiny_units, model, toy_fmt):
        vocab = tiny_encoder.vocab
        ref = wire_linear_net(tiny_encoder, {0: vocab.category_token(0), 1: EOS})
        locator = locator_emitting(tiny_encoder, [9, 7, 2, 9])
        state = DecodingState(
            tiny_units[0].features, ROLE_DESCRIBE, describer_conditioning(BBox(0, 0, 0.5, 0.5), vocab)
        )
        assert compute_baseline(state, ref, locator, BBox(0, 0, 0.5, 0.5), model, toy_fmt) == 0.0

    def test_deterministic(self, tiny_net, tiny_encoder, tiny_units, model, toy_fmt):
        u = tiny_units[1]
        state = DecodingState(
            u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, tiny_encoder.vocab)
        )
        a = compute_baseline(state, tiny_net, tiny_net, u.triplet.target, model, toy_fmt)
        b = compute_baseline(state, tiny_net, tiny_net, u.triplet.target, model, toy_fmt)
        assert a == b


def make_trajectory(state, seq, advantages):
    rv = RewardVector(np.zeros(seq.length), 0.0, 0.0)
    return Trajectory(state, seq, rv, np.asarray(advantages, dtype=np.float64), True, None)


class TestPPOLoss:
    def sample_trajectories(self, net, model, units, advantage_values, seed=3):
        vocab = model.encoder.vocab
        states = [
            DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
            for u in units
        ]
        seqs = model.sample_batch(net, states, seed=seed)
        olds = model.score_batch(net, states, [s.tokens for s in seqs])
        trajs = []
        k = 0
        for st, sq, old in zip(states, seqs, olds):
            adv = [advantage_values[(k + i) % len(advantage_values)] for i in range(sq.length)]
            k += sq.length
            trajs.append(make_trajectory(st, sq.with_scores(logp_old=old), adv))
        return trajs

    def test_ratio_one_gives_negative_mean_advantage(self, tiny_net, model, tiny_units):
        # dyadic advantage values keep every partial sum exact, so equality is exact
        trajs = self.sample_trajectories(tiny_net, model, tiny_units[:4], [0.25, -0.5, 0.125, 0.75])
        expr = ppo_loss(tiny_net, model, trajs, PPOConfig())
        all_adv = np.concatenate([t.advantages for t in trajs])
        assert expr.value == -np.mean(all_adv)

    def test_clipped_high_ratio_positive_advantage(self, tiny_net, model, tiny_units):
        u = tiny_units[0]
        vocab = model.encoder.vocab
        state = DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        now = model.score_batch(tiny_net, [state], [(EOS,)])[0]
        seq = CaptionSequence((EOS,), now, logp_old=now - math.log(1.5))
        traj = make_trajectory(state, seq, [0.3])
        expr = ppo_loss(tiny_net, model, [traj], PPOConfig(clip_ratio=0.2))
        assert expr.value == pytest.approx(-0.36, abs=1e-12)
        g = backward(tiny_net, expr)
        assert np.all(g == 0.0)

    def test_clipped_low_ratio_negative_advantage(self, tiny_net, model, tiny_units):
        u = tiny_units[0]
        vocab = model.encoder.vocab
        state = DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        now = model.score_batch(tiny_net, [state], [(EOS,)])[0]
        seq = CaptionSequence((EOS,), now, logp_old=now - math.log(0.5))
        traj = make_trajectory(state, seq, [-0.3])
        expr = ppo_loss(tiny_net, model, [traj], PPOConfig(clip_ratio=0.2))
        assert expr.value == pytest.approx(0.24, abs=1e-12)
        assert np.all(backward(tiny_net, expr) == 0.0)

    def test_unclipped_branch_has_gradient(self, tiny_net, model, tiny_units):
        trajs = self.sample_trajectories(tiny_net, model, tiny_units[:2], [0.5])
        expr = ppo_loss(tiny_net, model, trajs, PPOConfig())
        assert np.any(backward(tiny_net, expr) != 0.0)

    def test_pessimism_bound(self, tiny_net, model, tiny_units):
        rng = np.random.default_rng(5)
        vocab = model.encoder.vocab
        states = [
            DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
            for u in tiny_units[:6]
        ]
        seqs = model.sample_batch(tiny_net, states, seed=9)
        trajs = []
        for st, sq in zip(states, seqs):
            old = sq.logp_live + rng.normal(scale=0.3, size=sq.length)
            adv = rng.normal(size=sq.length)
            trajs.append(make_trajectory(st, sq.with_scores(logp_old=old), adv))
        cfg = PPOConfig()
        expr = ppo_loss(tiny_net, model, trajs, cfg)
        # recompute both branches: surrogate <= r * A tokenwise
        total_unclipped = []
        total_surr = []
        for t in trajs:
            now = model.score_batch(tiny_net, [t.state], [t.seq.tokens])[0]
            r = np.exp(now - t.seq.logp_old)
            unclipped = r * t.advantages
            clipped = np.clip(r, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio) * t.advantages
            total_unclipped.append(unclipped)
            total_surr.append(np.minimum(unclipped, clipped))
        assert np.all(np.concatenate(total_surr) <= np.concatenate(total_unclipped) + 1e-15)
        assert expr.value == pytest.approx(-np.mean(np.concatenate(total_surr)), abs=1e-12)

    def test_empty_batch_rejected(self, tiny_net, model):
        with pytest.raises(ValueError):
            ppo_loss(tiny_net, model, [], PPOConfig())

    def test_missing_old_rejected(self, tiny_net, model, tiny_units):
        u = tiny_units[0]
        vocab = model.encoder.vocab
        state = DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        seq = CaptionSequence((EOS,), np.array([-0.1]))
        with pytest.raises(ValueError):
            ppo_loss(tiny_net, model, [make_trajectory(state, seq, [0.1])], PPOConfig())

    def test_degenerate_old_logps_raise(self, tiny_net, model, tiny_units):
        u = tiny_units[0]
        vocab = model.encoder.vocab
        state = DecodingState(u.features, ROLE_DESCRIBE, describer_conditioning(u.triplet.target, vocab))
        now = model.score_batch(tiny_net, [state], [(EOS,)])[0]
        seq = CaptionSequence((EOS,), now, logp_old=now - 1e6)
        with pytest.raises(FloatingPointError):
            ppo_loss(tiny_net, model, [make_trajectory(state, seq, [0.1])], PPOConfig())


class TestBruteForceOracle:
    def test_two_token_vocab_straight_line_recomputation(self):
        # independent recomputation of the whole surrogate on a 2-token,
        # 2-step instance, using only math.* scalar arithmetic
        rng = np.random.default_rng(21)
        arch = ArchDescriptor(input_dim=3, hidden=(4,), vocab_size=2)
        net = PolicyNetwork.initialize(arch, seed=2)
        xs = rng.normal(size=(2, 3))  # one state row per step
        tokens = [0, 1]
        old = np.array([-0.9, -0.4])
        adv = np.array([0.7, -0.6])
        cfg = PPOConfig(clip_ratio=0.2)

        theta = net.params_var()
        per_step = [
            net.forward_var(theta, xs[t : t + 1]).log_softmax().gather([tokens[t]])
            for t in range(2)
        ]
        from refcycle.autodiff import concat

        flat = concat(per_step)
        loss = ppo_surrogate(flat, old, adv, np.array([True, True]), cfg)

        # straight-line script
        w1 = net.params[: 3 * 4].reshape(3, 4)
        b1 = net.params[12:16]
        w2 = net.params[16 : 16 + 8].reshape(4, 2)
        b2 = net.params[24:26]
        expected_terms = []
        for t in range(2):
            h = [math.tanh(sum(xs[t][i] * w1[i][j] for i in range(3)) + b1[j]) for j in range(4)]
            logits = [sum(h[j] * w2[j][k] for j in range(4)) + b2[k] for k in range(2)]
            z = max(logits)
            denom = sum(math.exp(v - z) for v in logits)
            logp = logits[tokens[t]] - z - math.log(denom)
            r = math.exp(logp - old[t])
            unclipped = r * adv[t]
            clipped = min(max(r, 0.8), 1.2) * adv[t]
            expected_terms.append(min(unclipped, clipped))
        expected = -(expected_terms[0] + expected_terms[1]) / 2
        assert abs(float(loss.data) - expected) <= 1e-12


def test_trajectory_batch_stats(tiny_units):
    state = DecodingState(tiny_units[0].features, ROLE_DESCRIBE, (3,))
    seq_ok = CaptionSequence((5, EOS), np.array([-0.2, -0.1]))
    seq_bad = CaptionSequence((5, EOS), np.array([-0.2, -0.1]))
    t1 = Trajectory(state, seq_ok, RewardVector(np.array([0.0, 0.6]), 0.6, 0.1), np.array([0.5, 0.5]), True, BBox(0, 0, 1, 1))
    t2 = Trajectory(state, seq_bad, RewardVector(np.array([0.0, 0.0]), 0.0, 0.1), np.array([-0.1, -0.1]), False, None)
    batch = TrajectoryBatch([t1, t2])
    assert batch.mean_reward == pytest.approx(0.3)
    assert batch.parse_failure_rate == 0.5
    assert batch.mean_abs_advantage == pytest.approx(0.3)


def test_trajectory_validates_lengths(tiny_units):
    state = DecodingState(tiny_units[0].features, ROLE_DESCRIBE, (3,))
    seq = CaptionSequence((5, EOS), np.array([-0.2, -0.1]))
    with pytest.raises(ValueError):
        Trajectory(state, seq, RewardVector(np.zeros(2), 0.0, 0.0), np.array([0.1]), True, None)
