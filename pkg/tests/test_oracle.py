import math

import numpy as np
import pytest

from spolab.core import LogProbTable, PreferencePair
from spolab.datagen import InstanceSpec, gen_instance
from spolab.oracle import (
    OracleOverflowError,
    RewardModel,
    closed_form_objective,
    kl_divergence,
    log_partition,
    objective_dominance,
    optimal_policy,
    optimality_residuals,
    perturbed_policies,
    reward_identity_residual,
    rlhf_objective,
)
from spolab.policy import ReferencePolicy

SIGMOID_1 = 0.731058578630004879251159241822
# ln(0.5 e + 0.5) and KL((s, 1-s) || (1/2, 1/2)) with s = e/(1+e), both 30-digit mpmath
OBJECTIVE_2RESP = 0.62011450695827752463176337351
KL_2RESP = 0.110944071671727354619395868312

UNIFORM2 = ReferencePolicy.uniform(1, 2)


def test_constant_reward_gives_reference(rng):
    ref = LogProbTable.from_logits(rng.standard_normal((3, 5)))
    reward = RewardModel(np.repeat([[1.0], [-2.0], [0.3]], 5, axis=1))
    opt = optimal_policy(reward, ref, 0.7)
    np.testing.assert_allclose(opt.values, ref.values, atol=1e-14)


def test_two_response_optimum():
    opt = optimal_policy(RewardModel([[1.0, 0.0]]), UNIFORM2, 1.0)
    assert opt.probs()[0, 0] == pytest.approx(SIGMOID_1, rel=1e-14)


def test_large_beta_stays_at_reference():
    opt = optimal_policy(RewardModel([[1.0, 0.0]]), UNIFORM2, 1e6)
    np.testing.assert_allclose(opt.probs(), 0.5, atol=1e-6)


def test_overflow_suggests_larger_beta():
    with pytest.raises(OracleOverflowError, match="larger beta"):
        optimal_policy(RewardModel([[1.0, 0.0]]), UNIFORM2, 1e-3)


def test_objective_at_reference_is_mean_reward():
    reward = RewardModel([[1.0, 3.0], [0.0, -2.0]])
    ref = ReferencePolicy.uniform(2, 2)
    assert rlhf_objective(ref, reward, ref, 0.5) == pytest.approx(0.5, abs=1e-15)


def test_objective_closed_form_two_responses():
    reward = RewardModel([[1.0, 0.0]])
    opt = optimal_policy(reward, UNIFORM2, 1.0)
    assert rlhf_objective(opt, reward, UNIFORM2, 1.0) == pytest.approx(OBJECTIVE_2RESP, abs=1e-14)
    assert closed_form_objective(reward, UNIFORM2, 1.0) == pytest.approx(OBJECTIVE_2RESP, abs=1e-14)


def test_perturbations_score_lower():
    reward = RewardModel([[1.0, 0.0]])
    result = objective_dominance(reward, UNIFORM2, 1.0, 100, np.random.default_rng(1))
    assert result.holds and result.worst_gap > 0


def test_kl_examples(rng):
    p = LogProbTable(np.log([[SIGMOID_1, 1 - SIGMOID_1]]))
    per, mean = kl_divergence(p, UNIFORM2)
    assert mean == pytest.approx(KL_2RESP, rel=1e-12)
    t = LogProbTable.from_logits(rng.standard_normal((2, 3)))
    assert kl_divergence(t, t)[1] == 0.0


def test_kl_gibbs_inequality(rng):
    for _ in range(1000):
        p = LogProbTable.from_logits(3 * rng.standard_normal((2, 4)))
        q = LogProbTable.from_logits(3 * rng.standard_normal((2, 4)))
        per, mean = kl_divergence(p, q)
        assert (per >= 0).all()


def test_kl_infinite_when_q_saturated():
    with np.errstate(divide="ignore"):
        q = LogProbTable(np.log([[1.0, 0.0]]))
    per, mean = kl_divergence(UNIFORM2, q)
    assert per[0] == math.inf and mean == math.inf


def test_residual_examples():
    reward = RewardModel([[2.0, 0.5, -1.0]])
    ref = ReferencePolicy.uniform(1, 3)
    pairs = [PreferencePair(0, 0, 1), PreferencePair(0, 2, 1)]
    opt = optimal_policy(reward, ref, 0.4)
    np.testing.assert_allclose(optimality_residuals(opt, ref, reward, 0.4, pairs), 0.0, atol=1e-10)
    at_ref = optimality_residuals(ref, ref, reward, 0.4, pairs)
    np.testing.assert_allclose(at_ref, [-(1.5 / 0.4), -(-1.5 / 0.4)], rtol=1e-14)
    np.testing.assert_allclose(optimality_residuals(ref, ref, reward, 0.8, pairs), at_ref / 2, rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("beta", [0.3, 1.0, 4.0])
def test_oracle_identities(seed, beta):
    inst = gen_instance(InstanceSpec(4, 8, 1.0, seed))
    opt = optimal_policy(inst.reward, inst.reference, beta)
    assert reward_identity_residual(opt, inst.reference, inst.reward, beta) < 1e-10
    # the implied constant is -beta ln Z(x) for each prompt
    implied = beta * (opt.values - inst.reference.values) - inst.reward.rewards
    np.testing.assert_allclose(implied[:, 0], -beta * log_partition(inst.reward, inst.reference, beta), atol=1e-10)
    assert abs(
        rlhf_objective(opt, inst.reward, inst.reference, beta)
        - closed_form_objective(inst.reward, inst.reference, beta)
    ) < 1e-10
    result = objective_dominance(inst.reward, inst.reference, beta, 1000, np.random.default_rng(seed))
    assert result.holds


def test_perturbed_policies_are_normalized(rng):
    opt = LogProbTable.uniform(2, 3)
    for pol in perturbed_policies(opt, 20, rng):
        np.testing.assert_allclose(pol.probs().sum(axis=1), 1.0, atol=1e-12)


def test_reward_csv_round_trip(tmp_path):
    reward = RewardModel([[0.1, -2.5], [3.0, 1e-17]])
    path = tmp_path / "r.csv"
    reward.to_csv(path)
    assert path.read_text().splitlines()[0] == "prompt_id,response_id,reward"
    assert np.array_equal(RewardModel.from_csv(path).rewards, reward.rewards)


def test_misaligned_tables_rejected():
    with pytest.raises(ValueError):
        optimal_policy(RewardModel([[1.0, 0.0, 2.0]]), UNIFORM2, 1.0)
