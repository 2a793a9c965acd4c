use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_grad_norm, compute_advantages, kl_estimate, tape_rollout_objective, AdamW, GrpoError,
    GrpoSettings, Result,
};
use crate::guidance::{GuidanceSettings, RatioMode};
use crate::policy::{
    sample_sequence, sequence_logprob, tape_sequence_logprob, Condition, ParamVars,
    PolicyParameters, Rollout, SamplerSettings,
};
use crate::rewards::{RewardBreakdown, RewardModel};
use crate::tensor::Tape;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream for one rollout. Each coordinate is folded
/// through a mixing step so distinct `(step, condition, member)` triples
/// never share a stream the way a plain XOR of small integers would.
pub fn rollout_seed(seed: u64, step: u64, condition_index: usize, member: usize) -> u64 {
    let mut h = splitmix64(seed);
    for x in [step, condition_index as u64, member as u64] {
        h = splitmix64(h ^ x);
    }
    h
}

/// Summary of one optimization step; aggregation order is fixed so
/// identical inputs give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub r_c_mean: f64,
    pub r_i_mean: f64,
    pub r_r_mean: f64,
    pub condition_score_mean: f64,
    pub objective: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    /// Mean negative sampled log-probability per token.
    pub entropy: f64,
    pub grad_norm: f64,
    pub degenerate_groups: usize,
    pub judge_incidents: u64,
}

/// Rollouts of one condition with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub condition: Condition,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GrpoTrainer {
    pub settings: GrpoSettings,
    pub sampler: SamplerSettings,
    pub guidance: GuidanceSettings,
    pub policy: PolicyParameters,
    /// Frozen copy of the policy at RL start.
    pub reference: PolicyParameters,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
}

impl GrpoTrainer {
    pub fn new(
        settings: GrpoSettings,
        sampler: SamplerSettings,
        guidance: GuidanceSettings,
        policy: PolicyParameters,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        guidance.validate()?;
        sampler.validate()?;
        if !sampler.is_unfiltered() {
            return Err(GrpoError::Configuration(
                "RL sampling needs top_k = 0, top_p = 1 and a positive temperature so that \
                 log-probabilities can be recomputed exactly"
                    .into(),
            ));
        }
        let optimizer = AdamW::new(settings.adamw(), &policy.weights);
        Ok(Self {
            reference: policy.clone(),
            settings,
            sampler,
            guidance,
            policy,
            optimizer,
            step: 0,
            seed,
        })
    }

    fn ratio_guidance(&self) -> Option<f64> {
        match self.guidance.ratio_mode {
            RatioMode::Guided => self.guidance.train_scale(),
            RatioMode::Conditional => None,
        }
    }

    /// Generation and evaluation phases: `G` rollouts per condition from the
    /// current policy, scored and normalized within each group.
    pub fn collect(&self, conditions: &[Condition], rewards: &mut dyn RewardModel) -> Result<Vec<RolloutGroup>> {
        let g = self.settings.group_size;
        let scale = self.guidance.train_scale();
        let mut groups = Vec::with_capacity(conditions.len());
        for (ci, condition) in conditions.iter().enumerate() {
            let mut rollouts = Vec::with_capacity(g);
            for member in 0..g {
                let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(self.seed, self.step, ci, member));
                rollouts.push(sample_sequence(&self.policy, condition, &self.sampler, scale, &mut rng)?);
            }
            let tokens: Vec<_> = rollouts.iter().map(|r| r.tokens.clone()).collect();
            let scored = rewards.score_group(condition, &tokens)?;
            if scored.len() != g {
                return Err(GrpoError::Contract(format!(
                    "reward model returned {} scores for a group of {g}",
                    scored.len()
                )));
            }
            let finals: Vec<f64> = scored.iter().map(|b| b.r_final).collect();
            let advantages = compute_advantages(&finals)?;
            groups.push(RolloutGroup {
                condition: condition.clone(),
                rollouts,
                rewards: scored,
                advantages,
            });
        }
        Ok(groups)
    }

    /// One full step: generation, evaluation, then `inner_epochs` gradient
    /// passes against a snapshot of the pre-step policy.
    pub fn train_step(&mut self, conditions: &[Condition], rewards: &mut dyn RewardModel) -> Result<StepReport> {
        if conditions.is_empty() {
            return Err(GrpoError::Contract("training step without conditions".into()));
        }
        let groups = self.collect(conditions, rewards)?;
        self.optimize(groups, rewards.incidents())
    }

    /// Optimization phase over already collected groups.
    pub fn optimize(&mut self, mut groups: Vec<RolloutGroup>, judge_incidents: u64) -> Result<StepReport> {
        let temperature = self.sampler.temperature;
        let ratio_guidance = self.ratio_guidance();
        let sampling_matches_ratio = ratio_guidance == self.guidance.train_scale();
        for group in &mut groups {
            for r in &mut group.rollouts {
                if !sampling_matches_ratio {
                    r.logprob_sampling =
                        sequence_logprob(&self.policy, &r.condition, &r.tokens, ratio_guidance, temperature)?;
                }
                r.logprob_ref =
                    sequence_logprob(&self.reference, &r.condition, &r.tokens, ratio_guidance, temperature)?;
            }
        }
        let n_groups = groups.len();
        let (eps, beta) = (self.settings.clip_epsilon, self.settings.kl_beta);

        let mut first_objective = f64::NAN;
        let mut first_kl = f64::NAN;
        let mut clip_fraction = 0.0;
        let mut grad_norm = 0.0;
        for epoch in 0..self.settings.inner_epochs {
            let mut tape = Tape::new();
            let w = ParamVars::register(&mut tape, &self.policy, true);
            let mut total = None;
            let (mut kl_sum, mut tokens, mut clipped) = (0.0, 0usize, 0usize);
            for group in &mut groups {
                let weight = 1.0 / (group.rollouts.len() * n_groups) as f64;
                for (r, &adv) in group.rollouts.iter_mut().zip(&group.advantages) {
                    let cur = tape_sequence_logprob(
                        &mut tape,
                        &self.policy.config,
                        &w,
                        &r.condition,
                        &r.tokens.tokens,
                        ratio_guidance,
                        temperature,
                    )?;
                    r.logprob_current = tape.value(cur).data().to_vec();
                    let term = tape_rollout_objective(
                        &mut tape,
                        cur,
                        &r.logprob_sampling,
                        &r.logprob_ref,
                        adv,
                        eps,
                        beta,
                        weight,
                    )?;
                    total = Some(match total {
                        None => term,
                        Some(t) => tape.add(t, term)?,
                    });
                    kl_sum += kl_estimate(&r.logprob_ref, &r.logprob_current)?.iter().sum::<f64>();
                    tokens += r.logprob_current.len();
                    clipped += r
                        .logprob_current
                        .iter()
                        .zip(&r.logprob_sampling)
                        .filter(|(c, o)| ((*c - *o).exp() - 1.0).abs() > eps)
                        .count();
                }
            }
            let total = total.ok_or_else(|| GrpoError::Contract("no rollouts to optimize".into()))?;
            let objective = tape.value(total).data()[0];
            if !objective.is_finite() {
                return Err(GrpoError::Numerical(format!(
                    "non-finite objective {objective} at step {}",
                    self.step
                )));
            }
            if epoch == 0 {
                first_objective = objective;
                first_kl = kl_sum / tokens as f64;
            }
            clip_fraction = clipped as f64 / tokens as f64;
            let loss = tape.scale(total, -1.0);
            tape.backward(loss)?;
            let mut grads = w.gradients(&tape);
            grad_norm = clip_grad_norm(&mut grads, self.settings.grad_clip_norm);
            if !grad_norm.is_finite() {
                return Err(GrpoError::Numerical(format!(
                    "non-finite gradient norm at step {}",
                    self.step
                )));
            }
            self.optimizer.step(&mut self.policy.weights, &grads)?;
        }

        let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
        let n = all.len() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|b| f(b)).sum::<f64>() / n;
        let reward_mean = mean(|b| b.r_final);
        let reward_std = (all.iter().map(|b| (b.r_final - reward_mean).powi(2)).sum::<f64>() / n).sqrt();
        let (lp_sum, lp_count) = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .fold((0.0, 0usize), |(s, c), r| (s + r.logprob_sampling.iter().sum::<f64>(), c + r.logprob_sampling.len()));
        let report = StepReport {
            step: self.step,
            reward_mean,
            reward_std,
            r_c_mean: mean(|b| b.r_c),
            r_i_mean: mean(|b| b.r_i),
            r_r_mean: mean(|b| b.r_r),
            condition_score_mean: mean(|b| b.raw_c),
            objective: first_objective,
            kl_mean: first_kl,
            clip_fraction,
            entropy: -lp_sum / lp_count as f64,
            grad_norm,
            degenerate_groups: groups
                .iter()
                .filter(|g| g.advantages.iter().all(|&a| a == 0.0))
                .count(),
            judge_incidents,
        };
        self.step += 1;
        Ok(report)
    }
}
