//! Training: MLE pretraining of the anchor policy, and the RL fine-tuning
//! loop (rollouts, reward scoring, GAE, normalized policy-gradient and value
//! losses, warmup schedules, Adam updates).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::mdp::{Episode, MdpLimits, TokenId, TokenSeq, Vocabulary};
use crate::metrics::{derive_seed, evaluate};
use crate::policy::{
    clone_policy_as_value_init, logprob_grad_into, sample_episode, value_grad_into, DecodeConfig,
    PolicyParams, ValueParams,
};
use crate::rewards::{combined_reward, Judge, RewardConfig};
use crate::synthtask::Example;
use crate::{Error, Result};

/// RL fine-tuning hyperparameters. Defaults are desk-scale; the reference
/// large-scale settings (20K steps, 5K delay, 2K warmup, LR 1e-5) scale down
/// by 10x with hotter learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub batch_size: usize,
    /// Rollout sampling temperature.
    pub temperature: f64,
    pub lr_warmup_steps: usize,
    /// Steps before the first policy update (value-only warmup phase).
    pub policy_update_delay: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub total_steps: usize,
    pub adv_norm_epsilon: f64,
    pub eval_interval: usize,
    /// Optional gradient-norm clip; disabled by default.
    pub grad_clip: Option<f64>,
    /// Parallel rollout workers; results are bit-identical for any value.
    pub jobs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            gae_lambda: 0.95,
            batch_size: 32,
            temperature: 1.0,
            lr_warmup_steps: 200,
            policy_update_delay: 500,
            policy_lr: 1e-3,
            value_lr: 1e-3,
            total_steps: 2000,
            adv_norm_epsilon: 1e-8,
            eval_interval: 100,
            grad_clip: None,
            jobs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must be in [0, 1]".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.policy_update_delay >= self.total_steps {
            return Err(Error::Config(
                "policy_update_delay must be < total_steps".to_string(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".to_string()));
        }
        if self.policy_lr <= 0.0 || self.value_lr <= 0.0 || self.adv_norm_epsilon <= 0.0 {
            return Err(Error::Config(
                "learning rates and adv_norm_epsilon must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// MLE pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many evaluations without val-loss improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            lr: 1e-2,
            batch_size: 32,
            max_epochs: 60,
            patience: 3,
            seed: 0,
        }
    }
}

/// Per-token advantages and value-regression targets for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GaeResult {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation with terminal value 0:
/// `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)`,
/// `A_t = sum_{t' >= t} (gamma lambda)^(t'-t) delta_t'`, `returns = A + V`.
pub fn compute_gae(episode: &Episode, gamma: f64, lambda: f64) -> Result<GaeResult> {
    let n = episode.len();
    if episode.rewards.len() != n || episode.values.len() != n {
        return Err(Error::Contract("episode field length mismatch".to_string()));
    }
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { episode.values[t + 1] } else { 0.0 };
        let delta = episode.rewards[t] + gamma * next_value - episode.values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages
        .iter()
        .zip(&episode.values)
        .map(|(&a, &v)| a + v)
        .collect();
    Ok(GaeResult {
        advantages,
        returns,
    })
}

/// Standardize a flattened batch of advantages: `(a - mean) / (std + eps)`
/// with the population standard deviation.
pub fn normalize_advantages(batch: &[f64], epsilon: f64) -> Vec<f64> {
    let n = batch.len() as f64;
    let mean = batch.iter().sum::<f64>() / n;
    let var = batch.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    batch.iter().map(|a| (a - mean) / denom).collect()
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Policy-gradient estimate: mean over batch tokens of
/// `A_t * grad log pi(a_t | s_t, x)`. Gradients stop at the advantage.
pub fn policy_loss_grad(
    episodes: &[Episode],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
) -> Result<Vec<f64>> {
    let n_tokens: usize = episodes.iter().map(Episode::len).sum();
    if n_tokens == 0 {
        return Err(Error::Contract("empty batch".to_string()));
    }
    let scale = 1.0 / n_tokens as f64;
    let mut grad = vec![0.0; params.net.theta.len()];
    for (ep, adv) in episodes.iter().zip(advantages) {
        for t in 0..ep.len() {
            if adv[t] == 0.0 {
                continue;
            }
            let prefix = TokenSeq::prefix(ep.actions[..t].to_vec(), u32::MAX)?;
            logprob_grad_into(
                params,
                &ep.context,
                &prefix,
                ep.actions[t],
                scale * adv[t],
                &mut grad,
            )?;
        }
    }
    Ok(grad)
}

/// Value loss `mean(A_t^2) / max(var(returns), eps)` and its gradient w.r.t.
/// the value parameters, treating the returns as constant targets.
pub fn value_loss_grad(
    episodes: &[Episode],
    gae: &[GaeResult],
    vparams: &ValueParams,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let n_tokens: usize = episodes.iter().map(Episode::len).sum();
    if n_tokens == 0 {
        return Err(Error::Contract("empty batch".to_string()));
    }
    let all_returns: Vec<f64> = gae.iter().flat_map(|g| g.returns.iter().copied()).collect();
    let denom = population_variance(&all_returns).max(epsilon);
    let mut loss = 0.0;
    let mut grad = vec![0.0; vparams.net.theta.len()];
    for (ep, g) in episodes.iter().zip(gae) {
        for t in 0..ep.len() {
            let prefix = TokenSeq::prefix(ep.actions[..t].to_vec(), u32::MAX)?;
            let mut v_grad = vec![0.0; vparams.net.theta.len()];
            let v = value_grad_into(vparams, &ep.context, &prefix, 1.0, &mut v_grad)?;
            let residual = v - g.returns[t];
            loss += residual * residual;
            let s = 2.0 * residual / (n_tokens as f64 * denom);
            for (gi, vi) in grad.iter_mut().zip(&v_grad) {
                *gi += s * vi;
            }
        }
    }
    loss /= n_tokens as f64 * denom;
    Ok((loss, grad))
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update. `maximize` flips to gradient ascent.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, maximize: bool) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let sign = if maximize { 1.0 } else { -1.0 };
        for i in 0..theta.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] += sign * lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

fn check_finite(xs: &[f64], what: &str, step: usize) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence(format!("non-finite {what} at step {step}")));
    }
    Ok(())
}

fn clip_grad(grad: &mut [f64], clip: Option<f64>) {
    if let Some(c) = clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            let s = c / norm;
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
    }
}

/// Teacher-forcing target: reference tokens with EOS appended, truncated at
/// the horizon.
fn mle_target(reference: &TokenSeq, eos: TokenId, limits: &MdpLimits) -> Vec<TokenId> {
    let mut target = reference.without_eos(eos).to_vec();
    if target.len() >= limits.horizon {
        target.truncate(limits.horizon);
    } else {
        target.push(eos);
    }
    target
}

/// Mean per-token cross-entropy (nats) of references given documents.
pub fn cross_entropy(
    params: &PolicyParams,
    examples: &[Example],
    vocab: &Vocabulary,
    limits: &MdpLimits,
) -> Result<f64> {
    let eos = vocab.eos_id();
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let context = ex.context(None, eos)?;
        let target = mle_target(&ex.reference, eos, limits);
        for t in 0..target.len() {
            let prefix = TokenSeq::prefix(target[..t].to_vec(), eos)?;
            total -= crate::policy::action_logprob(params, &context, &prefix, target[t])?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Supervised MLE pretraining with teacher forcing. Returns the best
/// checkpoint by validation cross-entropy; stops at `max_epochs` or when the
/// validation loss has not improved for `patience` evaluations.
pub fn mle_pretrain(
    init: PolicyParams,
    train: &[Example],
    val: &[Example],
    vocab: &Vocabulary,
    limits: &MdpLimits,
    cfg: &MleConfig,
) -> Result<PolicyParams> {
    if train.is_empty() {
        return Err(Error::Contract("mle_pretrain on an empty corpus".to_string()));
    }
    let eos = vocab.eos_id();
    let mut params = init;
    let mut adam = Adam::new(params.net.theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = params.clone();
    let mut best_ce = f64::INFINITY;
    let mut stale = 0usize;
    for _epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        // Fisher-Yates with the epoch RNG.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.net.theta.len()];
            let mut loss = 0.0;
            let mut n_tokens = 0usize;
            for &idx in chunk {
                let ex = &train[idx];
                let context = ex.context(None, eos)?;
                let target = mle_target(&ex.reference, eos, limits);
                n_tokens += target.len();
                for t in 0..target.len() {
                    let prefix = TokenSeq::prefix(target[..t].to_vec(), eos)?;
                    loss -= logprob_grad_into(
                        &params, &context, &prefix, target[t], 1.0, &mut grad,
                    )?;
                }
            }
            let scale = 1.0 / n_tokens as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite MLE loss".to_string()));
            }
            check_finite(&grad, "MLE gradient", 0)?;
            adam.step(&mut params.net.theta, &grad, cfg.lr, true);
        }
        let ce = if val.is_empty() {
            cross_entropy(&params, train, vocab, limits)?
        } else {
            cross_entropy(&params, val, vocab, limits)?
        };
        if !ce.is_finite() {
            return Err(Error::Divergence("non-finite validation loss".to_string()));
        }
        if ce < best_ce - 1e-6 {
            best_ce = ce;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// One row of the RL training log (written as CSV by the harness).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_nli_logprob: f64,
    pub mean_kl: f64,
    pub entailment_rate: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub coverage: f64,
    pub density: f64,
    pub mean_length: f64,
    pub value_loss: f64,
}

/// Periodic evaluation configuration for the RL loop.
pub struct EvalSpec<'a> {
    pub dataset: &'a [Example],
    pub decode: DecodeConfig,
    pub control: Option<TokenId>,
}

pub struct RlOutcome {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub log: Vec<LogRow>,
    /// Mean combined reward per episode at every step (trend diagnostics).
    pub step_mean_reward: Vec<f64>,
}

/// RL fine-tuning loop. Consumes documents only (no references); the value
/// network is cloned from the anchor and trained from step 0, the policy is
/// frozen for `policy_update_delay` steps.
#[allow(clippy::too_many_arguments)]
pub fn rl_finetune(
    anchor: &PolicyParams,
    contexts: &[TokenSeq],
    judge: &dyn Judge,
    reward_cfg: &RewardConfig,
    cfg: &TrainConfig,
    limits: &MdpLimits,
    vocab: &Vocabulary,
    eval: Option<EvalSpec<'_>>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    reward_cfg.validate()?;
    if contexts.is_empty() {
        return Err(Error::Contract("rl_finetune with no documents".to_string()));
    }
    let eos = vocab.eos_id();
    let mut policy = anchor.clone();
    let mut vparams = clone_policy_as_value_init(anchor);
    let mut policy_adam = Adam::new(policy.net.theta.len());
    let mut value_adam = Adam::new(vparams.net.theta.len());

    let pool = if cfg.jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let warmup = |step: usize| -> f64 {
        if cfg.lr_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.lr_warmup_steps as f64).min(1.0)
        }
    };

    let mut log = Vec::new();
    let mut step_mean_reward = Vec::with_capacity(cfg.total_steps);
    // Interval accumulators for the log.
    let mut acc_reward = 0.0;
    let mut acc_nli = 0.0;
    let mut acc_kl = 0.0;
    let mut acc_vloss = 0.0;
    let mut acc_steps = 0usize;

    for step in 0..cfg.total_steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 * step as u64));
        let doc_idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..contexts.len()))
            .collect();

        let rollout = |(i, &di): (usize, &usize)| -> Result<Episode> {
            let ep_seed = derive_seed(derive_seed(cfg.seed, 1 + step as u64), i as u64);
            let decode = DecodeConfig::sample(cfg.temperature, ep_seed)?;
            let mut ep =
                sample_episode(&policy, &vparams, &contexts[di], &decode, limits, eos)?;
            let summary = ep.summary(eos, limits)?;
            let judgment = judge.judge(&contexts[di], &summary)?;
            combined_reward(&mut ep, &judgment, anchor, &policy, reward_cfg)?;
            Ok(ep)
        };
        let episodes: Vec<Episode> = match &pool {
            Some(p) => p.install(|| {
                doc_idx
                    .par_iter()
                    .enumerate()
                    .map(rollout)
                    .collect::<Result<Vec<_>>>()
            })?,
            None => doc_idx
                .iter()
                .enumerate()
                .map(rollout)
                .collect::<Result<Vec<_>>>()?,
        };

        let gae: Vec<GaeResult> = episodes
            .iter()
            .map(|ep| compute_gae(ep, cfg.gamma, cfg.gae_lambda))
            .collect::<Result<Vec<_>>>()?;

        // Value update (every step).
        let (vloss, mut vgrad) =
            value_loss_grad(&episodes, &gae, &vparams, cfg.adv_norm_epsilon)?;
        if !vloss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value loss at step {step}"
            )));
        }
        check_finite(&vgrad, "value gradient", step)?;
        clip_grad(&mut vgrad, cfg.grad_clip);
        value_adam.step(
            &mut vparams.net.theta,
            &vgrad,
            cfg.value_lr * warmup(step),
            false,
        );
        check_finite(&vparams.net.theta, "value parameters", step)?;

        // Policy update (after the delay).
        if step >= cfg.policy_update_delay {
            let flat: Vec<f64> = gae
                .iter()
                .flat_map(|g| g.advantages.iter().copied())
                .collect();
            let normalized = normalize_advantages(&flat, cfg.adv_norm_epsilon);
            let mut per_episode: Vec<Vec<f64>> = Vec::with_capacity(episodes.len());
            let mut off = 0;
            for ep in &episodes {
                per_episode.push(normalized[off..off + ep.len()].to_vec());
                off += ep.len();
            }
            let mut pgrad = policy_loss_grad(&episodes, &per_episode, &policy)?;
            check_finite(&pgrad, "policy gradient", step)?;
            clip_grad(&mut pgrad, cfg.grad_clip);
            policy_adam.step(
                &mut policy.net.theta,
                &pgrad,
                cfg.policy_lr * warmup(step),
                true,
            );
            check_finite(&policy.net.theta, "policy parameters", step)?;
        }

        // Stats.
        let n_eps = episodes.len() as f64;
        let mean_reward = episodes
            .iter()
            .map(|e| e.rewards.iter().sum::<f64>())
            .sum::<f64>()
            / n_eps;
        step_mean_reward.push(mean_reward);
        acc_reward += mean_reward;
        // Decompose: per-episode NLI and KL parts recomputed from the judge
        // would double work; derive from the combination instead.
        let (nli_sum, kl_sum) = decompose_rewards(&episodes, judge, reward_cfg, limits, eos)?;
        acc_nli += nli_sum / n_eps;
        acc_kl += kl_sum / n_eps;
        acc_vloss += vloss;
        acc_steps += 1;

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.total_steps {
            let mut row = LogRow {
                step: step + 1,
                mean_reward: acc_reward / acc_steps as f64,
                mean_nli_logprob: acc_nli / acc_steps as f64,
                mean_kl: acc_kl / acc_steps as f64,
                entailment_rate: 0.0,
                rouge1: 0.0,
                rouge2: 0.0,
                rouge_l: 0.0,
                coverage: 0.0,
                density: 0.0,
                mean_length: 0.0,
                value_loss: acc_vloss / acc_steps as f64,
            };
            if let Some(spec) = &eval {
                let decode = DecodeConfig {
                    seed: derive_seed(spec.decode.seed, step as u64),
                    ..spec.decode
                };
                let (report, _) = evaluate(
                    &policy,
                    spec.dataset,
                    judge,
                    &decode,
                    limits,
                    vocab,
                    reward_cfg,
                    spec.control,
                )?;
                row.entailment_rate = report.entailment_rate;
                row.rouge1 = report.rouge1;
                row.rouge2 = report.rouge2;
                row.rouge_l = report.rouge_l;
                row.coverage = report.coverage;
                row.density = report.density;
                row.mean_length = report.mean_length;
            }
            log.push(row);
            acc_reward = 0.0;
            acc_nli = 0.0;
            acc_kl = 0.0;
            acc_vloss = 0.0;
            acc_steps = 0;
        }
    }

    Ok(RlOutcome {
        policy,
        value: vparams,
        log,
        step_mean_reward,
    })
}

/// Episode-sum NLI log-prob and KL reward across a batch (diagnostics).
fn decompose_rewards(
    episodes: &[Episode],
    judge: &dyn Judge,
    reward_cfg: &RewardConfig,
    limits: &MdpLimits,
    eos: TokenId,
) -> Result<(f64, f64)> {
    let mut nli = 0.0;
    let mut kl = 0.0;
    for ep in episodes {
        let judgment = judge.judge(&ep.context, &ep.summary(eos, limits)?)?;
        nli += judgment.log_prob;
        let total: f64 = ep.rewards.iter().sum();
        // total = (1-a) * nli + a * kl_sum.
        if reward_cfg.alpha > 0.0 {
            kl += (total - (1.0 - reward_cfg.alpha) * judgment.log_prob) / reward_cfg.alpha;
        }
    }
    Ok((nli, kl))
}
