//! Trainable autoregressive policy and value networks.
//!
//! The architecture is a windowed feed-forward net: embed the last `w` tokens
//! of `context ++ [boundary] ++ prefix` (left-padded with a zero pad
//! embedding), optionally append the mean context embedding as a
//! bag-of-context feature, pass through one tanh hidden layer, and emit one
//! logit per vocabulary token (policy) or a single scalar (value). All
//! gradients are analytic and checked against finite differences in tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mdp::{step, Episode, MdpLimits, TokenId, TokenSeq};
use crate::{Error, Result};

/// Architecture hyperparameters shared by the policy and value networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub vocab: u32,
    pub embed_dim: usize,
    pub window: usize,
    pub hidden: usize,
    /// Output width: vocabulary size for a policy, 1 for a value head.
    pub out: usize,
    /// Append the mean context embedding to the window features.
    pub ctx_bag: bool,
    /// Token inserted between context and prefix before windowing.
    pub boundary: Option<TokenId>,
}

impl NetShape {
    pub fn in_dim(&self) -> usize {
        self.window * self.embed_dim + if self.ctx_bag { self.embed_dim } else { 0 }
    }

    pub fn n_params(&self) -> usize {
        self.vocab as usize * self.embed_dim
            + self.in_dim() * self.hidden
            + self.hidden
            + self.hidden * self.out
            + self.out
    }

    fn w1_off(&self) -> usize {
        self.vocab as usize * self.embed_dim
    }
    fn b1_off(&self) -> usize {
        self.w1_off() + self.in_dim() * self.hidden
    }
    fn w2_off(&self) -> usize {
        self.b1_off() + self.hidden
    }
    fn b2_off(&self) -> usize {
        self.w2_off() + self.hidden * self.out
    }
}

/// Flat parameter vector plus its shape. The flat layout keeps the optimizer
/// and finite-difference oracles trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub shape: NetShape,
    pub theta: Vec<f64>,
}

impl Net {
    /// Weights i.i.d. uniform in `[-init_scale, init_scale]`, zero biases.
    pub fn init(shape: NetShape, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; shape.n_params()];
        for x in theta[..shape.b1_off()].iter_mut() {
            *x = rng.gen_range(-init_scale..=init_scale);
        }
        for x in theta[shape.w2_off()..shape.b2_off()].iter_mut() {
            *x = rng.gen_range(-init_scale..=init_scale);
        }
        Net { shape, theta }
    }

    pub fn zeros(shape: NetShape) -> Self {
        let n = shape.n_params();
        Net {
            shape,
            theta: vec![0.0; n],
        }
    }

    fn window_tokens(&self, context: &[TokenId], prefix: &[TokenId]) -> Vec<Option<TokenId>> {
        let w = self.shape.window;
        let mut joined: Vec<TokenId> = Vec::with_capacity(context.len() + 1 + prefix.len());
        joined.extend_from_slice(context);
        if let Some(b) = self.shape.boundary {
            joined.push(b);
        }
        joined.extend_from_slice(prefix);
        let mut window = vec![None; w];
        let n = joined.len().min(w);
        for (slot, &tok) in window[w - n..].iter_mut().zip(&joined[joined.len() - n..]) {
            *slot = Some(tok);
        }
        window
    }

    fn forward(&self, context: &[TokenId], prefix: &[TokenId]) -> ForwardPass {
        let s = &self.shape;
        let d = s.embed_dim;
        let window = self.window_tokens(context, prefix);
        let mut x = vec![0.0; s.in_dim()];
        for (i, slot) in window.iter().enumerate() {
            if let Some(t) = slot {
                let e = *t as usize * d;
                x[i * d..(i + 1) * d].copy_from_slice(&self.theta[e..e + d]);
            }
        }
        if s.ctx_bag && !context.is_empty() {
            let off = s.window * d;
            let inv = 1.0 / context.len() as f64;
            for &t in context {
                let e = t as usize * d;
                for c in 0..d {
                    x[off + c] += self.theta[e + c] * inv;
                }
            }
        }
        let w1 = &self.theta[s.w1_off()..s.b1_off()];
        let b1 = &self.theta[s.b1_off()..s.w2_off()];
        let w2 = &self.theta[s.w2_off()..s.b2_off()];
        let b2 = &self.theta[s.b2_off()..];
        let h = s.hidden;
        let mut act = b1.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &w1[i * h..(i + 1) * h];
                for (aj, &wij) in act.iter_mut().zip(row) {
                    *aj += xi * wij;
                }
            }
        }
        for a in act.iter_mut() {
            *a = a.tanh();
        }
        let mut out = b2.to_vec();
        for (j, &aj) in act.iter().enumerate() {
            if aj != 0.0 {
                let row = &w2[j * s.out..(j + 1) * s.out];
                for (ok, &wjk) in out.iter_mut().zip(row) {
                    *ok += aj * wjk;
                }
            }
        }
        ForwardPass {
            window,
            x,
            act,
            out,
        }
    }

    /// Backpropagate `d_out`, scattering `scale * gradient` into `acc`.
    fn backward(
        &self,
        context: &[TokenId],
        pass: &ForwardPass,
        d_out: &[f64],
        scale: f64,
        acc: &mut [f64],
    ) {
        let s = &self.shape;
        let d = s.embed_dim;
        let h = s.hidden;
        let w1 = &self.theta[s.w1_off()..s.b1_off()];
        let w2 = &self.theta[s.w2_off()..s.b2_off()];

        // Output layer.
        for (k, &dk) in d_out.iter().enumerate() {
            acc[s.b2_off() + k] += scale * dk;
        }
        let mut d_act = vec![0.0; h];
        for j in 0..h {
            let aj = pass.act[j];
            let row = &w2[j * s.out..(j + 1) * s.out];
            let mut da = 0.0;
            for (k, &dk) in d_out.iter().enumerate() {
                acc[s.w2_off() + j * s.out + k] += scale * aj * dk;
                da += row[k] * dk;
            }
            d_act[j] = da;
        }

        // Hidden layer (tanh).
        let mut d_x = vec![0.0; s.in_dim()];
        for j in 0..h {
            let dz = d_act[j] * (1.0 - pass.act[j] * pass.act[j]);
            acc[s.b1_off() + j] += scale * dz;
            for (i, &xi) in pass.x.iter().enumerate() {
                if xi != 0.0 {
                    acc[s.w1_off() + i * h + j] += scale * xi * dz;
                }
                d_x[i] += w1[i * h + j] * dz;
            }
        }

        // Embedding table: window slots, then the context bag.
        for (i, slot) in pass.window.iter().enumerate() {
            if let Some(t) = slot {
                let e = *t as usize * d;
                for c in 0..d {
                    acc[e + c] += scale * d_x[i * d + c];
                }
            }
        }
        if s.ctx_bag && !context.is_empty() {
            let off = s.window * d;
            let inv = 1.0 / context.len() as f64;
            for &t in context {
                let e = t as usize * d;
                for c in 0..d {
                    acc[e + c] += scale * d_x[off + c] * inv;
                }
            }
        }
    }
}

struct ForwardPass {
    window: Vec<Option<TokenId>>,
    x: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

/// Policy network: one logit per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub net: Net,
}

impl PolicyParams {
    pub fn init(
        vocab: u32,
        embed_dim: usize,
        window: usize,
        hidden: usize,
        ctx_bag: bool,
        boundary: Option<TokenId>,
        init_scale: f64,
        seed: u64,
    ) -> Self {
        let shape = NetShape {
            vocab,
            embed_dim,
            window,
            hidden,
            out: vocab as usize,
            ctx_bag,
            boundary,
        };
        PolicyParams {
            net: Net::init(shape, init_scale, seed),
        }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.net.theta.len()]
    }
}

/// Value network: same feature stack, scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub net: Net,
}

impl ValueParams {
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.net.theta.len()]
    }
}

/// Decoding mode and knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Sample,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub beam_width: usize,
    pub brevity_penalty: f64,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn sample(temperature: f64, seed: u64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Config("sampling temperature must be > 0".to_string()));
        }
        Ok(DecodeConfig {
            mode: DecodeMode::Sample,
            temperature,
            beam_width: 1,
            brevity_penalty: 0.0,
            seed,
        })
    }

    pub fn beam(beam_width: usize, brevity_penalty: f64) -> Result<Self> {
        if beam_width == 0 {
            return Err(Error::Config("beam width must be >= 1".to_string()));
        }
        Ok(DecodeConfig {
            mode: DecodeMode::Beam,
            temperature: 1.0,
            beam_width,
            brevity_penalty,
            seed: 0,
        })
    }
}

/// Logits of the next-token distribution given context and prefix.
pub fn logits(params: &PolicyParams, context: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f64>> {
    let out = params.net.forward(context.ids(), prefix.ids()).out;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(
            "non-finite logits (non-finite policy parameters)".to_string(),
        ));
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Log-probability of the given action under the policy.
pub fn action_logprob(
    params: &PolicyParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
    action: TokenId,
) -> Result<f64> {
    let l = logits(params, context, prefix)?;
    Ok((l[action as usize] - log_sum_exp(&l)).min(0.0))
}

/// Sum of per-step log-probabilities of a complete trajectory.
pub fn trajectory_logprob(
    params: &PolicyParams,
    context: &TokenSeq,
    trajectory: &[TokenId],
    eos_id: TokenId,
) -> Result<f64> {
    let mut total = 0.0;
    let mut prefix = TokenSeq::empty_prefix();
    for (t, &action) in trajectory.iter().enumerate() {
        total += action_logprob(params, context, &prefix, action)?;
        if t + 1 < trajectory.len() {
            prefix = TokenSeq::prefix(trajectory[..t + 1].to_vec(), eos_id)?;
        }
    }
    Ok(total)
}

/// Roll out one episode with temperature sampling.
///
/// Actions are drawn from `softmax(logits / temperature)`; the recorded
/// log-probs are the un-tempered policy log-probs of the taken actions.
/// Rewards are left zero-filled for the rewards module.
pub fn sample_episode(
    params: &PolicyParams,
    vparams: &ValueParams,
    context: &TokenSeq,
    cfg: &DecodeConfig,
    limits: &MdpLimits,
    eos_id: TokenId,
) -> Result<Episode> {
    if cfg.mode != DecodeMode::Sample {
        return Err(Error::Contract(
            "sample_episode requires sample mode".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefix = TokenSeq::empty_prefix();
    let mut actions = Vec::new();
    let mut logprobs = Vec::new();
    let mut values = Vec::new();
    loop {
        let l = logits(params, context, &prefix)?;
        let (v, _) = value_and_grad_lazy(vparams, context, &prefix)?;
        let tempered: Vec<f64> = l.iter().map(|&x| x / cfg.temperature).collect();
        let probs = softmax(&tempered);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut action = probs.len() as TokenId - 1;
        for (a, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                action = a as TokenId;
                break;
            }
        }
        let lp = (l[action as usize] - log_sum_exp(&l)).min(0.0);
        actions.push(action);
        logprobs.push(lp);
        values.push(v);
        let (next, terminal) = step(&prefix, action, eos_id, limits)?;
        if terminal {
            break;
        }
        prefix = next;
    }
    Episode::new(
        context.clone(),
        actions,
        logprobs,
        values,
        eos_id,
        limits,
    )
}

/// Beam search returning the best complete hypothesis under
/// `score = logprob / |y|^brevity_penalty`, ties broken by lower
/// token-id lexicographic order.
pub fn beam_decode(
    params: &PolicyParams,
    context: &TokenSeq,
    cfg: &DecodeConfig,
    limits: &MdpLimits,
    eos_id: TokenId,
) -> Result<TokenSeq> {
    if cfg.mode != DecodeMode::Beam {
        return Err(Error::Contract("beam_decode requires beam mode".to_string()));
    }
    struct Hyp {
        ids: Vec<TokenId>,
        logprob: f64,
    }
    let mut live = vec![Hyp {
        ids: Vec::new(),
        logprob: 0.0,
    }];
    let mut completed: Vec<Hyp> = Vec::new();
    for _t in 0..limits.horizon {
        let mut expanded: Vec<Hyp> = Vec::new();
        for hyp in &live {
            let prefix = TokenSeq::prefix(hyp.ids.clone(), eos_id)?;
            let l = logits(params, context, &prefix)?;
            let logp = log_softmax(&l);
            for (a, &lp) in logp.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(a as TokenId);
                expanded.push(Hyp {
                    ids,
                    logprob: hyp.logprob + lp,
                });
            }
        }
        // All candidates (terminal or not) compete for the beam slots by raw
        // logprob; surviving terminal hypotheses retire to `completed`.
        expanded.sort_by(|a, b| {
            b.logprob
                .partial_cmp(&a.logprob)
                .unwrap()
                .then_with(|| a.ids.cmp(&b.ids))
        });
        expanded.truncate(cfg.beam_width);
        live = Vec::new();
        for cand in expanded {
            if cand.ids.last() == Some(&eos_id) || cand.ids.len() == limits.horizon {
                completed.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let score = |h: &Hyp| h.logprob / (h.ids.len() as f64).powf(cfg.brevity_penalty);
    let best = completed
        .into_iter()
        .reduce(|best, cand| {
            let (sb, sc) = (score(&best), score(&cand));
            if sc > sb || (sc == sb && cand.ids < best.ids) {
                cand
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Contract("beam search produced no hypotheses".to_string()))?;
    TokenSeq::complete(best.ids, eos_id, limits.horizon)
}

/// Exact analytic gradient of `log pi(action | prefix, context)` with respect
/// to every parameter, scaled by `scale` and accumulated into `acc`.
/// Returns the log-probability.
pub fn logprob_grad_into(
    params: &PolicyParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
    action: TokenId,
    scale: f64,
    acc: &mut [f64],
) -> Result<f64> {
    let pass = params.net.forward(context.ids(), prefix.ids());
    if pass.out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite logits".to_string()));
    }
    let probs = softmax(&pass.out);
    let lp = (pass.out[action as usize] - log_sum_exp(&pass.out)).min(0.0);
    // d logprob / d logits = onehot(action) - softmax(logits)
    let mut d_out: Vec<f64> = probs.iter().map(|&p| -p).collect();
    d_out[action as usize] += 1.0;
    params.net.backward(context.ids(), &pass, &d_out, scale, acc);
    Ok(lp)
}

pub fn logprob_and_grad(
    params: &PolicyParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
    action: TokenId,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.net.theta.len()];
    let lp = logprob_grad_into(params, context, prefix, action, 1.0, &mut grad)?;
    Ok((lp, grad))
}

fn value_and_grad_lazy(
    vparams: &ValueParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
) -> Result<(f64, ())> {
    let pass = vparams.net.forward(context.ids(), prefix.ids());
    let v = pass.out[0];
    if !v.is_finite() {
        return Err(Error::Divergence("non-finite value".to_string()));
    }
    Ok((v, ()))
}

/// Scalar value estimate of a state.
pub fn value(vparams: &ValueParams, context: &TokenSeq, prefix: &TokenSeq) -> Result<f64> {
    value_and_grad_lazy(vparams, context, prefix).map(|(v, _)| v)
}

/// Gradient of the scalar value output, scaled and accumulated into `acc`.
pub fn value_grad_into(
    vparams: &ValueParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
    scale: f64,
    acc: &mut [f64],
) -> Result<f64> {
    let pass = vparams.net.forward(context.ids(), prefix.ids());
    let v = pass.out[0];
    if !v.is_finite() {
        return Err(Error::Divergence("non-finite value".to_string()));
    }
    vparams
        .net
        .backward(context.ids(), &pass, &[1.0], scale, acc);
    Ok(v)
}

pub fn value_and_grad(
    vparams: &ValueParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; vparams.net.theta.len()];
    let v = value_grad_into(vparams, context, prefix, 1.0, &mut grad)?;
    Ok((v, grad))
}

/// Initialize a value network from a policy: the feature stack (embeddings,
/// hidden layer) is copied verbatim and the scalar head starts at zero, so
/// the initial value estimate is 0 for every state.
pub fn clone_policy_as_value_init(params: &PolicyParams) -> ValueParams {
    let s = params.net.shape;
    let vshape = NetShape { out: 1, ..s };
    let mut net = Net::zeros(vshape);
    // Embeddings, hidden weights, hidden biases are laid out identically up
    // to the output layer.
    let shared = s.b1_off() + s.hidden;
    debug_assert_eq!(shared, vshape.b1_off() + vshape.hidden);
    net.theta[..shared].copy_from_slice(&params.net.theta[..shared]);
    ValueParams { net }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Vocabulary;

    fn small_policy(seed: u64) -> PolicyParams {
        PolicyParams::init(5, 3, 2, 4, true, Some(1), 0.08, seed)
    }

    fn ctx(ids: Vec<TokenId>) -> TokenSeq {
        TokenSeq::context(ids, 0).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let shape = NetShape {
            vocab: 5,
            embed_dim: 3,
            window: 2,
            hidden: 4,
            out: 5,
            ctx_bag: true,
            boundary: Some(1),
        };
        let params = PolicyParams {
            net: Net::zeros(shape),
        };
        let l = logits(&params, &ctx(vec![2, 3]), &TokenSeq::empty_prefix()).unwrap();
        let p = softmax(&l);
        for &pi in &p {
            assert!((pi - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_normalizes() {
        for seed in 0..10 {
            let params = small_policy(seed);
            let l = logits(&params, &ctx(vec![2, 3, 4]), &TokenSeq::empty_prefix()).unwrap();
            let sum: f64 = softmax(&l).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    fn finite_diff_max_rel_err(
        theta_len: usize,
        analytic: &[f64],
        mut f: impl FnMut(usize, f64) -> f64,
    ) -> f64 {
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..theta_len {
            let fp = f(i, eps);
            let fm = f(i, -eps);
            let fd = (fp - fm) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let params = small_policy(seed);
            let context = ctx(vec![2, 3]);
            let prefix = TokenSeq::prefix(vec![4], 0).unwrap();
            let action = (seed % 5) as TokenId;
            let (_, grad) = logprob_and_grad(&params, &context, &prefix, action).unwrap();
            let err = finite_diff_max_rel_err(params.net.theta.len(), &grad, |i, eps| {
                let mut p = params.clone();
                p.net.theta[i] += eps;
                action_logprob(&p, &context, &prefix, action).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let params = small_policy(seed + 100);
            let vparams = ValueParams {
                net: Net::init(
                    NetShape {
                        out: 1,
                        ..params.net.shape
                    },
                    0.08,
                    seed + 200,
                ),
            };
            let context = ctx(vec![2, 4]);
            let prefix = TokenSeq::prefix(vec![3, 2], 0).unwrap();
            let (_, grad) = value_and_grad(&vparams, &context, &prefix).unwrap();
            let err = finite_diff_max_rel_err(vparams.net.theta.len(), &grad, |i, eps| {
                let mut p = vparams.clone();
                p.net.theta[i] += eps;
                value(&p, &context, &prefix).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn uniform_policy_output_bias_gradient() {
        let shape = NetShape {
            vocab: 5,
            embed_dim: 3,
            window: 2,
            hidden: 4,
            out: 5,
            ctx_bag: false,
            boundary: None,
        };
        let params = PolicyParams {
            net: Net::zeros(shape),
        };
        let action = 2;
        let (_, grad) = logprob_and_grad(
            &params,
            &ctx(vec![]),
            &TokenSeq::empty_prefix(),
            action,
        )
        .unwrap();
        let b2 = shape.b2_off();
        for k in 0..5 {
            let expected = if k == action as usize {
                1.0 - 0.2
            } else {
                -0.2
            };
            assert!((grad[b2 + k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn score_function_expectation_is_zero() {
        let params = small_policy(7);
        let context = ctx(vec![2, 3]);
        let prefix = TokenSeq::prefix(vec![4, 2], 0).unwrap();
        let l = logits(&params, &context, &prefix).unwrap();
        let probs = softmax(&l);
        let mut acc = vec![0.0; params.net.theta.len()];
        for (a, &p) in probs.iter().enumerate() {
            logprob_grad_into(&params, &context, &prefix, a as TokenId, p, &mut acc).unwrap();
        }
        let max = acc.iter().fold(0.0_f64, |m, &g| m.max(g.abs()));
        assert!(max < 1e-12, "max |E[grad]| = {max}");
    }

    #[test]
    fn tiny_temperature_equals_greedy() {
        let limits = MdpLimits::new(6, 32).unwrap();
        let params = small_policy(11);
        let vparams = clone_policy_as_value_init(&params);
        for i in 0..100u64 {
            let context = ctx(vec![2 + (i % 3) as TokenId, 3]);
            let cfg = DecodeConfig::sample(1e-6, i).unwrap();
            let sampled =
                sample_episode(&params, &vparams, &context, &cfg, &limits, 0).unwrap();
            // Greedy rollout.
            let mut prefix = TokenSeq::empty_prefix();
            let mut greedy = Vec::new();
            loop {
                let l = logits(&params, &context, &prefix).unwrap();
                let a = l
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .unwrap()
                    .0 as TokenId;
                greedy.push(a);
                let (next, terminal) = step(&prefix, a, 0, &limits).unwrap();
                if terminal {
                    break;
                }
                prefix = next;
            }
            assert_eq!(sampled.actions, greedy, "context {i}");
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let limits = MdpLimits::new(8, 32).unwrap();
        let params = small_policy(3);
        let vparams = clone_policy_as_value_init(&params);
        let context = ctx(vec![2, 3, 4]);
        let cfg = DecodeConfig::sample(1.0, 42).unwrap();
        let a = sample_episode(&params, &vparams, &context, &cfg, &limits, 0).unwrap();
        let b = sample_episode(&params, &vparams, &context, &cfg, &limits, 0).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.logprobs, b.logprobs);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn sampling_frequencies_match_tempered_softmax() {
        let params = small_policy(5);
        let context = ctx(vec![2, 3]);
        let temperature = 0.7;
        let l = logits(&params, &context, &TokenSeq::empty_prefix()).unwrap();
        let tempered: Vec<f64> = l.iter().map(|&x| x / temperature).collect();
        let expected = softmax(&tempered);
        let n = 100_000;
        let limits = MdpLimits::new(4, 32).unwrap();
        let vparams = clone_policy_as_value_init(&params);
        let mut counts = vec![0usize; expected.len()];
        for i in 0..n {
            let cfg = DecodeConfig::sample(temperature, i as u64).unwrap();
            let ep = sample_episode(&params, &vparams, &context, &cfg, &limits, 0).unwrap();
            counts[ep.actions[0] as usize] += 1;
        }
        for (a, &p) in expected.iter().enumerate() {
            let freq = counts[a] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se.max(1e-6),
                "token {a}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn exhaustive_beam_equals_enumeration_argmax() {
        // V=3, T_max=4: beam wide enough to be exhaustive with bp=0 must
        // recover the brute-force argmax trajectory.
        let vocab = Vocabulary::plain(3, 0).unwrap();
        let limits = MdpLimits::new(4, 32).unwrap();
        let params = PolicyParams::init(3, 2, 2, 3, false, None, 0.5, 9);
        let context = ctx(vec![]);
        let trajs =
            crate::mdp::enumerate_trajectories(&context, &limits, &vocab).unwrap();
        let best = trajs
            .iter()
            .map(|t| {
                (
                    trajectory_logprob(&params, &context, t.ids(), 0).unwrap(),
                    t.ids().to_vec(),
                )
            })
            .reduce(|best, cand| {
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    cand
                } else {
                    best
                }
            })
            .unwrap();
        let cfg = DecodeConfig::beam(1000, 0.0).unwrap();
        let decoded = beam_decode(&params, &context, &cfg, &limits, 0).unwrap();
        assert_eq!(decoded.ids(), best.1.as_slice());
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let limits = MdpLimits::new(5, 32).unwrap();
        let params = small_policy(13);
        let context = ctx(vec![3, 4]);
        let cfg = DecodeConfig::beam(1, 0.0).unwrap();
        let decoded = beam_decode(&params, &context, &cfg, &limits, 0).unwrap();
        let mut prefix = TokenSeq::empty_prefix();
        let mut greedy = Vec::new();
        loop {
            let l = logits(&params, &context, &prefix).unwrap();
            let a = l
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0 as TokenId;
            greedy.push(a);
            let (next, terminal) = step(&prefix, a, 0, &limits).unwrap();
            if terminal {
                break;
            }
            prefix = next;
        }
        assert_eq!(decoded.ids(), greedy.as_slice());
    }

    #[test]
    fn brevity_penalty_monotonicity() {
        // For equal raw logprob, raising bp never helps the shorter sequence.
        let lp = -3.0;
        let score = |len: f64, bp: f64| lp / len.powf(bp);
        for i in 0..=10 {
            let bp = i as f64 / 10.0;
            let short = score(3.0, bp);
            let long = score(7.0, bp);
            // Negative logprob: normalization favors longer sequences as bp grows.
            assert!(long - short >= -1e-12 || bp == 0.0);
            if bp > 0.0 {
                assert!(long > short);
            }
        }
    }

    #[test]
    fn clone_as_value_shares_features_and_zero_head() {
        let params = small_policy(17);
        let vparams = clone_policy_as_value_init(&params);
        let shared = params.net.shape.b1_off() + params.net.shape.hidden;
        assert_eq!(&vparams.net.theta[..shared], &params.net.theta[..shared]);
        for &w in &vparams.net.theta[shared..] {
            assert_eq!(w, 0.0);
        }
        let v = value(&vparams, &ctx(vec![2, 3]), &TokenSeq::empty_prefix()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn clone_is_deep() {
        let params = small_policy(19);
        let before = params.net.theta.clone();
        let mut vparams = clone_policy_as_value_init(&params);
        vparams.net.theta[0] += 1.0;
        assert_eq!(params.net.theta, before);
    }

    #[test]
    fn value_ignores_tokens_beyond_window() {
        // ctx_bag off: only the last w tokens matter.
        let shape = NetShape {
            vocab: 6,
            embed_dim: 3,
            window: 2,
            hidden: 4,
            out: 1,
            ctx_bag: false,
            boundary: None,
        };
        let vparams = ValueParams {
            net: Net::init(shape, 0.1, 23),
        };
        let c = ctx(vec![]);
        let a = value(&vparams, &c, &TokenSeq::prefix(vec![1, 2, 3, 4], 0).unwrap()).unwrap();
        let b = value(&vparams, &c, &TokenSeq::prefix(vec![5, 5, 3, 4], 0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_is_temperature_invariant() {
        let params = small_policy(29);
        let l = logits(&params, &ctx(vec![2, 4]), &TokenSeq::empty_prefix()).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        };
        let base = argmax(&softmax(&l));
        for &t in &[0.01, 0.1, 0.5, 1.0, 3.0, 100.0] {
            let tempered: Vec<f64> = l.iter().map(|&x| x / t).collect();
            assert_eq!(argmax(&softmax(&tempered)), base);
        }
    }
}
