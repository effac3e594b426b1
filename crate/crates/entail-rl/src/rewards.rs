//! Reward signals: the terminal entailment reward, the KL anchor reward, and
//! their alpha-combination, behind a pluggable judge interface. The exact
//! synthetic oracle scores a summary as `exp(-beta * n_unsupported_facts)`,
//! with a small floor probability for malformed summaries.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::mdp::{Episode, TokenSeq, Vocabulary};
use crate::policy::{action_logprob, logits, log_softmax, softmax, PolicyParams};
use crate::synthtask::parse_facts;
use crate::{Error, Result};

/// How the per-token KL rewards are credited to the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL reward paid at the token where it is incurred.
    PerToken,
    /// Per-token values summed and paid at the final position.
    SequenceAccumulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Trade-off between the entailment reward (weight `1 - alpha`) and the
    /// KL anchor reward (weight `alpha`).
    pub alpha: f64,
    pub kl_mode: KlMode,
    /// Oracle sharpness: one unsupported fact multiplies the entailment
    /// probability by `exp(-oracle_beta)`.
    pub oracle_beta: f64,
    /// Entailment probability assigned to malformed summaries.
    pub oracle_floor: f64,
    pub entail_threshold: f64,
    /// Replace the single-sample KL estimator by the exact per-state KL
    /// (full sum over the vocabulary).
    pub exact_kl: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.1,
            kl_mode: KlMode::SequenceAccumulated,
            oracle_beta: 4.0,
            oracle_floor: 1e-6,
            entail_threshold: 0.5,
            exact_kl: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".to_string()));
        }
        if self.oracle_beta <= 0.0 {
            return Err(Error::Config("oracle_beta must be > 0".to_string()));
        }
        if self.oracle_floor <= 0.0 || self.oracle_floor >= self.entail_threshold {
            return Err(Error::Config(
                "oracle_floor must be in (0, entail_threshold)".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.entail_threshold) || self.entail_threshold <= 0.0 {
            return Err(Error::Config(
                "entail_threshold must be in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Outcome of judging a summary against its document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentJudgment {
    pub prob_entailed: f64,
    /// `ln(prob_entailed)`; the terminal reward.
    pub log_prob: f64,
    pub n_facts: usize,
    pub n_unsupported: usize,
    pub parse_ok: bool,
}

impl EntailmentJudgment {
    pub fn from_prob(prob_entailed: f64) -> Self {
        EntailmentJudgment {
            prob_entailed,
            log_prob: prob_entailed.ln(),
            n_facts: 0,
            n_unsupported: 0,
            parse_ok: true,
        }
    }
}

/// Pluggable judge: anything mapping (document, summary) to an entailment
/// probability can stand in for the oracle.
pub trait Judge: Sync {
    fn judge(&self, document: &TokenSeq, summary: &TokenSeq) -> Result<EntailmentJudgment>;
}

/// Exact oracle: parse the summary into facts, count those unsupported by the
/// document. `prob = exp(-beta * n_unsupported)` when the summary parses,
/// `oracle_floor` otherwise. A zero-fact summary is vacuously entailed.
pub fn oracle_entailment(
    document: &TokenSeq,
    summary: &TokenSeq,
    cfg: &RewardConfig,
    vocab: &Vocabulary,
) -> Result<EntailmentJudgment> {
    let doc_facts = parse_facts(document.without_eos(vocab.eos_id()), vocab).ok_or_else(|| {
        Error::Contract("document does not parse as a fact list".to_string())
    })?;
    let doc_set: std::collections::HashSet<_> = doc_facts.into_iter().collect();
    match parse_facts(summary.without_eos(vocab.eos_id()), vocab) {
        Some(facts) => {
            let n_unsupported = facts.iter().filter(|f| !doc_set.contains(f)).count();
            let log_prob = -cfg.oracle_beta * n_unsupported as f64;
            Ok(EntailmentJudgment {
                prob_entailed: log_prob.exp(),
                log_prob,
                n_facts: facts.len(),
                n_unsupported,
                parse_ok: true,
            })
        }
        None => Ok(EntailmentJudgment {
            prob_entailed: cfg.oracle_floor,
            log_prob: cfg.oracle_floor.ln(),
            n_facts: 0,
            n_unsupported: 0,
            parse_ok: false,
        }),
    }
}

/// The oracle behind the [`Judge`] interface.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    cfg: RewardConfig,
    vocab: Vocabulary,
}

impl OracleJudge {
    pub fn new(cfg: RewardConfig, vocab: Vocabulary) -> Self {
        OracleJudge { cfg, vocab }
    }
}

impl Judge for OracleJudge {
    fn judge(&self, document: &TokenSeq, summary: &TokenSeq) -> Result<EntailmentJudgment> {
        oracle_entailment(document, summary, &self.cfg, &self.vocab)
    }
}

/// Terminal-only entailment reward: zero everywhere except the final
/// position, which carries the judgment's log-probability. Truncated
/// episodes also pay at the final token.
pub fn nli_reward(episode: &Episode, judgment: &EntailmentJudgment) -> Result<Vec<f64>> {
    if episode.is_empty() {
        return Err(Error::Contract("episode has no actions".to_string()));
    }
    let mut r = vec![0.0; episode.len()];
    *r.last_mut().unwrap() = judgment.log_prob;
    Ok(r)
}

/// KL anchor reward along the episode.
///
/// Default estimator: `log pi_anchor(a_t|s_t) - log pi_current(a_t|s_t)` on
/// the taken action. With `exact_kl`, each position instead pays the exact
/// `-KL(current || anchor)` at its state. In sequence-accumulated mode the
/// per-token values are summed and paid at the final position.
pub fn kl_reward(
    episode: &Episode,
    anchor: &PolicyParams,
    current: &PolicyParams,
    cfg: &RewardConfig,
) -> Result<Vec<f64>> {
    let eos = u32::MAX; // prefixes below never contain an action slice with EOS mid-way
    let mut per_token = Vec::with_capacity(episode.len());
    for t in 0..episode.len() {
        let prefix = TokenSeq::prefix(episode.actions[..t].to_vec(), eos)?;
        let r = if cfg.exact_kl {
            -exact_state_kl(current, anchor, &episode.context, &prefix)?
        } else {
            let a = episode.actions[t];
            action_logprob(anchor, &episode.context, &prefix, a)?
                - action_logprob(current, &episode.context, &prefix, a)?
        };
        per_token.push(r);
    }
    match cfg.kl_mode {
        KlMode::PerToken => Ok(per_token),
        KlMode::SequenceAccumulated => {
            let total: f64 = per_token.iter().sum();
            let mut r = vec![0.0; episode.len()];
            *r.last_mut().unwrap() = total;
            Ok(r)
        }
    }
}

/// Exact `KL(current || anchor)` at one state, summed over the vocabulary.
pub fn exact_state_kl(
    current: &PolicyParams,
    anchor: &PolicyParams,
    context: &TokenSeq,
    prefix: &TokenSeq,
) -> Result<f64> {
    let lc = logits(current, context, prefix)?;
    let la = logits(anchor, context, prefix)?;
    let logp_c = log_softmax(&lc);
    let logp_a = log_softmax(&la);
    let p_c = softmax(&lc);
    Ok(p_c
        .iter()
        .zip(logp_c.iter().zip(&logp_a))
        .map(|(&p, (&lpc, &lpa))| p * (lpc - lpa))
        .sum())
}

/// Combined per-token reward `(1 - alpha) * r_nli + alpha * r_kl`, written
/// into `episode.rewards`.
pub fn combined_reward(
    episode: &mut Episode,
    judgment: &EntailmentJudgment,
    anchor: &PolicyParams,
    current: &PolicyParams,
    cfg: &RewardConfig,
) -> Result<()> {
    let nli = nli_reward(episode, judgment)?;
    let kl = kl_reward(episode, anchor, current, cfg)?;
    episode.rewards = nli
        .iter()
        .zip(&kl)
        .map(|(&n, &k)| (1.0 - cfg.alpha) * n + cfg.alpha * k)
        .collect();
    Ok(())
}

/// Fraction of judgments above the entailment threshold.
pub fn entailment_rate(judgments: &[EntailmentJudgment], cfg: &RewardConfig) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::Contract(
            "entailment_rate of an empty list".to_string(),
        ));
    }
    let n = judgments
        .iter()
        .filter(|j| j.prob_entailed > cfg.entail_threshold)
        .count();
    Ok(n as f64 / judgments.len() as f64)
}

// ---------------------------------------------------------------------------
// Remote judge adapter: line-delimited JSON over a child process's stdio,
// so an external classifier can replace the oracle without code changes.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub document: Vec<u32>,
    pub summary: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub prob_entailed: f64,
}

/// Judge speaking one JSON record per line over a pair of streams.
pub struct RemoteJudge<W: Write + Send, R: BufRead + Send> {
    io: Mutex<(W, R)>,
    // Keeps a spawned child process alive for the judge's lifetime.
    _child: Option<Child>,
}

impl<W: Write + Send, R: BufRead + Send> RemoteJudge<W, R> {
    pub fn from_streams(writer: W, reader: R) -> Self {
        RemoteJudge {
            io: Mutex::new((writer, reader)),
            _child: None,
        }
    }
}

impl RemoteJudge<ChildStdin, BufReader<ChildStdout>> {
    /// Spawn `command` and judge over its stdin/stdout.
    pub fn spawn(command: &mut Command) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(RemoteJudge {
            io: Mutex::new((stdin, stdout)),
            _child: Some(child),
        })
    }
}

impl<W: Write + Send, R: BufRead + Send> Judge for RemoteJudge<W, R> {
    fn judge(&self, document: &TokenSeq, summary: &TokenSeq) -> Result<EntailmentJudgment> {
        let request = JudgeRequest {
            document: document.ids().to_vec(),
            summary: summary.ids().to_vec(),
        };
        let mut io = self.io.lock().expect("judge lock");
        let line = serde_json::to_string(&request)
            .map_err(|e| Error::Contract(format!("encode judge request: {e}")))?;
        writeln!(io.0, "{line}")?;
        io.0.flush()?;
        let mut response = String::new();
        io.1.read_line(&mut response)?;
        if response.is_empty() {
            return Err(Error::Contract("remote judge closed the stream".to_string()));
        }
        let parsed: JudgeResponse = serde_json::from_str(response.trim())
            .map_err(|e| Error::Contract(format!("decode judge response: {e}")))?;
        if !(0.0..=1.0).contains(&parsed.prob_entailed) {
            return Err(Error::Contract(format!(
                "remote judge returned probability {}",
                parsed.prob_entailed
            )));
        }
        Ok(EntailmentJudgment::from_prob(parsed.prob_entailed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Episode, MdpLimits};
    use crate::synthtask::{render_facts, CorpusConfig, Fact};

    fn fact_vocab() -> Vocabulary {
        CorpusConfig::default().vocabulary().unwrap()
    }

    fn seq(ids: Vec<u32>) -> TokenSeq {
        TokenSeq::context(ids, 0).unwrap()
    }

    fn doc_and_facts(vocab: &Vocabulary) -> (TokenSeq, Vec<Fact>) {
        let r = *vocab.fact_ranges().unwrap();
        let facts: Vec<Fact> = (0..3)
            .map(|i| Fact {
                entity: r.entities.0 + i,
                attribute: r.attributes.0 + i,
                value: r.values.0 + i,
            })
            .collect();
        let sep = vocab.separator_id().unwrap();
        (seq(render_facts(&facts, sep)), facts)
    }

    #[test]
    fn fully_supported_summary_scores_one() {
        let vocab = fact_vocab();
        let cfg = RewardConfig::default();
        let (doc, facts) = doc_and_facts(&vocab);
        let sum = seq(render_facts(&facts[..2], vocab.separator_id().unwrap()));
        let j = oracle_entailment(&doc, &sum, &cfg, &vocab).unwrap();
        assert_eq!(j.prob_entailed, 1.0);
        assert_eq!(j.log_prob, 0.0);
        assert_eq!(j.n_unsupported, 0);
        assert!(j.parse_ok);
    }

    #[test]
    fn one_unsupported_fact_costs_beta() {
        let vocab = fact_vocab();
        let cfg = RewardConfig::default();
        let (doc, facts) = doc_and_facts(&vocab);
        let r = *vocab.fact_ranges().unwrap();
        let bad = Fact {
            value: r.values.1 - 1,
            ..facts[0]
        };
        let sum = seq(render_facts(
            &[facts[1], bad],
            vocab.separator_id().unwrap(),
        ));
        let j = oracle_entailment(&doc, &sum, &cfg, &vocab).unwrap();
        assert_eq!(j.log_prob, -4.0);
        assert!((j.prob_entailed - 0.018316).abs() < 1e-6);
        assert_eq!(j.n_unsupported, 1);
    }

    #[test]
    fn malformed_summary_hits_floor() {
        let vocab = fact_vocab();
        let cfg = RewardConfig::default();
        let (doc, _) = doc_and_facts(&vocab);
        let sum = seq(vec![vocab.separator_id().unwrap()]);
        let j = oracle_entailment(&doc, &sum, &cfg, &vocab).unwrap();
        assert!(!j.parse_ok);
        assert_eq!(j.prob_entailed, 1e-6);
        assert!((j.log_prob + 13.8155).abs() < 1e-3);
    }

    #[test]
    fn empty_summary_is_vacuously_entailed() {
        let vocab = fact_vocab();
        let cfg = RewardConfig::default();
        let (doc, _) = doc_and_facts(&vocab);
        let j = oracle_entailment(&doc, &seq(vec![]), &cfg, &vocab).unwrap();
        assert!(j.parse_ok);
        assert_eq!(j.prob_entailed, 1.0);
        assert_eq!(j.n_facts, 0);
    }

    #[test]
    fn adding_unsupported_fact_strictly_decreases_prob() {
        let vocab = fact_vocab();
        let cfg = RewardConfig::default();
        let (doc, facts) = doc_and_facts(&vocab);
        let r = *vocab.fact_ranges().unwrap();
        let sep = vocab.separator_id().unwrap();
        let bad = Fact {
            value: r.values.1 - 1,
            ..facts[0]
        };
        let base = oracle_entailment(&doc, &seq(render_facts(&[facts[0]], sep)), &cfg, &vocab)
            .unwrap();
        let worse =
            oracle_entailment(&doc, &seq(render_facts(&[facts[0], bad], sep)), &cfg, &vocab)
                .unwrap();
        assert!(worse.prob_entailed < base.prob_entailed);
    }

    fn episode(actions: Vec<u32>, horizon: usize) -> Episode {
        let lim = MdpLimits::new(horizon, 64).unwrap();
        let n = actions.len();
        Episode::new(
            TokenSeq::context(vec![], 0).unwrap(),
            actions,
            vec![-0.5; n],
            vec![0.0; n],
            0,
            &lim,
        )
        .unwrap()
    }

    #[test]
    fn nli_reward_is_terminal_only() {
        let ep = episode(vec![1, 2, 1, 2, 0], 8);
        let j = EntailmentJudgment::from_prob((-4.0_f64).exp());
        let r = nli_reward(&ep, &j).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(&r[..4], &[0.0; 4]);
        assert!((r[4] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn fully_entailed_gives_zero_vector() {
        let ep = episode(vec![1, 0], 8);
        let j = EntailmentJudgment::from_prob(1.0);
        assert_eq!(nli_reward(&ep, &j).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn eos_only_episode_pays_vacuous_entailment() {
        let ep = episode(vec![0], 8);
        let j = EntailmentJudgment::from_prob(1.0);
        assert_eq!(nli_reward(&ep, &j).unwrap(), vec![0.0]);
    }

    fn tiny_policy(seed: u64) -> PolicyParams {
        PolicyParams::init(3, 2, 2, 3, false, None, 0.3, seed)
    }

    #[test]
    fn kl_reward_zero_when_current_equals_anchor() {
        let p = tiny_policy(1);
        let ep = episode(vec![1, 2, 0], 8);
        let cfg = RewardConfig {
            kl_mode: KlMode::PerToken,
            ..RewardConfig::default()
        };
        let r = kl_reward(&ep, &p, &p, &cfg).unwrap();
        assert!(r.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn kl_modes_agree_in_sum() {
        let anchor = tiny_policy(1);
        let current = tiny_policy(2);
        let ep = episode(vec![1, 2, 1, 0], 8);
        let per = kl_reward(
            &ep,
            &anchor,
            &current,
            &RewardConfig {
                kl_mode: KlMode::PerToken,
                ..RewardConfig::default()
            },
        )
        .unwrap();
        let acc = kl_reward(
            &ep,
            &anchor,
            &current,
            &RewardConfig {
                kl_mode: KlMode::SequenceAccumulated,
                ..RewardConfig::default()
            },
        )
        .unwrap();
        let sp: f64 = per.iter().sum();
        let sa: f64 = acc.iter().sum();
        assert!((sp - sa).abs() < 1e-12);
        assert!(acc[..acc.len() - 1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_expectation_equals_negative_exact_kl() {
        // E_{a ~ current}[r_kl(a)] = -KL(current || anchor) <= 0.
        let anchor = tiny_policy(3);
        let current = tiny_policy(4);
        let ctx = TokenSeq::context(vec![], 0).unwrap();
        for t in 0..3 {
            let prefix = TokenSeq::prefix(vec![1; t], 0).unwrap();
            let l = logits(&current, &ctx, &prefix).unwrap();
            let probs = softmax(&l);
            let mut expectation = 0.0;
            for (a, &p) in probs.iter().enumerate() {
                let r = action_logprob(&anchor, &ctx, &prefix, a as u32).unwrap()
                    - action_logprob(&current, &ctx, &prefix, a as u32).unwrap();
                expectation += p * r;
            }
            let kl = exact_state_kl(&current, &anchor, &ctx, &prefix).unwrap();
            assert!((expectation + kl).abs() < 1e-9);
            assert!(expectation <= 1e-12);
        }
    }

    #[test]
    fn combined_reward_hand_example() {
        // alpha = 0.2, per-token KL [-0.1, 0.3], NLI terminal -2, length 2.
        let mut ep = episode(vec![1, 0], 8);
        let j = EntailmentJudgment::from_prob((-2.0_f64).exp());
        let nli = nli_reward(&ep, &j).unwrap();
        let kl = [-0.1, 0.3];
        let alpha = 0.2;
        let combined: Vec<f64> = nli
            .iter()
            .zip(kl.iter())
            .map(|(&n, &k)| (1.0 - alpha) * n + alpha * k)
            .collect();
        assert!((combined[0] + 0.02).abs() < 1e-12);
        assert!((combined[1] + 1.54).abs() < 1e-12);
        // Alpha extremes via the full path.
        let anchor = tiny_policy(5);
        combined_reward(
            &mut ep,
            &j,
            &anchor,
            &anchor,
            &RewardConfig {
                alpha: 0.0,
                ..RewardConfig::default()
            },
        )
        .unwrap();
        assert_eq!(ep.rewards, nli);
        combined_reward(
            &mut ep,
            &j,
            &anchor,
            &anchor,
            &RewardConfig {
                alpha: 1.0,
                ..RewardConfig::default()
            },
        )
        .unwrap();
        assert!(ep.rewards.iter().all(|&r| r.abs() < 1e-12));
    }

    #[test]
    fn combined_reward_is_affine_in_alpha() {
        let anchor = tiny_policy(6);
        let current = tiny_policy(7);
        let j = EntailmentJudgment::from_prob(0.4);
        let at = |alpha: f64| {
            let mut ep = episode(vec![1, 2, 0], 8);
            combined_reward(
                &mut ep,
                &j,
                &anchor,
                &current,
                &RewardConfig {
                    alpha,
                    ..RewardConfig::default()
                },
            )
            .unwrap();
            ep.rewards
        };
        let r0 = at(0.0);
        let r5 = at(0.5);
        let r1 = at(1.0);
        for i in 0..r0.len() {
            assert!((r5[i] - 0.5 * (r0[i] + r1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn entailment_rate_counts_and_edges() {
        let cfg = RewardConfig::default();
        let js: Vec<_> = [1.0, 0.018, 0.6]
            .iter()
            .map(|&p| EntailmentJudgment::from_prob(p))
            .collect();
        assert!((entailment_rate(&js, &cfg).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let all: Vec<_> = (0..4).map(|_| EntailmentJudgment::from_prob(1.0)).collect();
        assert_eq!(entailment_rate(&all, &cfg).unwrap(), 1.0);
        assert!(entailment_rate(&[], &cfg).is_err());
        // Threshold monotonicity.
        let mut last = 1.0;
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let rate = entailment_rate(
                &js,
                &RewardConfig {
                    entail_threshold: thr,
                    ..cfg
                },
            )
            .unwrap();
            assert!(rate <= last + 1e-12);
            last = rate;
        }
    }

    #[test]
    fn remote_judge_round_trip_over_streams() {
        // Precompute responses for two requests and replay them.
        let responses = b"{\"prob_entailed\":0.75}\n{\"prob_entailed\":1.0}\n".to_vec();
        let judge = RemoteJudge::from_streams(Vec::new(), std::io::Cursor::new(responses));
        let doc = seq(vec![4, 24, 34]);
        let sum = seq(vec![4, 24, 34]);
        let j1 = judge.judge(&doc, &sum).unwrap();
        assert_eq!(j1.prob_entailed, 0.75);
        assert!((j1.log_prob - 0.75_f64.ln()).abs() < 1e-12);
        let j2 = judge.judge(&doc, &sum).unwrap();
        assert_eq!(j2.prob_entailed, 1.0);
        // The requests were serialized as line-delimited JSON.
        let io = judge.io.lock().unwrap();
        let sent = String::from_utf8(io.0.clone()).unwrap();
        let mut lines = sent.lines();
        let first: JudgeRequest = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(first.document, vec![4, 24, 34]);
        assert!(lines.next().is_some());
    }
}
