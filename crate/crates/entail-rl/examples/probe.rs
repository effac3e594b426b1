//! Diagnostic probe: sample from a policy checkpoint and report how often
//! sampled facts are supported by the document, the conditional probabilities
//! at format-critical states (EOS leak after one fact, the window-copy chain
//! for the last document fact), and the anchor log-probabilities of the
//! degenerate attractors (empty / single-fact / repeated-fact summaries).
//!
//! Usage: cargo run --release --example probe -- <config.toml> <policy.ckpt>

use entail_rl::harness::{load_config, load_policy};
use entail_rl::mdp::{MdpLimits, TokenSeq};
use entail_rl::metrics::derive_seed;
use entail_rl::policy::{
    action_logprob, sample_episode, trajectory_logprob, DecodeConfig, Net, ValueParams,
};
use entail_rl::rewards::{oracle_entailment, RewardConfig};
use entail_rl::synthtask::{generate_corpus, parse_facts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(std::path::Path::new(&args[1])).unwrap();
    let params = load_policy(std::path::Path::new(&args[2])).unwrap();
    let vocab = cfg.corpus.vocabulary().unwrap();
    let corpus = generate_corpus(&cfg.corpus, &vocab).unwrap();
    let limits = cfg.limits.to_limits().unwrap();
    let eos = vocab.eos_id();
    let rcfg = RewardConfig::default();
    let vparams = ValueParams {
        net: Net::zeros(params.net.shape.clone()),
    };

    let n_docs = 200usize;
    let per_doc = 20usize;
    let mut hist = [0usize; 8]; // by n_unsupported, idx 7 = malformed
    let mut n_facts_total = 0usize;
    let mut len_sum = 0usize;
    for (i, ex) in corpus.train.iter().take(n_docs).enumerate() {
        let context = ex.context(None, eos).unwrap();
        for j in 0..per_doc {
            let dc = DecodeConfig::sample(1.0, derive_seed(7, (i * per_doc + j) as u64)).unwrap();
            let ep = sample_episode(&params, &vparams, &context, &dc, &limits, eos).unwrap();
            let summary = ep.summary(eos, &limits).unwrap();
            len_sum += ep.actions.iter().filter(|&&a| a != eos).count();
            let j = oracle_entailment(&ex.document, &summary, &rcfg, &vocab).unwrap();
            if j.parse_ok {
                hist[j.n_unsupported.min(6)] += 1;
                n_facts_total += j.n_facts;
            } else {
                hist[7] += 1;
            }
        }
    }
    let n = (n_docs * per_doc) as f64;
    println!("samples={n} mean_len={:.2}", len_sum as f64 / n);
    println!("malformed={:.3}", hist[7] as f64 / n);
    for (k, &c) in hist.iter().take(7).enumerate() {
        if c > 0 {
            println!("n_unsupported={k}: {:.3}", c as f64 / n);
        }
    }
    println!("mean_facts={:.2}", n_facts_total as f64 / (n - hist[7] as f64));

    // Averaged transition probabilities along sampled trajectories, plus the
    // copy-chain probability of emitting the last document fact.
    let sep = vocab.separator_id().unwrap();
    let mut p_eos_1 = 0.0; // after a sampled complete first fact
    let mut p_eos_2 = 0.0; // after two sampled facts
    let mut copy_chain = 0.0; // p(e6)*p(a6|e6)*p(v6|e6,a6) from empty prefix
    let mut chain_parts = [0.0f64; 3];
    let n_probe = 100usize;
    for (i, ex) in corpus.train.iter().take(n_probe).enumerate() {
        let context = ex.context(None, eos).unwrap();
        let dc = DecodeConfig::sample(1.0, derive_seed(99, i as u64)).unwrap();
        let ep = sample_episode(&params, &vparams, &context, &dc, &limits, eos).unwrap();
        let toks: Vec<_> = ep.actions.iter().copied().filter(|&a| a != eos).collect();
        if toks.len() >= 3 {
            let pre = TokenSeq::prefix(toks[..3].to_vec(), eos).unwrap();
            p_eos_1 += action_logprob(&params, &context, &pre, eos).unwrap().exp();
        }
        if toks.len() >= 7 {
            let pre = TokenSeq::prefix(toks[..7].to_vec(), eos).unwrap();
            p_eos_2 += action_logprob(&params, &context, &pre, eos).unwrap().exp();
        }
        let doc_facts = parse_facts(ex.document.without_eos(eos), &vocab).unwrap();
        let f6 = &doc_facts[doc_facts.len() - 1];
        let lp_e = action_logprob(&params, &context, &TokenSeq::empty_prefix(), f6.entity)
            .unwrap();
        let pre_a = TokenSeq::prefix(vec![f6.entity], eos).unwrap();
        let lp_a = action_logprob(&params, &context, &pre_a, f6.attribute).unwrap();
        let pre_v = TokenSeq::prefix(vec![f6.entity, f6.attribute], eos).unwrap();
        let lp_v = action_logprob(&params, &context, &pre_v, f6.value).unwrap();
        copy_chain += (lp_e + lp_a + lp_v).exp();
        chain_parts[0] += lp_e.exp();
        chain_parts[1] += lp_a.exp();
        chain_parts[2] += lp_v.exp();
    }
    println!(
        "mean p(eos|after 1 sampled fact)={:.3e}  p(eos|after 2 facts)={:.3e}  p(copy last doc fact)={:.3e}",
        p_eos_1 / n_probe as f64,
        p_eos_2 / n_probe as f64,
        copy_chain / n_probe as f64
    );
    println!(
        "chain parts: p(e_last|empty)={:.3}  p(a_last|e)={:.3}  p(v_last|e,a)={:.3}",
        chain_parts[0] / n_probe as f64,
        chain_parts[1] / n_probe as f64,
        chain_parts[2] / n_probe as f64
    );

    // Anchor trajectory log-probs of the two candidate attractors: the empty
    // summary and the "repeat the last document fact" summary.
    let mut lp_empty = 0.0;
    let mut lp_repeat = 0.0;
    let mut lp_single = 0.0;
    for (i, ex) in corpus.train.iter().take(n_probe).enumerate() {
        let _ = i;
        let context = ex.context(None, eos).unwrap();
        let doc_facts = parse_facts(ex.document.without_eos(eos), &vocab).unwrap();
        let f6 = &doc_facts[doc_facts.len() - 1];
        lp_empty += trajectory_logprob(&params, &context, &[eos], eos).unwrap();
        lp_repeat += trajectory_logprob(
            &params,
            &context,
            &[
                f6.entity,
                f6.attribute,
                f6.value,
                sep,
                f6.entity,
                f6.attribute,
                f6.value,
                eos,
            ],
            eos,
        )
        .unwrap();
        lp_single += trajectory_logprob(
            &params,
            &context,
            &[f6.entity, f6.attribute, f6.value, eos],
            eos,
        )
        .unwrap();
    }
    println!(
        "mean anchor logprob: empty={:.2}  repeat-last-fact={:.2}  single-last-fact={:.2}",
        lp_empty / n_probe as f64,
        lp_repeat / n_probe as f64,
        lp_single / n_probe as f64
    );
    for ex in corpus.train.iter().take(3) {
        let context = ex.context(None, eos).unwrap();
        let doc_facts = parse_facts(ex.document.without_eos(eos), &vocab).unwrap();
        let f6 = &doc_facts[doc_facts.len() - 1];
        let p_eos_empty = action_logprob(&params, &context, &TokenSeq::empty_prefix(), eos).unwrap();
        let p_e6_empty =
            action_logprob(&params, &context, &TokenSeq::empty_prefix(), f6.entity).unwrap();
        let pre1 = TokenSeq::prefix(vec![f6.entity, f6.attribute, f6.value], eos).unwrap();
        let p_eos_1 = action_logprob(&params, &context, &pre1, eos).unwrap();
        let p_sep_1 = action_logprob(&params, &context, &pre1, sep).unwrap();
        let pre2 = TokenSeq::prefix(
            vec![f6.entity, f6.attribute, f6.value, sep, f6.entity, f6.attribute, f6.value],
            eos,
        )
        .unwrap();
        let p_eos_2 = action_logprob(&params, &context, &pre2, eos).unwrap();
        println!(
            "logp: eos|empty={p_eos_empty:.2} e_last|empty={p_e6_empty:.2} eos|1fact={p_eos_1:.2} sep|1fact={p_sep_1:.2} eos|2facts={p_eos_2:.2}"
        );
    }
}
