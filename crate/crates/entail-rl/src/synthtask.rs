//! Fact-world corpus: documents are lists of (entity, attribute, value)
//! triples joined by a separator token; references are fact subsets whose
//! value tokens are independently corrupted with probability `p_halluc`.
//! Corruption only ever swaps the value for one that does not co-occur with
//! the same (entity, attribute) pair in the document, so a reference is
//! entailed iff no fact was corrupted.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::mdp::{TokenId, TokenSeq, Vocabulary};
use crate::{Error, Result};

/// A single grounded proposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fact {
    pub entity: TokenId,
    pub attribute: TokenId,
    pub value: TokenId,
}

/// Render facts as `e a v [sep] e a v ...` (no trailing separator).
pub fn render_facts(facts: &[Fact], separator_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(facts.len() * 4);
    for (i, f) in facts.iter().enumerate() {
        if i > 0 {
            out.push(separator_id);
        }
        out.extend_from_slice(&[f.entity, f.attribute, f.value]);
    }
    out
}

/// Parse a token stream back into facts. `None` means malformed. An empty
/// stream parses as zero facts.
pub fn parse_facts(tokens: &[TokenId], vocab: &Vocabulary) -> Option<Vec<Fact>> {
    if tokens.is_empty() {
        return Some(Vec::new());
    }
    let sep = vocab.separator_id()?;
    let ranges = vocab.fact_ranges()?;
    let mut facts = Vec::new();
    for segment in tokens.split(|&t| t == sep) {
        match segment {
            [e, a, v] if ranges.is_entity(*e) && ranges.is_attribute(*a) && ranges.is_value(*v) => {
                facts.push(Fact {
                    entity: *e,
                    attribute: *a,
                    value: *v,
                });
            }
            _ => return None,
        }
    }
    Some(facts)
}

/// Corpus generation parameters.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_entities: u32,
    pub n_attributes: u32,
    pub n_values: u32,
    /// Facts per document (K).
    pub facts_per_doc: usize,
    /// Facts per reference summary (M <= K).
    pub facts_per_ref: usize,
    /// Per-reference-fact value-corruption probability.
    pub p_halluc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_entities: 20,
            n_attributes: 10,
            n_values: 30,
            facts_per_doc: 6,
            facts_per_ref: 2,
            p_halluc: 0.3,
            n_train: 8000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let space = self.n_entities as u64 * self.n_attributes as u64 * self.n_values as u64;
        if (self.facts_per_doc as u64) > space {
            return Err(Error::Config(format!(
                "facts_per_doc = {} exceeds the distinct fact space ({space})",
                self.facts_per_doc
            )));
        }
        if self.facts_per_ref > self.facts_per_doc {
            return Err(Error::Config(
                "facts_per_ref must be <= facts_per_doc".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_halluc) {
            return Err(Error::Config("p_halluc must be in [0, 1]".to_string()));
        }
        if self.n_values < 2 {
            return Err(Error::Config(
                "n_values must be >= 2 so corruption has a target".to_string(),
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::fact_world(self.n_entities, self.n_attributes, self.n_values)
    }
}

/// One document/reference pair with its oracle label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub document: TokenSeq,
    pub reference: TokenSeq,
    pub ref_entailed: bool,
    pub control_prefix: Option<TokenId>,
}

impl Example {
    /// Decoding context: the document, with the control token prepended when
    /// one is requested (CTRL training) or set on the example.
    pub fn context(&self, control: Option<TokenId>, eos_id: TokenId) -> Result<TokenSeq> {
        let ctrl = control.or(self.control_prefix);
        match ctrl {
            None => Ok(self.document.clone()),
            Some(c) => {
                let mut ids = Vec::with_capacity(self.document.len() + 1);
                ids.push(c);
                ids.extend_from_slice(self.document.ids());
                TokenSeq::context(ids, eos_id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Deterministically generate the train/val/test splits.
pub fn generate_corpus(cfg: &CorpusConfig, vocab: &Vocabulary) -> Result<Corpus> {
    cfg.validate()?;
    let ranges = *vocab
        .fact_ranges()
        .ok_or_else(|| Error::Config("vocabulary has no fact ranges".to_string()))?;
    if ranges.n_entities() != cfg.n_entities
        || ranges.n_attributes() != cfg.n_attributes
        || ranges.n_values() != cfg.n_values
    {
        return Err(Error::Config(
            "vocabulary ranges do not match corpus config".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen_split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        (0..n).map(|_| generate_example(cfg, vocab, rng)).collect()
    };
    Ok(Corpus {
        train: gen_split(cfg.n_train, &mut rng)?,
        val: gen_split(cfg.n_val, &mut rng)?,
        test: gen_split(cfg.n_test, &mut rng)?,
    })
}

fn generate_example(
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let ranges = vocab.fact_ranges().expect("checked by generate_corpus");
    let sep = vocab.separator_id().expect("fact-world vocabulary");
    let eos = vocab.eos_id();

    // K distinct facts.
    let mut facts: Vec<Fact> = Vec::with_capacity(cfg.facts_per_doc);
    let mut seen = HashSet::new();
    while facts.len() < cfg.facts_per_doc {
        let f = Fact {
            entity: ranges.entities.0 + rng.gen_range(0..cfg.n_entities),
            attribute: ranges.attributes.0 + rng.gen_range(0..cfg.n_attributes),
            value: ranges.values.0 + rng.gen_range(0..cfg.n_values),
        };
        if seen.insert(f) {
            facts.push(f);
        }
    }

    // M reference facts sampled without replacement, in sampling order.
    let mut picked: Vec<usize> = Vec::with_capacity(cfg.facts_per_ref);
    while picked.len() < cfg.facts_per_ref {
        let i = rng.gen_range(0..cfg.facts_per_doc);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }

    let mut ref_facts = Vec::with_capacity(cfg.facts_per_ref);
    let mut entailed = true;
    for &i in &picked {
        let mut f = facts[i];
        if rng.gen::<f64>() < cfg.p_halluc {
            // Swap the value for one not supported by the document for this
            // (entity, attribute) pair, so the corruption is never accidental.
            let in_doc: HashSet<TokenId> = facts
                .iter()
                .filter(|g| g.entity == f.entity && g.attribute == f.attribute)
                .map(|g| g.value)
                .collect();
            let candidates: Vec<TokenId> = (ranges.values.0..ranges.values.1)
                .filter(|v| !in_doc.contains(v))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Config(
                    "infeasible corpus config: no corruption value available".to_string(),
                ));
            }
            f.value = candidates[rng.gen_range(0..candidates.len())];
            entailed = false;
        }
        ref_facts.push(f);
    }

    Ok(Example {
        document: TokenSeq::context(render_facts(&facts, sep), eos)?,
        reference: TokenSeq::context(render_facts(&ref_facts, sep), eos)?,
        ref_entailed: entailed,
        control_prefix: None,
    })
}

/// Keep exactly the examples whose reference the judge accepts, preserving
/// order.
pub fn filter_entailed(
    examples: &[Example],
    judge: &dyn crate::rewards::Judge,
    entail_threshold: f64,
) -> Result<Vec<Example>> {
    let mut kept = Vec::new();
    for ex in examples {
        let j = judge.judge(&ex.document, &ex.reference)?;
        if j.prob_entailed > entail_threshold {
            kept.push(ex.clone());
        }
    }
    Ok(kept)
}

/// Set each example's control prefix according to the judge's decision.
pub fn ctrl_annotate(
    examples: &[Example],
    judge: &dyn crate::rewards::Judge,
    entail_threshold: f64,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    let entailed_id = vocab
        .ctrl_entailed_id()
        .ok_or_else(|| Error::Config("vocabulary has no control tokens".to_string()))?;
    let not_entailed_id = vocab.ctrl_not_entailed_id().expect("paired with entailed id");
    examples
        .iter()
        .map(|ex| {
            let j = judge.judge(&ex.document, &ex.reference)?;
            let mut out = ex.clone();
            out.control_prefix = Some(if j.prob_entailed > entail_threshold {
                entailed_id
            } else {
                not_entailed_id
            });
            Ok(out)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File formats (versioned, round-trip tested).
// ---------------------------------------------------------------------------

const CORPUS_MAGIC: &str = "# entail-rl corpus v1";
const VOCAB_MAGIC: &str = "# entail-rl vocab v1";

fn ids_to_str(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn ids_from_str(s: &str) -> Result<Vec<TokenId>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|t| {
            t.parse::<TokenId>()
                .map_err(|e| Error::Config(format!("bad token id '{t}': {e}")))
        })
        .collect()
}

/// One example per line: `doc ids \t ref ids \t ref_entailed(0/1)`.
pub fn write_corpus_split(path: &Path, examples: &[Example], config_hash: &str) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CORPUS_MAGIC}")?;
    writeln!(w, "# config_hash={config_hash}")?;
    for ex in examples {
        writeln!(
            w,
            "{}\t{}\t{}",
            ids_to_str(ex.document.ids()),
            ids_to_str(ex.reference.ids()),
            u8::from(ex.ref_entailed)
        )?;
    }
    Ok(())
}

pub fn read_corpus_split(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(line)) if line == CORPUS_MAGIC => {}
        _ => {
            return Err(Error::Config(format!(
                "{}: not a corpus file (missing '{CORPUS_MAGIC}')",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (doc, reference, flag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(d), Some(r), Some(f)) => (d, r, f),
            _ => {
                return Err(Error::Config(format!(
                    "{}: corpus line needs 3 tab-separated fields",
                    path.display()
                )))
            }
        };
        out.push(Example {
            document: TokenSeq::context(ids_from_str(doc)?, vocab.eos_id())?,
            reference: TokenSeq::context(ids_from_str(reference)?, vocab.eos_id())?,
            ref_entailed: flag == "1",
            control_prefix: None,
        });
    }
    Ok(out)
}

/// Vocabulary manifest listing reserved ids and fact ranges.
pub fn write_vocab_manifest(path: &Path, vocab: &Vocabulary, config_hash: &str) -> Result<()> {
    let ranges = vocab
        .fact_ranges()
        .ok_or_else(|| Error::Config("manifest requires a fact-world vocabulary".to_string()))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{VOCAB_MAGIC}")?;
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "size={}", vocab.size())?;
    writeln!(w, "eos={}", vocab.eos_id())?;
    writeln!(w, "separator={}", vocab.separator_id().unwrap())?;
    writeln!(w, "ctrl_entailed={}", vocab.ctrl_entailed_id().unwrap())?;
    writeln!(
        w,
        "ctrl_not_entailed={}",
        vocab.ctrl_not_entailed_id().unwrap()
    )?;
    writeln!(w, "boundary={}", vocab.boundary_id().unwrap())?;
    writeln!(w, "entities={}..{}", ranges.entities.0, ranges.entities.1)?;
    writeln!(
        w,
        "attributes={}..{}",
        ranges.attributes.0, ranges.attributes.1
    )?;
    writeln!(w, "values={}..{}", ranges.values.0, ranges.values.1)?;
    Ok(())
}

pub fn read_vocab_manifest(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(VOCAB_MAGIC) {
        return Err(Error::Config(format!(
            "{}: not a vocabulary manifest",
            path.display()
        )));
    }
    let get = |key: &str| -> Result<String> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{}: missing key '{key}'", path.display())))
    };
    let parse_range = |s: &str| -> Result<(u32, u32)> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("bad range '{s}'")))?;
        Ok((
            a.parse().map_err(|e| Error::Config(format!("{e}")))?,
            b.parse().map_err(|e| Error::Config(format!("{e}")))?,
        ))
    };
    let entities = parse_range(&get("entities")?)?;
    let attributes = parse_range(&get("attributes")?)?;
    let values = parse_range(&get("values")?)?;
    let vocab = Vocabulary::fact_world(
        entities.1 - entities.0,
        attributes.1 - attributes.0,
        values.1 - values.0,
    )?;
    // The fact-world layout is canonical; verify the manifest agrees.
    let expect = |name: &str, got: &str, want: String| -> Result<()> {
        if got != want {
            return Err(Error::Config(format!(
                "{}: {name}={got} does not match canonical layout ({want})",
                path.display()
            )));
        }
        Ok(())
    };
    expect("size", &get("size")?, vocab.size().to_string())?;
    expect("eos", &get("eos")?, vocab.eos_id().to_string())?;
    expect(
        "separator",
        &get("separator")?,
        vocab.separator_id().unwrap().to_string(),
    )?;
    expect(
        "boundary",
        &get("boundary")?,
        vocab.boundary_id().unwrap().to_string(),
    )?;
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{OracleJudge, RewardConfig};

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn grammar_round_trips() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        for ex in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            let doc = parse_facts(ex.document.ids(), &vocab).expect("document parses");
            assert_eq!(doc.len(), cfg.facts_per_doc);
            let reference = parse_facts(ex.reference.ids(), &vocab).expect("reference parses");
            assert_eq!(reference.len(), cfg.facts_per_ref);
        }
    }

    #[test]
    fn label_matches_oracle() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        let judge = OracleJudge::new(RewardConfig::default(), vocab.clone());
        for ex in &corpus.train {
            let j = crate::rewards::Judge::judge(&judge, &ex.document, &ex.reference).unwrap();
            assert_eq!(ex.ref_entailed, j.prob_entailed > 0.5);
        }
    }

    #[test]
    fn p_halluc_zero_gives_all_entailed() {
        let cfg = CorpusConfig {
            p_halluc: 0.0,
            ..small_cfg()
        };
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        assert!(corpus.train.iter().all(|e| e.ref_entailed));
    }

    #[test]
    fn p_halluc_one_gives_none_entailed() {
        let cfg = CorpusConfig {
            p_halluc: 1.0,
            ..small_cfg()
        };
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        assert!(corpus.train.iter().all(|e| !e.ref_entailed));
    }

    #[test]
    fn entailed_fraction_matches_binomial() {
        // P(entailed) = (1 - p)^M.
        let cfg = CorpusConfig {
            n_train: 10_000,
            n_val: 0,
            n_test: 0,
            ..CorpusConfig::default()
        };
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        let rate = corpus.train.iter().filter(|e| e.ref_entailed).count() as f64 / 10_000.0;
        let expected = (1.0 - cfg.p_halluc).powi(cfg.facts_per_ref as i32);
        assert!(
            (rate - expected).abs() < 0.02,
            "rate {rate} vs expected {expected}"
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let a = generate_corpus(&cfg, &vocab).unwrap();
        let b = generate_corpus(&cfg, &vocab).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_keeps_exactly_entailed() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        let judge = OracleJudge::new(RewardConfig::default(), vocab.clone());
        let kept = filter_entailed(&corpus.train, &judge, 0.5).unwrap();
        let expected: Vec<_> = corpus
            .train
            .iter()
            .filter(|e| e.ref_entailed)
            .cloned()
            .collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn filter_identity_and_empty_edges() {
        let vocab = CorpusConfig::default().vocabulary().unwrap();
        let judge = OracleJudge::new(RewardConfig::default(), vocab.clone());
        let all = generate_corpus(
            &CorpusConfig {
                p_halluc: 0.0,
                ..small_cfg()
            },
            &vocab,
        )
        .unwrap();
        assert_eq!(filter_entailed(&all.train, &judge, 0.5).unwrap(), all.train);
        let none = generate_corpus(
            &CorpusConfig {
                p_halluc: 1.0,
                ..small_cfg()
            },
            &vocab,
        )
        .unwrap();
        assert!(filter_entailed(&none.train, &judge, 0.5).unwrap().is_empty());
    }

    #[test]
    fn ctrl_annotation_matches_label_and_is_idempotent() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        let judge = OracleJudge::new(RewardConfig::default(), vocab.clone());
        let once = ctrl_annotate(&corpus.train, &judge, 0.5, &vocab).unwrap();
        for (ex, ann) in corpus.train.iter().zip(&once) {
            let want = if ex.ref_entailed {
                vocab.ctrl_entailed_id()
            } else {
                vocab.ctrl_not_entailed_id()
            };
            assert_eq!(ann.control_prefix, want);
        }
        let twice = ctrl_annotate(&once, &judge, 0.5, &vocab).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn corpus_file_round_trip() {
        let cfg = small_cfg();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = generate_corpus(&cfg, &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        write_corpus_split(&path, &corpus.train, "deadbeef").unwrap();
        let back = read_corpus_split(&path, &vocab).unwrap();
        assert_eq!(back, corpus.train);
    }

    #[test]
    fn vocab_manifest_round_trip() {
        let vocab = CorpusConfig::default().vocabulary().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        write_vocab_manifest(&path, &vocab, "deadbeef").unwrap();
        let back = read_vocab_manifest(&path).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = CorpusConfig {
            n_entities: 1,
            n_attributes: 1,
            n_values: 2,
            facts_per_doc: 6,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn malformed_streams_do_not_parse() {
        let vocab = CorpusConfig::default().vocabulary().unwrap();
        let r = *vocab.fact_ranges().unwrap();
        let sep = vocab.separator_id().unwrap();
        // Wrong arity.
        assert!(parse_facts(&[r.entities.0, r.attributes.0], &vocab).is_none());
        // Wrong range order.
        assert!(parse_facts(&[r.values.0, r.attributes.0, r.entities.0], &vocab).is_none());
        // Trailing separator leaves an empty segment.
        assert!(
            parse_facts(&[r.entities.0, r.attributes.0, r.values.0, sep], &vocab).is_none()
        );
        // Empty is vacuously fine.
        assert_eq!(parse_facts(&[], &vocab), Some(vec![]));
    }
}
