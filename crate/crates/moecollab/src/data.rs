//! Dataset ingestion (JSONL) and a synthetic multi-domain corpus generator.
//!
//! The generator gives every (domain, class) pair its own disjoint word pool
//! so desk-scale experiments have a known-learnable structure: at zero noise
//! a unigram-count classifier is perfect. Label names are shared across
//! domains ("c0", "c1", …) so that every domain's label list is a prefix of
//! the widest one — the layout the combination rule requires.

use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One classification example with its originating domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
    pub domain: usize,
}

/// A set of examples plus the name tables that give ids meaning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub domain_names: Vec<String>,
    /// Global label universe; domain d uses the first `classes_per_domain[d]`
    /// entries.
    pub label_names: Vec<String>,
    pub classes_per_domain: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusMeta {
    domain_names: Vec<String>,
    label_names: Vec<String>,
    classes_per_domain: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineRecord {
    text: String,
    label: String,
    domain: String,
}

impl Corpus {
    /// Examples belonging to one domain, order preserved.
    pub fn domain_slice(&self, domain: usize) -> Vec<Example> {
        self.examples
            .iter()
            .filter(|e| e.domain == domain)
            .cloned()
            .collect()
    }

    /// Label names used by one domain (a prefix of the universe).
    pub fn domain_labels(&self, domain: usize) -> Result<Vec<String>> {
        let c = *self
            .classes_per_domain
            .get(domain)
            .ok_or_else(|| Error::Validation(format!("unknown domain id {domain}")))?;
        Ok(self.label_names[..c].to_vec())
    }

    /// Writes `<path>` as JSONL and `<stem>.meta.json` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for ex in &self.examples {
            let rec = LineRecord {
                text: ex.text.clone(),
                label: self.label_names[ex.label].clone(),
                domain: self.domain_names[ex.domain].clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out)?;
        }
        out.flush()?;
        let meta = CorpusMeta {
            domain_names: self.domain_names.clone(),
            label_names: self.label_names.clone(),
            classes_per_domain: self.classes_per_domain.clone(),
        };
        let meta_file = File::create(meta_path(path))?;
        serde_json::to_writer_pretty(BufWriter::new(meta_file), &meta)?;
        Ok(())
    }

    /// Loads a corpus saved by [`Corpus::save`].
    pub fn load(path: &Path) -> Result<Corpus> {
        let meta: CorpusMeta = serde_json::from_reader(BufReader::new(File::open(
            meta_path(path),
        )?))?;
        let examples = load_jsonl(path, &meta.label_names, &meta.domain_names)?;
        Ok(Corpus {
            examples,
            domain_names: meta.domain_names,
            label_names: meta.label_names,
            classes_per_domain: meta.classes_per_domain,
        })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta.json")
}

/// Reads `{"text", "label", "domain"}` JSON objects, one per line; label and
/// domain are names resolved against the given ordered lists. Errors carry
/// 1-based line numbers.
pub fn load_jsonl(path: &Path, label_names: &[String], domain_names: &[String]) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let label = label_names
            .iter()
            .position(|n| *n == rec.label)
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("unknown label {:?}", rec.label),
            })?;
        let domain = domain_names
            .iter()
            .position(|n| *n == rec.domain)
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("unknown domain {:?}", rec.domain),
            })?;
        examples.push(Example {
            text: rec.text,
            label,
            domain,
        });
    }
    Ok(examples)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_domains: usize,
    /// One class count per domain; may differ to exercise heterogeneous
    /// expert output spaces.
    pub classes_per_domain: Vec<usize>,
    pub vocab_words_per_class: usize,
    pub samples_per_class: usize,
    pub noise_rate: f64,
    pub doc_length: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_domains: 4,
            classes_per_domain: vec![3; 4],
            vocab_words_per_class: 20,
            samples_per_class: 40,
            noise_rate: 0.15,
            doc_length: 12,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 1 {
            return Err(Error::Validation("num_domains must be >= 1".into()));
        }
        if self.classes_per_domain.len() != self.num_domains {
            return Err(Error::Validation(format!(
                "classes_per_domain has {} entries for {} domains",
                self.classes_per_domain.len(),
                self.num_domains
            )));
        }
        if self.classes_per_domain.iter().any(|&c| c < 1) {
            return Err(Error::Validation("every domain needs >= 1 class".into()));
        }
        for (name, v) in [
            ("vocab_words_per_class", self.vocab_words_per_class),
            ("samples_per_class", self.samples_per_class),
            ("doc_length", self.doc_length),
        ] {
            if v < 1 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Validation(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

fn pool_word(domain: usize, class: usize, i: usize) -> String {
    format!("d{domain}c{class}w{i}")
}

/// Generates the synthetic corpus: disjoint per-(domain, class) word pools,
/// `doc_length` words per document, words flipped to a random other pool with
/// probability `noise_rate`. Deterministic per seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let c_max = *spec.classes_per_domain.iter().max().unwrap();
    let pools: Vec<(usize, usize)> = (0..spec.num_domains)
        .flat_map(|d| (0..spec.classes_per_domain[d]).map(move |c| (d, c)))
        .collect();

    let mut examples = Vec::new();
    for d in 0..spec.num_domains {
        for class in 0..spec.classes_per_domain[d] {
            for _ in 0..spec.samples_per_class {
                let mut words = Vec::with_capacity(spec.doc_length);
                for _ in 0..spec.doc_length {
                    let own = rng.gen_range(0..spec.vocab_words_per_class);
                    if pools.len() > 1 && rng.gen_range(0.0..1.0) < spec.noise_rate {
                        // pick a different pool, then a word from it
                        let mut other = rng.gen_range(0..pools.len() - 1);
                        let own_pool = pools.iter().position(|&p| p == (d, class)).unwrap();
                        if other >= own_pool {
                            other += 1;
                        }
                        let (od, oc) = pools[other];
                        let i = rng.gen_range(0..spec.vocab_words_per_class);
                        words.push(pool_word(od, oc, i));
                    } else {
                        words.push(pool_word(d, class, own));
                    }
                }
                examples.push(Example {
                    text: words.join(" "),
                    label: class,
                    domain: d,
                });
            }
        }
    }
    Ok(Corpus {
        examples,
        domain_names: (0..spec.num_domains).map(|d| format!("d{d}")).collect(),
        label_names: (0..c_max).map(|c| format!("c{c}")).collect(),
        classes_per_domain: spec.classes_per_domain.clone(),
    })
}

/// Stratified train/eval split by (domain, label); deterministic per seed.
/// Every stratum must hold at least 2 examples so both sides are non-empty.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut strata: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, ex) in corpus.examples.iter().enumerate() {
        strata.entry((ex.domain, ex.label)).or_default().push(i);
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for ((d, l), mut idx) in strata {
        if idx.len() < 2 {
            return Err(Error::Validation(format!(
                "stratum (domain {d}, label {l}) has {} example(s); need >= 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        eval_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let pick = |idx: &[usize]| Corpus {
        examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
        domain_names: corpus.domain_names.clone(),
        label_names: corpus.label_names.clone(),
        classes_per_domain: corpus.classes_per_domain.clone(),
    };
    Ok((pick(&train_idx), pick(&eval_idx)))
}
