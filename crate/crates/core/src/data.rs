//! Graded candidate lists, adjacent-level preference pairs and corpus IO.
//!
//! # File formats
//!
//! Corpus: one JSON object per line,
//!
//! ```text
//! {"query_id":"q1","query":"...","split":"train","candidates":[{"doc_id":"d1","text":"...","rank":1}, ...]}
//! ```
//!
//! `split` is optional (defaults to `test`). Candidates may appear in any order;
//! they are sorted by `rank`, which must be exactly `1..=N`.
//!
//! Qrels: TREC four-column whitespace-separated text, `qid 0 docid grade`.
//! Candidates without a qrels line get grade 0.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::lexicon;

/// Highest grade on the default 0–3 scale.
pub const MAX_GRADE: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc_id: String,
    pub text: String,
    pub grade: u8,
    /// 1-based position in the first-stage list.
    pub original_rank: usize,
}

/// One query with its first-stage candidates, kept in `original_rank` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingInstance {
    pub query_id: String,
    pub query_text: String,
    pub candidates: Vec<Candidate>,
    pub split: Split,
}

impl RankingInstance {
    pub fn validate(&self, max_grade: u8) -> Result<()> {
        let n = self.candidates.len();
        if n == 0 {
            return Err(Error::Invalid(format!("query {} has no candidates", self.query_id)));
        }
        let mut seen_ranks = vec![false; n + 1];
        let mut seen_ids = HashSet::new();
        for c in &self.candidates {
            if c.original_rank == 0 || c.original_rank > n || seen_ranks[c.original_rank] {
                return Err(Error::Invalid(format!(
                    "query {}: original ranks are not a permutation of 1..={n}",
                    self.query_id
                )));
            }
            seen_ranks[c.original_rank] = true;
            if !seen_ids.insert(c.doc_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "query {}: duplicate doc id {}",
                    self.query_id, c.doc_id
                )));
            }
            if c.grade > max_grade {
                return Err(Error::Invalid(format!(
                    "query {}: grade {} of {} exceeds max grade {max_grade}",
                    self.query_id, c.grade, c.doc_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.doc_id == doc_id)
    }

    pub fn grades(&self) -> Vec<u8> {
        self.candidates.iter().map(|c| c.grade).collect()
    }
}

/// A chosen/rejected pair whose grades differ by exactly one level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub chosen_doc_id: String,
    pub rejected_doc_id: String,
    pub grade_chosen: u8,
    pub grade_rejected: u8,
}

/// Adjacent-level pairs only: every `(a, b)` with `grade(a) = grade(b) + 1`,
/// ordered by (chosen rank, rejected rank). Wider gaps are discarded.
pub fn build_pairs(instance: &RankingInstance) -> Vec<PreferencePair> {
    let mut by_rank: Vec<&Candidate> = instance.candidates.iter().collect();
    by_rank.sort_by_key(|c| c.original_rank);
    let mut pairs = Vec::new();
    for chosen in &by_rank {
        for rejected in &by_rank {
            if chosen.grade == rejected.grade + 1 {
                pairs.push(PreferencePair {
                    query_id: instance.query_id.clone(),
                    chosen_doc_id: chosen.doc_id.clone(),
                    rejected_doc_id: rejected.doc_id.clone(),
                    grade_chosen: chosen.grade,
                    grade_rejected: rejected.grade,
                });
            }
        }
    }
    pairs
}

/// Seeded subsample down to `cap` pairs, preserving the input order.
pub fn cap_pairs(pairs: Vec<PreferencePair>, cap: usize, seed: u64) -> Vec<PreferencePair> {
    if pairs.len() <= cap {
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, pairs.len(), cap).into_vec();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();
    pairs
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if keep.peek() == Some(&i) {
                keep.next();
                Some(p)
            } else {
                None
            }
        })
        .collect()
}

/// A positive document and its strictly-lower-graded negatives, used to probe
/// heads during selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionProbe {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Positive = highest grade (best original rank among ties); negatives are
/// all strictly lower-graded candidates in original-rank order, capped.
/// `None` when the instance has no grade gap.
pub fn selection_probe(instance: &RankingInstance, negative_cap: usize) -> Option<SelectionProbe> {
    let positive = instance
        .candidates
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.grade
                .cmp(&b.grade)
                .then(b.original_rank.cmp(&a.original_rank))
        })
        .map(|(i, _)| i)?;
    let top = instance.candidates[positive].grade;
    let mut negatives: Vec<usize> = (0..instance.len())
        .filter(|&i| instance.candidates[i].grade < top)
        .collect();
    negatives.sort_by_key(|&i| instance.candidates[i].original_rank);
    negatives.truncate(negative_cap);
    if negatives.is_empty() {
        return None;
    }
    Some(SelectionProbe {
        positive,
        negatives,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_queries: usize,
    /// The last `test_queries` instances are tagged `test`, the rest `train`.
    pub test_queries: usize,
    pub n_docs_per_query: usize,
    /// Number of grade levels; grades run `0..grade_levels`.
    pub grade_levels: u8,
    pub query_terms: usize,
    pub doc_len: usize,
    /// Std of the Gaussian noise added to keyword overlap by the simulated retriever.
    pub retriever_noise: f64,
    /// Relative frequency of each successive grade is this ratio times the previous.
    pub grade_decay: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_queries: 250,
            test_queries: 50,
            n_docs_per_query: 20,
            grade_levels: 4,
            query_terms: 4,
            doc_len: 5,
            retriever_noise: 1.0,
            grade_decay: 0.6,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_docs_per_query < 4 {
            return fail(format!("n_docs_per_query {} < 4", self.n_docs_per_query));
        }
        if self.grade_levels < 2 {
            return fail(format!("grade_levels {} < 2", self.grade_levels));
        }
        let max_grade = (self.grade_levels - 1) as usize;
        if self.query_terms < max_grade || self.doc_len < max_grade {
            return fail(format!(
                "query_terms and doc_len must be at least the max grade {max_grade}"
            ));
        }
        if self.query_terms + 1 >= lexicon().len() {
            return fail("query_terms too large for the lexicon".into());
        }
        if self.test_queries > self.n_queries || self.n_queries == 0 {
            return fail("need 0 < n_queries and test_queries <= n_queries".into());
        }
        if !(self.retriever_noise >= 0.0 && self.grade_decay > 0.0) {
            return fail("retriever_noise must be >= 0 and grade_decay > 0".into());
        }
        Ok(())
    }
}

/// Deterministic graded-relevance corpus.
///
/// Each query is a bag of distinct lexicon words. A grade-`g` document holds
/// exactly `g` distinct query words plus filler drawn from the rest of the
/// lexicon. First-stage order sorts by overlap plus Gaussian noise, which
/// scatters relevant documents into the middle of the list.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<RankingInstance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = lexicon();
    let levels = config.grade_levels as usize;
    let weights: Vec<f64> = (0..levels).map(|g| config.grade_decay.powi(g as i32)).collect();
    let total_w: f64 = weights.iter().sum();
    let max_grade = (levels - 1) as u8;

    let mut out = Vec::with_capacity(config.n_queries);
    for q in 0..config.n_queries {
        let query_idx = index::sample(&mut rng, words.len(), config.query_terms).into_vec();
        let query_set: HashSet<usize> = query_idx.iter().copied().collect();
        let filler_pool: Vec<usize> = (0..words.len()).filter(|i| !query_set.contains(i)).collect();
        let query_text = query_idx.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");

        let mut docs: Vec<(String, String, u8, f64)> = Vec::with_capacity(config.n_docs_per_query);
        for d in 0..config.n_docs_per_query {
            let grade = if d == 0 {
                max_grade
            } else {
                let mut u = rng.random::<f64>() * total_w;
                let mut g = 0;
                while g + 1 < levels && u >= weights[g] {
                    u -= weights[g];
                    g += 1;
                }
                g as u8
            };
            let planted = index::sample(&mut rng, query_idx.len(), grade as usize);
            let mut tokens: Vec<&str> = planted.iter().map(|k| words[query_idx[k]].as_str()).collect();
            while tokens.len() < config.doc_len {
                let f = filler_pool[rng.random_range(0..filler_pool.len())];
                tokens.push(words[f].as_str());
            }
            tokens.shuffle(&mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let retrieval = grade as f64 + config.retriever_noise * noise;
            docs.push((format!("q{q:04}-d{d:02}"), tokens.join(" "), grade, retrieval));
        }
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| docs[b].3.total_cmp(&docs[a].3).then(a.cmp(&b)));
        let candidates = order
            .iter()
            .enumerate()
            .map(|(rank, &i)| Candidate {
                doc_id: docs[i].0.clone(),
                text: docs[i].1.clone(),
                grade: docs[i].2,
                original_rank: rank + 1,
            })
            .collect();
        let split = if q >= config.n_queries - config.test_queries {
            Split::Test
        } else {
            Split::Train
        };
        out.push(RankingInstance {
            query_id: format!("q{q:04}"),
            query_text,
            candidates,
            split,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    doc_id: String,
    text: String,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    query_id: String,
    query: String,
    #[serde(default)]
    split: Split,
    candidates: Vec<CandidateRecord>,
}

/// Relevance judgments keyed by (query id, doc id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    grades: BTreeMap<(String, String), u8>,
}

impl Qrels {
    pub fn grade(&self, query_id: &str, doc_id: &str) -> u8 {
        self.grades
            .get(&(query_id.to_string(), doc_id.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u8) -> bool {
        self.grades
            .insert((query_id.to_string(), doc_id.to_string()), grade)
            .is_none()
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn from_instances(instances: &[RankingInstance]) -> Self {
        let mut q = Qrels::default();
        for inst in instances {
            for c in &inst.candidates {
                q.insert(&inst.query_id, &c.doc_id, c.grade);
            }
        }
        q
    }
}

pub fn parse_qrels(text: &str, source_name: &str) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let grade: u8 = cols[3]
            .parse()
            .map_err(|_| err(format!("grade {:?} is not a non-negative integer", cols[3])))?;
        if !qrels.insert(cols[0], cols[2], grade) {
            return Err(err(format!("duplicate judgment for ({}, {})", cols[0], cols[2])));
        }
    }
    Ok(qrels)
}

pub fn format_qrels(instances: &[RankingInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let mut cands: Vec<&Candidate> = inst.candidates.iter().collect();
        cands.sort_by_key(|c| c.original_rank);
        for c in cands {
            writeln!(out, "{} 0 {} {}", inst.query_id, c.doc_id, c.grade).expect("string write");
        }
    }
    out
}

/// Parses a corpus; grades come from `qrels` (missing → 0).
pub fn parse_corpus(text: &str, source_name: &str, qrels: &Qrels) -> Result<Vec<RankingInstance>> {
    let mut out = Vec::new();
    let mut seen_queries = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            reason,
        };
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !seen_queries.insert(rec.query_id.clone()) {
            return Err(err(format!("duplicate query id {}", rec.query_id)));
        }
        let mut candidates: Vec<Candidate> = rec
            .candidates
            .into_iter()
            .map(|c| Candidate {
                grade: qrels.grade(&rec.query_id, &c.doc_id),
                doc_id: c.doc_id,
                text: c.text,
                original_rank: c.rank,
            })
            .collect();
        candidates.sort_by_key(|c| c.original_rank);
        let inst = RankingInstance {
            query_id: rec.query_id,
            query_text: rec.query,
            candidates,
            split: rec.split,
        };
        inst.validate(u8::MAX).map_err(|e| err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn format_corpus(instances: &[RankingInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let mut cands: Vec<&Candidate> = inst.candidates.iter().collect();
        cands.sort_by_key(|c| c.original_rank);
        let rec = QueryRecord {
            query_id: inst.query_id.clone(),
            query: inst.query_text.clone(),
            split: inst.split,
            candidates: cands
                .into_iter()
                .map(|c| CandidateRecord {
                    doc_id: c.doc_id.clone(),
                    text: c.text.clone(),
                    rank: c.original_rank,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read(path)?, &path.display().to_string())
}

pub fn load_corpus(path: impl AsRef<Path>, qrels: &Qrels) -> Result<Vec<RankingInstance>> {
    let path = path.as_ref();
    parse_corpus(&read(path)?, &path.display().to_string(), qrels)
}

/// Writes the corpus and its qrels side by side.
pub fn save_corpus(
    instances: &[RankingInstance],
    corpus_path: impl AsRef<Path>,
    qrels_path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(corpus_path.as_ref(), format_corpus(instances))
        .map_err(|e| Error::io(&corpus_path, e))?;
    std::fs::write(qrels_path.as_ref(), format_qrels(instances)).map_err(|e| Error::io(&qrels_path, e))
}

/// Grade per doc id for one query, for metric computation.
pub fn grade_map(instance: &RankingInstance) -> HashMap<String, u8> {
    instance
        .candidates
        .iter()
        .map(|c| (c.doc_id.clone(), c.grade))
        .collect()
}
