//! Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr.
//!
//! Input is whitespace-tokenized; no stemming or punctuation handling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

/// A candidate caption and its references.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Config("an evaluation pair needs at least one reference".into()));
        }
        Ok(Self { candidate, references })
    }

    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        let words = |s: &str| tokenize(s).into_iter().map(str::to_owned).collect::<Vec<_>>();
        Self::new(words(candidate), references.iter().map(|r| words(r.as_ref())).collect())
    }
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    if corpus.iter().any(|p| p.references.is_empty()) {
        return Err(Error::Config("an evaluation pair needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts and
/// a brevity penalty against the closest reference length (shorter wins
/// ties).
pub fn bleu(corpus: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be in 1..=4, got {n}")));
    }
    check_corpus(corpus)?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for pair in corpus {
        let c = pair.candidate.len();
        cand_len += c;
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngrams(&pair.candidate, k);
            let mut max_ref: Counts = HashMap::new();
            for r in &pair.references {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in cand {
                matched[k - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_precision.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over the corpus of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let sum: f64 = corpus
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / corpus.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderMode {
    /// tf-idf cosine similarity.
    #[default]
    Base,
    /// Clipped counts and a Gaussian length penalty (`σ = 6`).
    D,
}

const CIDER_SIGMA: f64 = 6.0;

/// Corpus CIDEr, scaled by 10. Document frequencies come from the
/// references; each n-gram order 1..4 has equal weight.
pub fn cider(corpus: &[EvalPair], mode: CiderMode) -> Result<f64> {
    check_corpus(corpus)?;
    if corpus.len() == 1 {
        log::warn!("CIDEr over a single image: every document frequency is 1 and idf is degenerate");
    }
    let images = corpus.len() as f64;
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: Counts = HashMap::new();
        for pair in corpus {
            let mut seen: Counts = HashMap::new();
            for r in &pair.references {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, 1);
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| {
            let d = df.get(g).copied().unwrap_or(0) as f64;
            match mode {
                CiderMode::Base => (images / d.max(1.0)).ln(),
                CiderMode::D => images.ln() - d.max(1.0).ln(),
            }
        };
        let vector = |tokens: &[String]| -> (HashMap<Vec<String>, f64>, f64) {
            let counts = ngrams(tokens, n);
            let total: usize = counts.values().sum();
            let v: HashMap<Vec<String>, f64> = counts
                .into_iter()
                .map(|(g, c)| {
                    let tf = match mode {
                        CiderMode::Base => c as f64 / total as f64,
                        CiderMode::D => c as f64,
                    };
                    (g.to_vec(), tf * idf(g))
                })
                .collect();
            let mut sq: Vec<f64> = v.values().map(|x| x * x).collect();
            sq.sort_by(f64::total_cmp);
            let norm = sq.iter().sum::<f64>().sqrt();
            (v, norm)
        };
        let mut order_sum = 0.0;
        for pair in corpus {
            let (cv, cn) = vector(&pair.candidate);
            let mut per_ref = 0.0;
            for r in &pair.references {
                let (rv, rn) = vector(r);
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let mut terms: Vec<f64> = cv
                    .iter()
                    .filter_map(|(g, &x)| {
                        rv.get(g).map(|&y| match mode {
                            CiderMode::Base => x * y,
                            CiderMode::D => x.min(y) * y,
                        })
                    })
                    .collect();
                terms.sort_by(f64::total_cmp);
                let mut sim = terms.iter().sum::<f64>() / (cn * rn);
                if mode == CiderMode::D {
                    let delta = pair.candidate.len() as f64 - r.len() as f64;
                    sim *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                }
                per_ref += sim;
            }
            order_sum += per_ref / pair.references.len() as f64;
        }
        score += order_sum / images / 4.0;
    }
    Ok(10.0 * score)
}

/// Flat metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
}

pub fn evaluate(corpus: &[EvalPair], mode: CiderMode) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(corpus, 1)?,
        bleu2: bleu(corpus, 2)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus, mode)?,
    })
}
