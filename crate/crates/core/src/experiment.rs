//! End-to-end runs on the synthetic corpus: data splits, caption-quality
//! evaluation and the three-way variant comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{caption_vocabulary, generate_synthetic, synthetic_examples, Example, SyntheticSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::{caption_all, SearchOptions};
use crate::metrics::{evaluate, CiderMode, EvalPair, MetricReport};
use crate::model::{ModelParams, Variant};
use crate::training::{train, TrainConfig, TrainOutcome};

/// Training and validation examples drawn from one synthetic generator, with
/// a vocabulary built from the training captions.
#[derive(Clone, Debug)]
pub struct SyntheticSplits {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub val_captions: Vec<String>,
}

pub fn synthetic_splits(
    spec: &SyntheticSpec,
    train_size: usize,
    val_size: usize,
    min_count: usize,
) -> Result<SyntheticSplits> {
    let data = generate_synthetic(spec, train_size + val_size)?;
    let (train_raw, val_raw) = data.split_at(train_size);
    let captions: Vec<&str> = train_raw.iter().map(|e| e.caption.as_str()).collect();
    let vocab = caption_vocabulary(&captions, min_count)?;
    Ok(SyntheticSplits {
        train: synthetic_examples(train_raw, &vocab),
        val: synthetic_examples(val_raw, &vocab),
        val_captions: val_raw.iter().map(|e| e.caption.clone()).collect(),
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionQuality {
    /// Fraction of generated captions identical to their reference.
    pub exact_match: f64,
    pub metrics: MetricReport,
}

/// Captions every example by beam search and scores against `references`
/// (one per example, same order).
pub fn caption_quality(
    model: &ModelParams,
    vocab: &Vocabulary,
    examples: &[Example],
    references: &[String],
    opts: &SearchOptions,
    cider_mode: CiderMode,
    threads: usize,
) -> Result<CaptionQuality> {
    if examples.len() != references.len() {
        return Err(Error::Config(format!(
            "{} examples but {} references",
            examples.len(),
            references.len()
        )));
    }
    let items: Vec<_> = examples.iter().map(|e| (e.id.clone(), e.objects.clone())).collect();
    let captions = caption_all(model, vocab, &items, opts, false, threads)?;
    let exact = captions
        .iter()
        .zip(references)
        .filter(|(c, r)| c.caption == **r)
        .count();
    let corpus = captions
        .iter()
        .zip(references)
        .map(|(c, r)| EvalPair::from_text(&c.caption, &[r]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionQuality {
        exact_match: exact as f64 / examples.len().max(1) as f64,
        metrics: evaluate(&corpus, cider_mode)?,
    })
}

/// One variant trained on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    /// Best validation loss per token.
    pub val_loss: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub exact_match: f64,
    pub epochs: usize,
}

/// Trains `variant` on `splits` and scores the best-validation checkpoint.
pub fn train_and_score(
    train_cfg: &TrainConfig,
    splits: &SyntheticSplits,
    opts: &SearchOptions,
    cider_mode: CiderMode,
    threads: usize,
) -> Result<(TrainOutcome, CaptionQuality)> {
    let outcome = train(train_cfg, &splits.vocab, &splits.train, &splits.val)?;
    let model = outcome.checkpoint.to_model()?;
    let quality = caption_quality(
        &model,
        &splits.vocab,
        &splits.val,
        &splits.val_captions,
        opts,
        cider_mode,
        threads,
    )?;
    Ok((outcome, quality))
}

/// Trains all three variants for each of `cfg.ablation_seeds` seeds. Seed `k`
/// uses `cfg.train.seed + k` for both the data and the model.
pub fn run_ablation(
    cfg: &RunConfig,
    threads: usize,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for k in 0..cfg.ablation_seeds as u64 {
        let seed = cfg.train.seed + k;
        let spec = SyntheticSpec {
            seed,
            ..cfg.synthetic.clone()
        };
        let splits = synthetic_splits(&spec, cfg.train_size, cfg.val_size, cfg.train.min_count)?;
        for variant in Variant::ALL {
            let tc = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let (outcome, quality) = train_and_score(&tc, &splits, &cfg.search, cfg.cider_mode, threads)?;
            let val_loss = outcome.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
            let row = AblationRow {
                seed,
                variant,
                val_loss,
                bleu4: quality.metrics.bleu4,
                cider: quality.metrics.cider,
                exact_match: quality.exact_match,
                epochs: outcome.history.len(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-seed rows as CSV.
pub fn ablation_rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("seed,variant,val_loss,bleu4,cider,exact_match,epochs\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.seed, r.variant, r.val_loss, r.bleu4, r.cider, r.exact_match, r.epochs
        ));
    }
    s
}

/// Means over seeds, one line per variant: `variant,val_loss,bleu4,cider`.
pub fn ablation_summary_csv(rows: &[AblationRow]) -> String {
    let mut by_variant: BTreeMap<usize, (Variant, Vec<&AblationRow>)> = BTreeMap::new();
    for r in rows {
        let key = Variant::ALL.iter().position(|v| *v == r.variant).unwrap_or(usize::MAX);
        by_variant.entry(key).or_insert((r.variant, Vec::new())).1.push(r);
    }
    let mut s = String::from("variant,val_loss,bleu4,cider\n");
    for (variant, rs) in by_variant.values() {
        let n = rs.len() as f64;
        let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        s.push_str(&format!(
            "{variant},{},{},{}\n",
            mean(|r| r.val_loss),
            mean(|r| r.bleu4),
            mean(|r| r.cider)
        ));
    }
    s
}

/// Seeds on which MAT < NoAttention < SingleVector in validation loss.
pub fn ordered_seeds(rows: &[AblationRow]) -> Vec<u64> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    seeds
        .into_iter()
        .filter(|&s| {
            let loss = |v: Variant| rows.iter().find(|r| r.seed == s && r.variant == v).map(|r| r.val_loss);
            matches!(
                (loss(Variant::Mat), loss(Variant::NoAttention), loss(Variant::SingleVector)),
                (Some(a), Some(b), Some(c)) if a < b && b < c
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, variant: Variant, val_loss: f64) -> AblationRow {
        AblationRow {
            seed,
            variant,
            val_loss,
            bleu4: 0.5,
            cider: 1.0,
            exact_match: 0.0,
            epochs: 1,
        }
    }

    #[test]
    fn ordering_and_summary() {
        let rows = vec![
            row(0, Variant::Mat, 0.1),
            row(0, Variant::NoAttention, 0.2),
            row(0, Variant::SingleVector, 0.3),
            row(1, Variant::Mat, 0.3),
            row(1, Variant::NoAttention, 0.2),
            row(1, Variant::SingleVector, 0.4),
        ];
        assert_eq!(ordered_seeds(&rows), vec![0]);
        let csv = ablation_summary_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,val_loss,bleu4,cider");
        assert!(lines[1].starts_with("mat,0.2,"));
        assert!(lines[3].starts_with("single-vector,0.35"));
        assert_eq!(ablation_rows_csv(&rows).lines().count(), 7);
    }

    #[test]
    fn splits_share_vocabulary_and_generator() {
        let s = synthetic_splits(&SyntheticSpec::default(), 50, 10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.val_captions.len()), (50, 10, 10));
        let again = synthetic_splits(&SyntheticSpec::default(), 50, 10, 1).unwrap();
        assert_eq!(again.val, s.val);
        assert_eq!(s.vocab.decode(&s.val[0].caption), s.val_captions[0]);
    }
}
