use serde::{Deserialize, Serialize};

use super::model_affines;
use crate::attacks::{run_attack, AttackSpec};
use crate::autodiff::softmax_rows;
use crate::data::{BatchIter, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Model};

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistSource {
    BnGamma,
    BnM,
    BnB,
    /// Largest logit per example.
    Logits,
    /// Largest softmax probability per example.
    Confidence,
}

impl HistSource {
    pub const ALL: [HistSource; 5] = [
        HistSource::BnGamma,
        HistSource::BnM,
        HistSource::BnB,
        HistSource::Logits,
        HistSource::Confidence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HistSource::BnGamma => "bn_gamma",
            HistSource::BnM => "bn_m",
            HistSource::BnB => "bn_b",
            HistSource::Logits => "logits",
            HistSource::Confidence => "confidence",
        }
    }

    fn is_parameter(self) -> bool {
        matches!(self, HistSource::BnGamma | HistSource::BnM | HistSource::BnB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistVariant {
    Clean,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramData {
    pub source: HistSource,
    pub model_tag: String,
    /// Batch-norm layer for parameter sources.
    pub layer_id: Option<String>,
    /// Input kind for logit/confidence sources.
    pub variant: Option<HistVariant>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Counts of `values` in `bins` equal-width bins spanning `[min, max]`
/// (the last bin is closed). A constant input gets the unit-width range
/// centred on it so edges stay strictly increasing.
pub fn histogram(values: &[f32], bins: usize) -> (Vec<f64>, Vec<u64>) {
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    if !(lo < hi) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        lo = c - 0.5;
        hi = c + 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let k = (((f64::from(v) - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    (edges, counts)
}

fn top_values(model: &Model, x: &crate::tensor::Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let logits = model.logits(x)?;
    let k = model.num_classes();
    let probs = softmax_rows(logits.data(), k);
    let row_max = |d: &[f32]| -> Vec<f32> {
        d.chunks(k)
            .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect()
    };
    Ok((row_max(logits.data()), row_max(&probs)))
}

/// Histograms of the selected sources. Parameter sources give one
/// histogram per batch-norm layer; logit and confidence sources give one
/// over the first `n_examples` of `split` on clean inputs and, when an
/// attack is supplied, one on the attacked inputs.
pub fn extract_histograms(
    model: &Model,
    model_tag: &str,
    split: Option<&DatasetSplit>,
    n_examples: usize,
    attack: Option<&AttackSpec>,
    sources: &[HistSource],
    batch_size: usize,
) -> Result<Vec<HistogramData>> {
    if sources.is_empty() {
        return Err(Error::InvalidConfig("no histogram sources selected".into()));
    }
    if !model.is_eval() {
        return Err(Error::NotEvalMode);
    }
    let mut out = Vec::new();
    let affines = model_affines(model);
    for &source in sources.iter().filter(|s| s.is_parameter()) {
        for (i, a) in affines.iter().enumerate() {
            let values = match source {
                HistSource::BnGamma => model.bn_layer(i).gamma,
                HistSource::BnM => a.m.clone(),
                _ => a.b.clone(),
            };
            let (bin_edges, counts) = histogram(&values, HISTOGRAM_BINS);
            out.push(HistogramData {
                source,
                model_tag: model_tag.to_string(),
                layer_id: Some(a.layer_id.clone()),
                variant: None,
                bin_edges,
                counts,
            });
        }
    }

    let output_sources: Vec<HistSource> = sources.iter().copied().filter(|s| !s.is_parameter()).collect();
    if output_sources.is_empty() {
        return Ok(out);
    }
    let split = split.ok_or_else(|| Error::InvalidConfig("logit and confidence histograms need a dataset".into()))?;
    let n = n_examples.min(split.len());
    if n == 0 {
        return Err(Error::InvalidConfig("no examples to histogram".into()));
    }
    let mut variants = vec![(HistVariant::Clean, Vec::new(), Vec::new())];
    if attack.is_some() {
        variants.push((HistVariant::Adversarial, Vec::new(), Vec::new()));
    }
    for (b, idx) in BatchIter::sequential(n, batch_size.max(1)).enumerate() {
        let batch = split.batch(&idx);
        let (l, c) = top_values(model, &batch.images)?;
        variants[0].1.extend(l);
        variants[0].2.extend(c);
        if let Some(spec) = attack {
            let seeded = spec.clone().with_seed(spec.seed ^ (b as u64 + 1));
            let adv = run_attack(model, &batch, &seeded)?.adversarial;
            let (l, c) = top_values(model, &adv)?;
            variants[1].1.extend(l);
            variants[1].2.extend(c);
        }
    }
    for &source in &output_sources {
        for (variant, logits, conf) in &variants {
            let values = if source == HistSource::Logits { logits } else { conf };
            let (bin_edges, counts) = histogram(values, HISTOGRAM_BINS);
            out.push(HistogramData {
                source,
                model_tag: model_tag.to_string(),
                layer_id: None,
                variant: Some(*variant),
                bin_edges,
                counts,
            });
        }
    }
    Ok(out)
}
