//! Batch-norm layers viewed as per-channel affine maps `m·z + b`, with
//! per-layer summaries, model comparisons, histograms and parameter
//! accounting.

mod histogram;

pub use histogram::{extract_histograms, histogram, HistSource, HistVariant, HistogramData, HISTOGRAM_BINS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Model, ParamKind, Selector};

/// A batch-norm layer in eval mode: `m = γ/√(σ²+ε)`, `b = β − m·μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAffine {
    pub layer_id: String,
    pub m: Vec<f32>,
    pub b: Vec<f32>,
}

pub fn normalized_affine(layer: &BatchNormLayer, layer_id: &str) -> NormalizedAffine {
    let (m, b) = layer.affine();
    NormalizedAffine {
        layer_id: layer_id.to_string(),
        m,
        b,
    }
}

/// Normalized affine maps of every batch-norm layer, in forward order.
pub fn model_affines(model: &Model) -> Vec<NormalizedAffine> {
    model
        .bn_layer_names()
        .iter()
        .enumerate()
        .map(|(i, name)| normalized_affine(&model.bn_layer(i), name))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMean {
    pub layer_id: String,
    pub mean_m: f64,
    pub mean_b: f64,
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

/// Channel means of `m` and `b` for each batch-norm layer, in forward order.
pub fn per_layer_mean_m(model: &Model) -> Result<Vec<LayerMean>> {
    if model.num_bn_layers() == 0 {
        return Err(Error::NoBatchNorm);
    }
    Ok(model_affines(model)
        .into_iter()
        .map(|a| LayerMean {
            mean_m: mean(&a.m),
            mean_b: mean(&a.b),
            layer_id: a.layer_id,
        })
        .collect())
}

/// Average over layers of `mean_m(a) − mean_m(b)`; negative when `a`
/// scales features down relative to `b`.
pub fn mean_shift(a: &Model, b: &Model) -> Result<f64> {
    let (la, lb) = (per_layer_mean_m(a)?, per_layer_mean_m(b)?);
    let same = la.len() == lb.len()
        && la.iter().zip(&lb).all(|(x, y)| x.layer_id == y.layer_id)
        && (0..a.num_bn_layers()).all(|i| a.bn_layer(i).channels() == b.bn_layer(i).channels());
    if !same {
        return Err(Error::ArchitectureMismatch(
            "models differ in batch-norm topology".into(),
        ));
    }
    Ok(la.iter().zip(&lb).map(|(x, y)| x.mean_m - y.mean_m).sum::<f64>() / la.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    /// Learnable scalars (running statistics excluded).
    pub total: usize,
    /// Scalar counts by group: `bn_params`, `bn_gamma`, `bn_beta`,
    /// `bn_stats`, `conv`, `linear`, `logit`, `conv1`.
    pub per_selector: BTreeMap<String, usize>,
    /// `(|γ| + |β|) / total`, in percent.
    pub bn_fraction: f64,
}

pub fn param_accounting(model: &Model) -> ParamAccounting {
    let count = |f: &dyn Fn(ParamKind) -> bool| -> usize {
        model
            .arrays()
            .iter()
            .filter(|a| f(a.kind))
            .map(|a| a.tensor.numel())
            .sum()
    };
    let by_names = |sel: Selector| -> usize {
        model
            .enumerate_params(sel)
            .iter()
            .map(|n| model.array(n).map_or(0, |a| a.tensor.numel()))
            .sum()
    };
    let total = model.num_parameters();
    let bn_params = count(&|k| k.is_bn_param());
    let per_selector = BTreeMap::from([
        ("bn_params".to_string(), bn_params),
        ("bn_gamma".to_string(), count(&|k| k == ParamKind::BnGamma)),
        ("bn_beta".to_string(), count(&|k| k == ParamKind::BnBeta)),
        ("bn_stats".to_string(), count(&|k| k.is_statistic())),
        ("conv".to_string(), count(&|k| k == ParamKind::ConvWeight)),
        (
            "linear".to_string(),
            count(&|k| matches!(k, ParamKind::LinearWeight | ParamKind::LinearBias)),
        ),
        ("logit".to_string(), by_names(Selector::Logit)),
        ("conv1".to_string(), by_names(Selector::Conv1)),
    ]);
    ParamAccounting {
        total,
        per_selector,
        bn_fraction: if total == 0 {
            0.0
        } else {
            100.0 * bn_params as f64 / total as f64
        },
    }
}
