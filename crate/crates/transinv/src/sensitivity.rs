//! Translation-sensitivity measurement: similarity metrics between base and
//! shifted tap vectors, per-class sensitivity maps over the shift lattice,
//! classification-accuracy baseline maps, radial profiles, and Pearson
//! correlation between maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{translate, Sample};
use crate::nn::{softmax_rows, Model, NnError, Tap};
use crate::train::batch_tensor;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("vector dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("sample list is empty")]
    NoSamples,
    #[error("samples carry mixed labels ({a} and {b})")]
    MixedLabels { a: u8, b: u8 },
    #[error("radial axes differ between profiles")]
    AxisMismatch,
    #[error("no profiles to average")]
    NoProfiles,
    #[error("maps have different shift grids ({a} vs {b})")]
    GridMismatch { a: u32, b: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
    Accuracy,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(format!(
                "unknown metric `{other}` (cosine|euclidean|accuracy)"
            )),
        }
    }
}

/// Grid of similarity values over (dx, dy) in [-max_shift, max_shift]^2,
/// stored row-major with dy varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub grid: Vec<f64>,
    pub max_shift: u32,
    pub class_id: u8,
    pub tap: Tap,
    pub metric: Metric,
    pub sample_count: usize,
    pub vector_dim: usize,
    /// How many (base, shifted) pairs hit the zero-norm cosine fallback.
    pub degenerate_pairs: usize,
}

impl SensitivityMap {
    pub fn side(&self) -> usize {
        2 * self.max_shift as usize + 1
    }

    pub fn index(&self, dx: i32, dy: i32) -> usize {
        let s = self.max_shift as i32;
        debug_assert!(dx.abs() <= s && dy.abs() <= s);
        ((dy + s) as usize) * self.side() + (dx + s) as usize
    }

    pub fn at(&self, dx: i32, dy: i32) -> f64 {
        self.grid[self.index(dx, dy)]
    }
}

/// Cosine of the angle between two vectors, clamped to [-1, 1].
///
/// Zero-norm policy: two zero vectors compare as 1, a single zero vector
/// as 0. The `bool` marks that fallback.
fn cosine_with_flag(a: &[f64], b: &[f64]) -> (f64, bool) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == 0.0 && nb == 0.0 {
            (1.0, true)
        } else {
            (0.0, true)
        };
    }
    if dot == na && dot == nb {
        // bitwise-identical vectors: avoid rounding below 1
        return (1.0, false);
    }
    ((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0), false)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SensitivityError> {
    if a.len() != b.len() {
        return Err(SensitivityError::DimensionMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    Ok(cosine_with_flag(a, b).0)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64, SensitivityError> {
    if a.len() != b.len() {
        return Err(SensitivityError::DimensionMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Pearson correlation coefficient. Zero variance is an error, never a
/// silent zero.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, SensitivityError> {
    if x.len() != y.len() {
        return Err(SensitivityError::DimensionMismatch {
            a: x.len(),
            b: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(SensitivityError::TooFewPoints {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 {
        return Err(SensitivityError::ZeroVariance("x"));
    }
    if vy == 0.0 {
        return Err(SensitivityError::ZeroVariance("y"));
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub max_shift: u32,
    pub batch_size: usize,
    /// Cap on samples per class for desk-scale runs; None uses every sample.
    pub sample_cap: Option<usize>,
    /// Softmax the fc_out vectors before comparing (off: raw pre-softmax).
    pub post_softmax: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            max_shift: 10,
            batch_size: 128,
            sample_cap: None,
            post_softmax: false,
        }
    }
}

/// What a probing sweep should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapRequest {
    Similarity { tap: Tap, metric: Metric },
    Accuracy,
}

fn tap_vectors(
    model: &Model<f32>,
    samples: &[&Sample],
    want_conv: bool,
    want_fc: bool,
    post_softmax: bool,
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>), SensitivityError> {
    let mut conv_vecs = Vec::new();
    let mut fc_vecs = Vec::new();
    let mut predictions = Vec::new();
    for chunk in samples.chunks(batch_size) {
        let batch = batch_tensor(chunk);
        let (flat, logits) = model.forward_infer(&batch, want_conv)?;
        if want_conv {
            let flat = flat.expect("requested conv tap");
            let dim = flat.shape()[1];
            for row in flat.data().chunks(dim) {
                conv_vecs.push(row.iter().map(|&v| v as f64).collect());
            }
        }
        let classes = logits.shape()[1];
        for row in logits.data().chunks(classes) {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            predictions.push(best);
        }
        if want_fc {
            let fc = if post_softmax {
                softmax_rows(&logits)?
            } else {
                logits
            };
            for row in fc.data().chunks(classes) {
                fc_vecs.push(row.iter().map(|&v| v as f64).collect());
            }
        }
    }
    Ok((conv_vecs, fc_vecs, predictions))
}

/// One probing sweep over the shift lattice, producing every requested map
/// for a single class. Shifted samples are evaluated once per (dx, dy) and
/// shared across the requests; accumulation runs in sample order.
pub fn probe_class_maps(
    model: &Model<f32>,
    class_samples: &[Sample],
    requests: &[MapRequest],
    opts: &ProbeOptions,
) -> Result<Vec<SensitivityMap>, SensitivityError> {
    if class_samples.is_empty() {
        return Err(SensitivityError::NoSamples);
    }
    let class_id = class_samples[0].label;
    for s in class_samples {
        if s.label != class_id {
            return Err(SensitivityError::MixedLabels {
                a: class_id,
                b: s.label,
            });
        }
    }
    let capped: Vec<&Sample> = match opts.sample_cap {
        Some(cap) => class_samples.iter().take(cap).collect(),
        None => class_samples.iter().collect(),
    };
    let n = capped.len();

    let want_conv = requests
        .iter()
        .any(|r| matches!(r, MapRequest::Similarity { tap: Tap::ConvFinal, .. }));
    let want_fc = requests
        .iter()
        .any(|r| matches!(r, MapRequest::Similarity { tap: Tap::FcOut, .. }));
    let want_acc = requests.iter().any(|r| matches!(r, MapRequest::Accuracy));

    let (base_conv, base_fc, _) = tap_vectors(
        model,
        &capped,
        want_conv,
        want_fc,
        opts.post_softmax,
        opts.batch_size,
    )?;

    let side = 2 * opts.max_shift as usize + 1;
    let mut sums = vec![vec![0.0f64; side * side]; requests.len()];
    let mut degenerate = 0usize;

    for dy in -(opts.max_shift as i32)..=opts.max_shift as i32 {
        for dx in -(opts.max_shift as i32)..=opts.max_shift as i32 {
            let shifted: Vec<Sample> = capped.iter().map(|s| translate(s, dx, dy)).collect();
            let shifted_refs: Vec<&Sample> = shifted.iter().collect();
            let (conv, fc, preds) = tap_vectors(
                model,
                &shifted_refs,
                want_conv,
                want_fc,
                opts.post_softmax,
                opts.batch_size,
            )?;
            let cell = (dy + opts.max_shift as i32) as usize * side
                + (dx + opts.max_shift as i32) as usize;
            for (req, sum) in requests.iter().zip(&mut sums) {
                match req {
                    MapRequest::Similarity { tap, metric } => {
                        let (base, cur) = match tap {
                            Tap::ConvFinal => (&base_conv, &conv),
                            Tap::FcOut => (&base_fc, &fc),
                        };
                        let mut acc = 0.0f64;
                        for (b, c) in base.iter().zip(cur) {
                            match metric {
                                Metric::Cosine => {
                                    let (v, fallback) = cosine_with_flag(b, c);
                                    if fallback {
                                        degenerate += 1;
                                    }
                                    acc += v;
                                }
                                Metric::Euclidean => acc += euclidean_distance(b, c)?,
                                Metric::Accuracy => unreachable!("accuracy is not a similarity"),
                            }
                        }
                        sum[cell] = acc / n as f64;
                    }
                    MapRequest::Accuracy => {
                        let correct =
                            preds.iter().filter(|&&p| p == class_id as usize).count();
                        sum[cell] = correct as f64 / n as f64;
                    }
                }
            }
        }
    }

    let conv_dim = base_conv.first().map_or(0, Vec::len);
    let fc_dim = base_fc.first().map_or(0, Vec::len);
    let _ = want_acc;
    Ok(requests
        .iter()
        .zip(sums)
        .map(|(req, grid)| match req {
            MapRequest::Similarity { tap, metric } => SensitivityMap {
                grid,
                max_shift: opts.max_shift,
                class_id,
                tap: *tap,
                metric: *metric,
                sample_count: n,
                vector_dim: match tap {
                    Tap::ConvFinal => conv_dim,
                    Tap::FcOut => fc_dim,
                },
                degenerate_pairs: degenerate,
            },
            MapRequest::Accuracy => SensitivityMap {
                grid,
                max_shift: opts.max_shift,
                class_id,
                tap: Tap::FcOut,
                metric: Metric::Accuracy,
                sample_count: n,
                vector_dim: 0,
                degenerate_pairs: 0,
            },
        })
        .collect())
}

/// Average similarity map between base and shifted tap vectors for one class.
pub fn sensitivity_map(
    model: &Model<f32>,
    class_samples: &[Sample],
    tap: Tap,
    metric: Metric,
    opts: &ProbeOptions,
) -> Result<SensitivityMap, SensitivityError> {
    assert!(
        metric != Metric::Accuracy,
        "accuracy maps come from accuracy_map"
    );
    let maps = probe_class_maps(
        model,
        class_samples,
        &[MapRequest::Similarity { tap, metric }],
        opts,
    )?;
    Ok(maps.into_iter().next().unwrap())
}

/// Fraction of class samples classified correctly under each shift.
pub fn accuracy_map(
    model: &Model<f32>,
    class_samples: &[Sample],
    opts: &ProbeOptions,
) -> Result<SensitivityMap, SensitivityError> {
    let maps = probe_class_maps(model, class_samples, &[MapRequest::Accuracy], opts)?;
    Ok(maps.into_iter().next().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub radii: Vec<u32>,
    pub values: Vec<f64>,
    pub counts: Vec<u32>,
}

fn radius_bin(dx: i32, dy: i32) -> u32 {
    // round half away from zero; radii are non-negative so +0.5-floor works
    (((dx * dx + dy * dy) as f64).sqrt() + 0.5).floor() as u32
}

/// Mean map value per rounded-radius bin. Bin counts depend only on the
/// lattice, not on the data.
pub fn radial_profile(map: &SensitivityMap) -> RadialProfile {
    let s = map.max_shift as i32;
    let max_bin = radius_bin(s, s);
    let mut sums = vec![0.0f64; max_bin as usize + 1];
    let mut counts = vec![0u32; max_bin as usize + 1];
    for dy in -s..=s {
        for dx in -s..=s {
            let bin = radius_bin(dx, dy) as usize;
            sums[bin] += map.at(dx, dy);
            counts[bin] += 1;
        }
    }
    RadialProfile {
        radii: (0..=max_bin).collect(),
        values: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect(),
        counts,
    }
}

/// Pointwise mean over profiles with identical radius axes.
pub fn average_profiles(profiles: &[RadialProfile]) -> Result<RadialProfile, SensitivityError> {
    let first = profiles.first().ok_or(SensitivityError::NoProfiles)?;
    for p in profiles {
        if p.radii != first.radii || p.counts != first.counts {
            return Err(SensitivityError::AxisMismatch);
        }
    }
    let mut values = vec![0.0f64; first.values.len()];
    for p in profiles {
        for (v, pv) in values.iter_mut().zip(&p.values) {
            *v += pv;
        }
    }
    for v in &mut values {
        *v /= profiles.len() as f64;
    }
    Ok(RadialProfile {
        radii: first.radii.clone(),
        values,
        counts: first.counts.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassCorrelation {
    pub class_id: u8,
    pub cosine_vs_accuracy: Option<f64>,
    pub neg_euclidean_vs_accuracy: Option<f64>,
    pub cosine_vs_neg_euclidean: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricComparison {
    pub per_class: Vec<ClassCorrelation>,
    pub mean_cosine_vs_accuracy: Option<f64>,
    pub mean_neg_euclidean_vs_accuracy: Option<f64>,
    pub mean_cosine_vs_neg_euclidean: Option<f64>,
    /// Classes where at least one correlation was undefined (zero variance).
    pub undefined_classes: Vec<u8>,
}

fn corr_flat(a: &SensitivityMap, b: &SensitivityMap, negate_b: bool) -> Option<f64> {
    let bb: Vec<f64> = if negate_b {
        b.grid.iter().map(|v| -v).collect()
    } else {
        b.grid.clone()
    };
    pearson(&a.grid, &bb).ok()
}

/// Per-class Pearson correlations between the cosine, (negated) Euclidean
/// and accuracy maps at one tap. `maps` holds per-class triplets.
pub fn metric_comparison(
    maps: &[(SensitivityMap, SensitivityMap, SensitivityMap)],
) -> MetricComparison {
    let mut per_class = Vec::new();
    let mut undefined = Vec::new();
    for (cos, euc, acc) in maps {
        let row = ClassCorrelation {
            class_id: cos.class_id,
            cosine_vs_accuracy: corr_flat(cos, acc, false),
            neg_euclidean_vs_accuracy: {
                let neg: Vec<f64> = euc.grid.iter().map(|v| -v).collect();
                pearson(&neg, &acc.grid).ok()
            },
            cosine_vs_neg_euclidean: corr_flat(cos, euc, true),
        };
        if row.cosine_vs_accuracy.is_none()
            || row.neg_euclidean_vs_accuracy.is_none()
            || row.cosine_vs_neg_euclidean.is_none()
        {
            undefined.push(cos.class_id);
        }
        per_class.push(row);
    }
    let mean = |f: fn(&ClassCorrelation) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    MetricComparison {
        mean_cosine_vs_accuracy: mean(|c| c.cosine_vs_accuracy),
        mean_neg_euclidean_vs_accuracy: mean(|c| c.neg_euclidean_vs_accuracy),
        mean_cosine_vs_neg_euclidean: mean(|c| c.cosine_vs_neg_euclidean),
        per_class,
        undefined_classes: undefined,
    }
}
