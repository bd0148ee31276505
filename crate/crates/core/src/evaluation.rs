//! Counterfactual quality measures: manifold distance statistics, IM1,
//! kNN target agreement, oracle transfer and paired L2 distances in `X` and
//! `Z`, collected into an [`EvaluationReport`].

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::autoencoder::Autoencoder;
use crate::counterfactual::{Goal, Trajectory};
use crate::datasets::ManifoldOracle;
use crate::error::{Error, Result};
use crate::generator::{Generator, Predictor};
use crate::io::{fmt_f64, read_json, write_json};
use crate::linalg::distance;

pub const IM1_EPSILON: f64 = 1e-8;

/// Order statistics of a set of distances. Quantiles interpolate linearly
/// between order statistics, so the median of an even-length list is the
/// midpoint of the two central values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Values outside `[q1 − 1.5 IQR, q3 + 1.5 IQR]`.
    pub outliers: usize,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile(&v, 0.5))
}

pub fn distance_stats(values: &[f64]) -> Result<DistanceStats> {
    if values.is_empty() {
        return Err(Error::Empty("distance list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(DistanceStats {
        count: v.len(),
        median: quantile(&v, 0.5),
        q1,
        q3,
        outliers: v.iter().filter(|&&d| d < lo || d > hi).count(),
    })
}

pub fn manifold_distance_stats(finals: &[Vec<f64>], oracle: &dyn ManifoldOracle) -> Result<DistanceStats> {
    let d: Vec<f64> = finals.par_iter().map(|x| oracle.distance(x)).collect();
    distance_stats(&d)
}

/// `‖x − AE_t(x)‖ / (‖x − AE_c0(x)‖ + ε)`.
pub fn im1(x: &[f64], ae_target: &Autoencoder, ae_source: &Autoencoder, epsilon: f64) -> Result<f64> {
    let num = distance(x, &ae_target.reconstruct(x)?);
    let den = distance(x, &ae_source.reconstruct(x)?);
    Ok(num / (den + epsilon))
}

/// Fraction of the `k` Euclidean-nearest reference points labeled `target`.
/// Equal distances are ordered by reference index.
pub fn knn_target_agreement(x: &[f64], reference: &Tensor, labels: &[u8], k: usize, target: u8) -> Result<f64> {
    let n = reference.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("k must be in 1..={n}, got {k}")));
    }
    let mut d: Vec<(f64, usize)> = (0..n).map(|i| (distance(x, reference.row_slice(i)), i)).collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let hits = d[..k].iter().filter(|(_, i)| labels[*i] == target).count();
    Ok(hits as f64 / k as f64)
}

/// What counts as reaching the target for an independent model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetRule {
    /// Predicted class (probability ≥ 0.5 means class 1) equals the target.
    Class { class: u8 },
    Value { target: f64, tolerance: f64 },
}

impl TargetRule {
    /// Rule for a resolved classification goal: the confidence class, or
    /// the side of 0.5 a target value lies on.
    pub fn classification(goal: &Goal) -> Result<Self> {
        match *goal {
            Goal::ConfidenceThreshold { target_class, .. } => Ok(TargetRule::Class { class: target_class }),
            Goal::TargetValue { target, .. } if target > 0.0 && target < 1.0 => Ok(TargetRule::Class {
                class: u8::from(target > 0.5),
            }),
            g => Err(Error::Config(format!("no class target for goal {g:?}"))),
        }
    }

    pub fn regression(goal: &Goal) -> Result<Self> {
        match *goal {
            Goal::TargetValue { target, tolerance } => Ok(TargetRule::Value { target, tolerance }),
            g => Err(Error::Config(format!("no regression target for goal {g:?}"))),
        }
    }

    pub fn is_met(&self, prediction: f64) -> bool {
        match *self {
            TargetRule::Class { class } => u8::from(prediction >= 0.5) == class,
            TargetRule::Value { target, tolerance } => (prediction - target).abs() <= tolerance,
        }
    }

    pub fn target_class(&self) -> Option<u8> {
        match *self {
            TargetRule::Class { class } => Some(class),
            TargetRule::Value { .. } => None,
        }
    }
}

/// Fraction of `finals` for which `oracle` meets the per-item rule.
pub fn oracle_transfer(finals: &[Vec<f64>], oracle: &dyn Predictor, rules: &[TargetRule]) -> Result<f64> {
    if finals.is_empty() {
        return Err(Error::Empty("oracle transfer finals"));
    }
    if rules.len() != finals.len() {
        return Err(Error::Dimension {
            expected: finals.len(),
            got: rules.len(),
        });
    }
    let mut hits = 0;
    for (x, r) in finals.iter().zip(rules) {
        if r.is_met(oracle.predict(x)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / finals.len() as f64)
}

/// A reference sample of one source class in `X` together with its latent
/// codes.
#[derive(Clone, Debug)]
pub struct SourceReference {
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl SourceReference {
    pub fn new(points: Vec<Vec<f64>>, generator: &dyn Generator) -> Result<Self> {
        let z = points.iter().map(|p| generator.invert(p)).collect::<Result<_>>()?;
        Ok(Self { x: points, z })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedL2 {
    pub l2_x: f64,
    pub l2_z: Option<f64>,
    /// Mean distance from the final point to the source-class reference.
    pub baseline_x: Option<f64>,
    pub baseline_z: Option<f64>,
    pub failure: Option<String>,
}

/// `‖x′ − x⁰‖` and `‖g⁻¹(x′) − g⁻¹(x⁰)‖`, plus the same distances against a
/// source-class reference when one is given.
pub fn paired_l2(
    start: &[f64],
    final_point: &[f64],
    generator: &dyn Generator,
    reference: Option<&SourceReference>,
) -> PairedL2 {
    let l2_x = distance(final_point, start);
    let mean_to = |p: &[f64], set: &[Vec<f64>]| set.iter().map(|r| distance(p, r)).sum::<f64>() / set.len() as f64;
    let baseline_x = reference.filter(|r| !r.x.is_empty()).map(|r| mean_to(final_point, &r.x));
    let latent = generator
        .invert(start)
        .and_then(|z0| generator.invert(final_point).map(|z1| (z0, z1)));
    match latent {
        Ok((z0, z1)) => PairedL2 {
            l2_x,
            l2_z: Some(distance(&z1, &z0)),
            baseline_x,
            baseline_z: reference.filter(|r| !r.z.is_empty()).map(|r| mean_to(&z1, &r.z)),
            failure: None,
        },
        Err(e) => PairedL2 {
            l2_x,
            l2_z: None,
            baseline_x,
            baseline_z: None,
            failure: Some(e.to_string()),
        },
    }
}

pub fn paired_l2_stats(
    trajectories: &[Trajectory],
    generator: &dyn Generator,
    reference: Option<&SourceReference>,
) -> Vec<PairedL2> {
    trajectories
        .par_iter()
        .map(|t| paired_l2(&t.start_input, &t.final_point, generator, reference))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub start: Vec<f64>,
    #[serde(rename = "final")]
    pub final_point: Vec<f64>,
    pub success: bool,
    pub manifold_distance: f64,
    pub l2: PairedL2,
    pub oracle_prediction: f64,
    pub oracle_hit: bool,
    pub im1: Option<f64>,
    pub knn_agreement: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Population mean and standard deviation; `None` for no values.
    pub fn of<I: IntoIterator<Item = f64>>(values: I) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub success_rate: f64,
    pub manifold_distance: DistanceStats,
    pub manifold_distance_mean: MeanStd,
    pub l2_x: MeanStd,
    pub l2_z: Option<MeanStd>,
    pub baseline_x: Option<MeanStd>,
    pub baseline_z: Option<MeanStd>,
    pub oracle_transfer: f64,
    pub im1: Option<MeanStd>,
    pub knn_agreement: Option<MeanStd>,
}

impl Aggregates {
    pub fn from_items(items: &[ItemRecord]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("evaluation items"));
        }
        let n = items.len() as f64;
        let dist: Vec<f64> = items.iter().map(|i| i.manifold_distance).collect();
        Ok(Self {
            count: items.len(),
            success_rate: items.iter().filter(|i| i.success).count() as f64 / n,
            manifold_distance: distance_stats(&dist)?,
            manifold_distance_mean: MeanStd::of(dist).ok_or(Error::Empty("evaluation items"))?,
            l2_x: MeanStd::of(items.iter().map(|i| i.l2.l2_x)).ok_or(Error::Empty("evaluation items"))?,
            l2_z: MeanStd::of(items.iter().filter_map(|i| i.l2.l2_z)),
            baseline_x: MeanStd::of(items.iter().filter_map(|i| i.l2.baseline_x)),
            baseline_z: MeanStd::of(items.iter().filter_map(|i| i.l2.baseline_z)),
            oracle_transfer: items.iter().filter(|i| i.oracle_hit).count() as f64 / n,
            im1: MeanStd::of(items.iter().filter_map(|i| i.im1)),
            knn_agreement: MeanStd::of(items.iter().filter_map(|i| i.knn_agreement)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub label: String,
    pub config_hash: String,
    pub aggregates: Aggregates,
    pub items: Vec<ItemRecord>,
}

impl EvaluationReport {
    pub fn new(label: &str, config_hash: &str, items: Vec<ItemRecord>) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            config_hash: config_hash.into(),
            aggregates: Aggregates::from_items(&items)?,
            items,
        })
    }

    /// Aggregates recomputed from the items must match the stored ones.
    pub fn verify(&self) -> Result<()> {
        if Aggregates::from_items(&self.items)? != self.aggregates {
            return Err(Error::Format(format!(
                "report '{}': aggregates do not match its items",
                self.label
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        r.verify()?;
        Ok(r)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Per-item CSV for any number of labeled reports.
pub fn write_metrics_csv<W: Write>(mut w: W, config_hash: &str, reports: &[&EvaluationReport]) -> Result<()> {
    writeln!(w, "# config_hash: {config_hash}")?;
    writeln!(
        w,
        "label,index,start_x1,start_x2,start_x3,final_x1,final_x2,final_x3,success,manifold_distance,\
l2_x,l2_z,baseline_x,baseline_z,oracle_prediction,oracle_hit,im1,knn_agreement"
    )?;
    for r in reports {
        for (i, it) in r.items.iter().enumerate() {
            let mut row = vec![r.label.clone(), i.to_string()];
            row.extend(it.start.iter().map(|v| fmt_f64(*v)));
            row.extend(it.final_point.iter().map(|v| fmt_f64(*v)));
            row.push(u8::from(it.success).to_string());
            row.push(fmt_f64(it.manifold_distance));
            row.push(fmt_f64(it.l2.l2_x));
            row.push(opt(it.l2.l2_z));
            row.push(opt(it.l2.baseline_x));
            row.push(opt(it.l2.baseline_z));
            row.push(fmt_f64(it.oracle_prediction));
            row.push(u8::from(it.oracle_hit).to_string());
            row.push(opt(it.im1));
            row.push(opt(it.knn_agreement));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Models and reference data used to score trajectories.
pub struct EvalContext<'a> {
    pub manifold: &'a dyn ManifoldOracle,
    pub oracle: &'a dyn Predictor,
    /// Generator whose inverse defines `Z` distances.
    pub generator: &'a dyn Generator,
    pub classification: bool,
    /// Per-class autoencoders `[class 0, class 1]` for IM1.
    pub class_autoencoders: Option<[&'a Autoencoder; 2]>,
    /// Labeled reference set and `k` for kNN agreement.
    pub knn: Option<(&'a Tensor, &'a [u8], usize)>,
    /// Source-class references `[class 0, class 1]` for the L2 baselines.
    pub sources: Option<[&'a SourceReference; 2]>,
    pub epsilon: f64,
}

pub fn evaluate_trajectories(trajectories: &[Trajectory], ctx: &EvalContext<'_>) -> Result<Vec<ItemRecord>> {
    trajectories
        .par_iter()
        .map(|t| {
            let rule = if ctx.classification {
                TargetRule::classification(&t.goal)?
            } else {
                TargetRule::regression(&t.goal)?
            };
            let target = rule.target_class();
            let source = target.map(|c| 1 - c);
            let x = &t.final_point;
            let reference = source.and_then(|s| ctx.sources.map(|r| r[s as usize]));
            let oracle_prediction = ctx.oracle.predict(x)?;
            let im1 = match (ctx.class_autoencoders, target, source) {
                (Some(ae), Some(tc), Some(sc)) => Some(im1(x, ae[tc as usize], ae[sc as usize], ctx.epsilon)?),
                _ => None,
            };
            let knn_agreement = match (ctx.knn, target) {
                (Some((refs, labels, k)), Some(tc)) => Some(knn_target_agreement(x, refs, labels, k, tc)?),
                _ => None,
            };
            Ok(ItemRecord {
                start: t.start_input.clone(),
                final_point: x.clone(),
                success: t.is_success(),
                manifold_distance: ctx.manifold.distance(x),
                l2: paired_l2(&t.start_input, x, ctx.generator, reference),
                oracle_prediction,
                oracle_hit: rule.is_met(oracle_prediction),
                im1,
                knn_agreement,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::HelixOracle;
    use crate::generator::IdentityGenerator;

    #[test]
    fn order_statistics() {
        assert_eq!(distance_stats(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(distance_stats(&[]).is_err());
        let s = distance_stats(&[1.0, 1.0, 1.0, 1.0, 100.0]).unwrap();
        assert_eq!(s.outliers, 1);
        let on: Vec<Vec<f64>> = (0..5).map(|i| crate::datasets::helix_point(i as f64 - 2.0).to_vec()).collect();
        assert!(manifold_distance_stats(&on, &HelixOracle).unwrap().median < 1e-9);
    }

    #[test]
    fn im1_ratios() {
        let exact = Autoencoder::identity(3, &[6]).unwrap();
        let x = [0.2, 0.3, 0.4];
        // a decoder that always returns zero reconstructs nothing
        let zero = Autoencoder::from_parts(
            crate::nn::Mlp::zeros(&[3, 2, 1], crate::nn::Activation::Relu).unwrap(),
            crate::nn::Mlp::zeros(&[1, 2, 3], crate::nn::Activation::Relu).unwrap(),
        )
        .unwrap();
        assert_eq!(im1(&x, &exact, &zero, IM1_EPSILON).unwrap(), 0.0);
        let v = im1(&x, &zero, &zero, IM1_EPSILON).unwrap();
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn knn_cases() {
        let refs = Tensor::new(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![3, 2]).unwrap();
        assert_eq!(knn_target_agreement(&[1.0, 0.0], &refs, &[0, 1, 0], 1, 1).unwrap(), 1.0);
        assert_eq!(knn_target_agreement(&[5.0, 5.0], &refs, &[1, 1, 1], 2, 1).unwrap(), 1.0);
        // equidistant neighbours: lower index wins
        assert_eq!(knn_target_agreement(&[1.0, 0.0], &refs, &[1, 0, 0], 2, 1).unwrap(), 0.5);
        assert_eq!(knn_target_agreement(&[0.5, 0.0], &refs, &[1, 0, 0], 1, 1).unwrap(), 1.0);
        assert!(knn_target_agreement(&[0.0, 0.0], &refs, &[0, 1, 0], 4, 1).is_err());
    }

    #[test]
    fn oracle_transfer_rules() {
        let g = IdentityGenerator { dim: 3 };
        let zero = crate::predictor::MlpClassifier::from_net(
            crate::nn::Mlp::zeros(&[3, 1], crate::nn::Activation::Relu).unwrap(),
        )
        .unwrap();
        assert!(oracle_transfer(&[], &zero, &[]).is_err());
        let f = vec![vec![0.0; 3]];
        assert_eq!(oracle_transfer(&f, &zero, &[TargetRule::Class { class: 1 }]).unwrap(), 1.0);
        assert_eq!(oracle_transfer(&f, &zero, &[TargetRule::Class { class: 0 }]).unwrap(), 0.0);
        let p = paired_l2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &g, None);
        assert_eq!((p.l2_x, p.l2_z), (0.0, Some(0.0)));
        let p = paired_l2(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], &g, None);
        assert_eq!(Some(p.l2_x), p.l2_z);
    }

    #[test]
    fn report_round_trip_and_tamper_detection() {
        let item = |d: f64| ItemRecord {
            start: vec![0.0; 3],
            final_point: vec![d; 3],
            success: d < 1.0,
            manifold_distance: d,
            l2: PairedL2 {
                l2_x: d,
                l2_z: Some(2.0 * d),
                baseline_x: None,
                baseline_z: None,
                failure: None,
            },
            oracle_prediction: 0.7,
            oracle_hit: true,
            im1: Some(d / 3.0),
            knn_agreement: None,
        };
        let r = EvaluationReport::new("latent", "00", vec![item(0.1), item(0.7), item(1.3)]).unwrap();
        assert!((r.aggregates.success_rate - 2.0 / 3.0).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(EvaluationReport::load(&p).unwrap(), r);
        let mut bad = r.clone();
        bad.items[0].manifold_distance = 5.0;
        bad.save(&p).unwrap();
        assert!(EvaluationReport::load(&p).is_err());
    }
}
