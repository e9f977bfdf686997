//! Executable checks: the high-mask collapse and diversity probes, finite
//! difference gradient checks and formula oracles for every loss.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_mask_batch, generate_domain_pair, make_mask, DomainSplits, MaskSpec};
use crate::error::{Result, TemsrError};
use crate::losses::{
    ardm_from_features, coral_loss, entropy, entropy_from_logits, seg_ent_loss, seg_loss, seg_sim_from_aggregates,
    seg_sim_loss, trg_ent_loss, SegLoss, SimPenalty, SimilarityParams, SourceModel,
};
use crate::nets::{Classifier, ClassifierSpec, Encoder, EncoderSpec, Module};
use crate::trainer::{
    encode_all, pretrain_source, rng_stream, run_ablation, AdaptInputs, ExperimentConfig, RunOptions, SourceModelOwned,
    Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: String,
    pub passed: bool,
    pub stats: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
}

impl PropertyReport {
    fn new(property: &str, passed: bool, stats: BTreeMap<String, f64>, seeds: Vec<u64>) -> Self {
        PropertyReport {
            property: property.to_string(),
            passed,
            stats,
            seeds,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Frozen thresholds for the collapse probe.
pub const COLLAPSE_MAX_REL_STD: f64 = 0.10;
pub const COLLAPSE_MAX_ENTROPY_FRACTION: f64 = 0.05;
pub const DIVERSE_MIN_REL_STD: f64 = 0.50;

/// Setup shared by the training probes: the experiment to run and how many
/// source-like epochs to optimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub experiment: ExperimentConfig,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            experiment: ExperimentConfig::default(),
            epochs: 30,
        }
    }
}

impl ProbeConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ProbeConfig = toml::from_str(text).map_err(|e| TemsrError::Config(e.to_string()))?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}

/// Measurements of one source-like-only run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryStats {
    pub mean_entropy: f64,
    /// Across-sample std of recovered values at masked points over the same
    /// statistic for the original values.
    pub relative_masked_std: f64,
    pub pairwise_feature_distance: f64,
    pub to_original_feature_distance: f64,
    /// Share of recovered samples assigned to the most frequent class.
    pub majority_class_fraction: f64,
}

/// sqrt(mean over (channel, t) of the across-sample variance at masked
/// points) for `x`, restricted to points masked in at least two samples.
fn masked_spread(x: &Array3<f64>, masks: &[MaskSpec]) -> f64 {
    let (_, n, l) = x.dim();
    let mut total = 0.0;
    let mut cells = 0usize;
    for t in 0..l {
        let rows: Vec<usize> = (0..masks.len()).filter(|&i| masks[i].masked[t]).collect();
        if rows.len() < 2 {
            continue;
        }
        for c in 0..n {
            let vals: Vec<f64> = rows.iter().map(|&i| x[[i, c, t]]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            cells += 1;
        }
    }
    (total / cells.max(1) as f64).sqrt()
}

fn mean_pairwise_distance(z: &Array2<f64>) -> f64 {
    let b = z.nrows();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..b {
        for j in (i + 1)..b {
            total += (&z.row(i) - &z.row(j)).mapv(|v| v * v).sum().sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Trains the recovery branch alone (every epoch source-like, alignment
/// never stepped) and measures the recovered target test split.
pub fn source_like_run(cfg: &ProbeConfig, mask_ratio: f64, ardm: bool, seed: u64) -> Result<RecoveryStats> {
    source_like_stats(&ProbeSetup::new(cfg, seed)?, cfg, mask_ratio, ardm, seed)
}

/// Data and pretrained source model for one seed, shared between the
/// runs of a probe.
struct ProbeSetup {
    src: DomainSplits,
    trg: DomainSplits,
    model: SourceModelOwned,
}

impl ProbeSetup {
    fn new(cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        let exp = cfg.experiment.with_seed(seed);
        let (src, trg) = generate_domain_pair(&exp.data, seed)?;
        let model = pretrain_source(&src.train, &exp.encoder_spec(), &exp.pretrain, seed)?;
        Ok(ProbeSetup { src, trg, model })
    }
}

fn source_like_stats(setup: &ProbeSetup, cfg: &ProbeConfig, mask_ratio: f64, ardm: bool, seed: u64) -> Result<RecoveryStats> {
    let ProbeSetup { src, trg, model } = setup;
    let exp = cfg.experiment.with_seed(seed);
    let mut adapt = exp.adapt.clone();
    adapt.mask_ratio = mask_ratio;
    adapt.epochs_total = cfg.epochs;
    adapt.epochs_srclike = Some(cfg.epochs);
    adapt.cycle = false;
    let target = trg.train.without_labels();
    let inputs = AdaptInputs {
        target: &target,
        target_test: &trg.test,
        source_test: &src.test,
    };
    let variant = if ardm { Variant::Full } else { Variant::NoArdm };
    let run = run_ablation(variant, inputs, &model.encoder, &model.classifier, &adapt, RunOptions::default())?;

    let x = trg.test.to_batch();
    let l = x.len_of(Axis(2));
    let mut rng = rng_stream(seed, 30);
    let masks = (0..x.len_of(Axis(0)))
        .map(|_| make_mask(l, mask_ratio, adapt.mask_blocks, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let x_sl = run.recovery.recover(&apply_mask_batch(&x, &masks)?, &masks)?;
    let z_sl = encode_all(&model.encoder, &x_sl)?;
    let z_t = encode_all(&model.encoder, &x)?;
    let logits = model.classifier.forward(&z_sl)?.logits;
    let mean_entropy =
        logits.outer_iter().map(|r| entropy_from_logits(r).0).sum::<f64>() / logits.nrows() as f64;
    let mut counts = vec![0usize; logits.ncols()];
    for r in logits.outer_iter() {
        let k = (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best });
        counts[k] += 1;
    }
    let majority = *counts.iter().max().unwrap_or(&0) as f64 / logits.nrows() as f64;
    let to_original = z_sl
        .outer_iter()
        .zip(z_t.outer_iter())
        .map(|(a, b)| (&a - &b).mapv(|v| v * v).sum().sqrt())
        .sum::<f64>()
        / z_sl.nrows() as f64;
    Ok(RecoveryStats {
        mean_entropy,
        relative_masked_std: masked_spread(&x_sl, &masks) / masked_spread(&x, &masks).max(1e-12),
        pairwise_feature_distance: mean_pairwise_distance(&z_sl),
        to_original_feature_distance: to_original,
        majority_class_fraction: majority,
    })
}

/// High masking without ARDM should collapse (`collapse = true`); low
/// masking with ARDM should not.
pub fn collapse_probe(cfg: &ProbeConfig, mask_ratio: f64, ardm: bool, seeds: &[u64]) -> Result<PropertyReport> {
    let classes = cfg.experiment.data.classes as f64;
    let expect_collapse = !ardm;
    let mut stats = BTreeMap::new();
    let mut passed = true;
    for &seed in seeds {
        let s = source_like_run(cfg, mask_ratio, ardm, seed)?;
        stats.insert(format!("seed{seed}.relative_masked_std"), s.relative_masked_std);
        stats.insert(format!("seed{seed}.mean_entropy"), s.mean_entropy);
        stats.insert(format!("seed{seed}.majority_class_fraction"), s.majority_class_fraction);
        passed &= if expect_collapse {
            s.relative_masked_std < COLLAPSE_MAX_REL_STD
                && s.mean_entropy < COLLAPSE_MAX_ENTROPY_FRACTION * classes.ln()
        } else {
            s.relative_masked_std > DIVERSE_MIN_REL_STD
        };
    }
    stats.insert("mask_ratio".into(), mask_ratio);
    let name = if expect_collapse { "collapse_high_mask" } else { "no_collapse_low_mask_ardm" };
    Ok(PropertyReport::new(name, passed, stats, seeds.to_vec()))
}

/// ARDM on against off after the source-like phase. Returns one report for
/// the pairwise recovered-feature distance and one for the
/// recovered-to-original distance; each passes when ARDM-on is strictly
/// larger in every seed.
pub fn diversity_probe(cfg: &ProbeConfig, seeds: &[u64]) -> Result<Vec<PropertyReport>> {
    let mask_ratio = cfg.experiment.adapt.mask_ratio;
    let mut pair = BTreeMap::new();
    let mut orig = BTreeMap::new();
    let (mut pair_ok, mut orig_ok) = (true, true);
    for &seed in seeds {
        let setup = ProbeSetup::new(cfg, seed)?;
        let on = source_like_stats(&setup, cfg, mask_ratio, true, seed)?;
        let off = source_like_stats(&setup, cfg, mask_ratio, false, seed)?;
        pair.insert(format!("seed{seed}.on"), on.pairwise_feature_distance);
        pair.insert(format!("seed{seed}.off"), off.pairwise_feature_distance);
        orig.insert(format!("seed{seed}.on"), on.to_original_feature_distance);
        orig.insert(format!("seed{seed}.off"), off.to_original_feature_distance);
        pair_ok &= on.pairwise_feature_distance > off.pairwise_feature_distance;
        orig_ok &= on.to_original_feature_distance > off.to_original_feature_distance;
    }
    Ok(vec![
        PropertyReport::new("diversity_pairwise", pair_ok, pair, seeds.to_vec()),
        PropertyReport::new("diversity_to_original", orig_ok, orig, seeds.to_vec()),
    ])
}

pub const LOSS_NAMES: [&str; 7] = ["entropy", "seg_ent", "seg_sim", "seg", "ardm", "coral", "trg_ent"];

const FD_STEP: f64 = 1e-5;

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error with a 1e-6 floor so exact zeros meet difference noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

struct TinyInstance {
    encoder: Encoder,
    classifier: Classifier,
    x: Array3<f64>,
    masks: Vec<MaskSpec>,
}

fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Encoder::new(
        EncoderSpec {
            in_channels: 2,
            widths: [3, 4, 5],
            kernels: [3, 3, 3],
            strides: [1, 1, 1],
        },
        &mut rng,
    );
    for bn in &mut encoder.norms {
        bn.running_mean.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        bn.running_var.mapv_inplace(|_| rng.gen_range(0.5..1.5));
    }
    let mut classifier = Classifier::new(ClassifierSpec { input_dim: 5, classes: 3 }, &mut rng);
    classifier.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v *= 4.0));
    let x = Array3::from_shape_fn((2, 2, 16), |_| rng.gen_range(-1.0..1.0));
    let masks = vec![MaskSpec::from_range(16, 4, 7), MaskSpec::from_range(16, 9, 14)];
    TinyInstance {
        encoder,
        classifier,
        x,
        masks,
    }
}

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Analytic gradient of a loss against central differences on a tiny
/// 64-bit instance, with respect to the loss's trainable input.
pub fn gradient_check(loss: &str, tolerance: f64, seed: u64) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (analytic, numeric): (Vec<f64>, Vec<f64>) = match loss {
        "entropy" => {
            let z: Array1<f64> = Array1::from_shape_fn(5, |_| rng.gen_range(-2.0..2.0));
            let g = entropy_from_logits(z.view()).1;
            let f = |v: &[f64]| entropy_from_logits(Array1::from_vec(v.to_vec()).view()).0;
            (g.to_vec(), central_diff(&f, z.as_slice().unwrap()))
        }
        "seg_ent" | "seg_sim" | "seg" => {
            let t = tiny_instance(seed);
            let model = SourceModel::new(&t.encoder, &t.classifier);
            let run = |x: &Array3<f64>| -> SegLoss {
                match loss {
                    "seg_ent" => seg_ent_loss(&model, x, &t.masks, 0.75),
                    "seg_sim" => seg_sim_loss(&model, x, &t.masks, 0.75, SimPenalty::Absolute),
                    _ => seg_loss(&model, x, &t.masks, 0.75, SimPenalty::Absolute),
                }
                .expect("tiny instance is valid")
            };
            let pick = |l: &SegLoss| match loss {
                "seg_ent" => l.seg_ent,
                "seg_sim" => l.seg_sim,
                _ => l.value(),
            };
            let out = run(&t.x);
            let dim = t.x.dim();
            let f = |v: &[f64]| pick(&run(&Array3::from_shape_vec(dim, v.to_vec()).unwrap()));
            (out.grad.into_raw_vec_and_offset().0, central_diff(&f, t.x.as_slice().unwrap()))
        }
        "ardm" => {
            // B = 2, D = 4
            let p = SimilarityParams::default();
            let z = rand2(&mut rng, 2, 4);
            let zt = rand2(&mut rng, 2, 4);
            let za = rand2(&mut rng, 1, 4);
            let (_, g) = ardm_from_features(&z, &zt, za.row(0), &p)?;
            let f = |v: &[f64]| {
                let zz = Array2::from_shape_vec((2, 4), v.to_vec()).unwrap();
                ardm_from_features(&zz, &zt, za.row(0), &p).unwrap().0
            };
            (g.into_raw_vec_and_offset().0, central_diff(&f, z.as_slice().unwrap()))
        }
        "coral" => {
            // 4 x 3 features on each side
            let a = rand2(&mut rng, 4, 3);
            let b = rand2(&mut rng, 4, 3);
            let out = coral_loss(&a, &b)?;
            let f = |v: &[f64]| coral_loss(&a, &Array2::from_shape_vec((4, 3), v.to_vec()).unwrap()).unwrap().value;
            (out.grad_b.into_raw_vec_and_offset().0, central_diff(&f, b.as_slice().unwrap()))
        }
        "trg_ent" => {
            let t = tiny_instance(seed);
            let out = trg_ent_loss(&t.encoder, &t.classifier, &t.x)?;
            let f = |p: &[f64]| {
                let mut e = t.encoder.clone();
                e.set_flat_params(p);
                trg_ent_loss(&e, &t.classifier, &t.x).unwrap().value
            };
            (out.encoder_grad.flat_params(), central_diff(&f, &t.encoder.flat_params()))
        }
        other => return Err(TemsrError::Config(format!("no gradient check for loss {other}"))),
    };
    let err = max_relative_error(&analytic, &numeric);
    let mut stats = BTreeMap::new();
    stats.insert("max_relative_error".into(), err);
    stats.insert("tolerance".into(), tolerance);
    stats.insert("components".into(), analytic.len() as f64);
    Ok(PropertyReport::new(&format!("gradient_{loss}"), err < tolerance, stats, vec![seed]))
}

/// Default tolerance per loss.
pub fn gradient_tolerance(loss: &str) -> f64 {
    if loss == "coral" || loss == "entropy" {
        1e-6
    } else {
        1e-4
    }
}

/// Each loss against a direct evaluation of its formula on random inputs.
/// Returns the report and the largest absolute discrepancy.
pub fn oracle_check(loss: &str, trials: usize, seed: u64) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let tolerance = match loss {
        "ardm" => 1e-7,
        _ => 1e-9,
    };
    for _ in 0..trials {
        let diff = match loss {
            "entropy" => {
                let k = rng.gen_range(2..10);
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let mut direct = 0.0;
                for &v in &p {
                    if v > 0.0 {
                        direct -= v * v.ln();
                    }
                }
                (entropy(&p)? - direct).abs()
            }
            "seg_sim" => {
                let agg: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..20.0));
                let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
                let direct: f64 = pairs.iter().map(|&(a, b)| (agg[a] - agg[b]).abs()).sum();
                (seg_sim_from_aggregates(&agg, SimPenalty::Absolute).0 - direct).abs()
            }
            "coral" => {
                let d = rng.gen_range(1..6);
                let (na, nb) = (rng.gen_range(2..9), rng.gen_range(2..9));
                let a = rand2(&mut rng, na, d);
                let b = rand2(&mut rng, nb, d);
                let cov = |x: &Array2<f64>| {
                    let n = x.nrows();
                    let mut c = vec![vec![0.0; d]; d];
                    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
                    for p in 0..d {
                        for q in 0..d {
                            let s: f64 = (0..n).map(|i| (x[[i, p]] - mean[p]) * (x[[i, q]] - mean[q])).sum();
                            c[p][q] = s / (n - 1) as f64;
                        }
                    }
                    c
                };
                let (ca, cb) = (cov(&a), cov(&b));
                let mut fro = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        fro += (ca[p][q] - cb[p][q]).powi(2);
                    }
                }
                (coral_loss(&a, &b)?.value - fro / (4.0 * (d * d) as f64)).abs()
            }
            "ardm" => {
                let b = rng.gen_range(1..6);
                let d = rng.gen_range(2..6);
                let p = SimilarityParams {
                    temperature: rng.gen_range(0.05..1.0),
                    normalize: true,
                };
                let z = rand2(&mut rng, b, d);
                let zt = rand2(&mut rng, b, d);
                let za = rand2(&mut rng, 1, d);
                let unit = |v: Vec<f64>| {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
                };
                let s = |a: &[f64], c: &[f64]| {
                    let (a, c) = (unit(a.to_vec()), unit(c.to_vec()));
                    (a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>() / p.temperature).exp()
                };
                let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
                let mut direct = 0.0;
                for i in 0..b {
                    let sa = s(&row(&z, i), &row(&za, 0));
                    let st = s(&row(&z, i), &row(&zt, i));
                    let mut denom = sa + st;
                    for k in 0..b {
                        if k != i {
                            denom += s(&row(&z, i), &row(&z, k));
                        }
                    }
                    direct -= (sa / denom).ln();
                }
                direct /= b as f64;
                (ardm_from_features(&z, &zt, za.row(0), &p)?.0 - direct).abs()
            }
            other => return Err(TemsrError::Config(format!("no oracle for loss {other}"))),
        };
        worst = worst.max(diff);
    }
    let mut stats = BTreeMap::new();
    stats.insert("max_abs_discrepancy".into(), worst);
    stats.insert("tolerance".into(), tolerance);
    stats.insert("trials".into(), trials as f64);
    Ok(PropertyReport::new(&format!("oracle_{loss}"), worst < tolerance, stats, vec![seed]))
}

pub const ORACLE_NAMES: [&str; 4] = ["entropy", "seg_sim", "coral", "ardm"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradient_checks_pass() {
        for loss in LOSS_NAMES {
            let r = gradient_check(loss, gradient_tolerance(loss), 3).unwrap();
            assert!(r.passed, "{}", r.to_json_line());
        }
        assert!(gradient_check("nope", 1e-4, 0).is_err());
    }

    #[test]
    fn all_oracles_pass() {
        for loss in ORACLE_NAMES {
            let r = oracle_check(loss, 100, 5).unwrap();
            assert!(r.passed, "{}", r.to_json_line());
        }
    }

    #[test]
    fn report_is_one_json_line() {
        let r = oracle_check("entropy", 3, 1).unwrap();
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let back: PropertyReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn masked_spread_of_constant_fill_is_zero() {
        let x = Array3::from_shape_fn((4, 2, 10), |(i, c, t)| if (3..6).contains(&t) { 1.5 } else { (i + c + t) as f64 });
        let masks = vec![MaskSpec::from_range(10, 3, 6); 4];
        assert_eq!(masked_spread(&x, &masks), 0.0);
    }
}
