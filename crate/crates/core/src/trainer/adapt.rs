use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{batches, encode_all, rng_stream, step_module, AdaptConfig};
use crate::anchor_bank::{batch_anchor, AnchorBank};
use crate::datagen::{apply_mask_batch, make_mask, Dataset, MaskSpec};
use crate::error::{Result, TemsrError};
use crate::losses::{
    ardm_from_features, coral_loss, total_loss, trg_ent_from_features, LossParts, Phase, SegmentPasses,
    SimilarityParams, SourceModel,
};
use crate::metrics::{macro_f1, DiscrepancyCurve, FeatureSnapshot, MetricsRow};
use crate::nets::{Classifier, Encoder, Mode, ModelHandle, Module, OptimizerHandle, Recovery, RecoverySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Target predictions come from the frozen source model applied to
    /// recovered target samples.
    SrcLikeOnly,
    /// Sample-level entropy replaces the segment objective.
    NoSeg,
    NoArdm,
    /// Anchors are chosen among the current batch.
    NoBank,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SrcLikeOnly,
        Variant::NoSeg,
        Variant::NoArdm,
        Variant::NoBank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SrcLikeOnly => "src_like_only",
            Variant::NoSeg => "no_seg",
            Variant::NoArdm => "no_ardm",
            Variant::NoBank => "no_bank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| TemsrError::Config(format!("unknown variant {s}")))
    }
}

/// Data seen by one adaptation run. Only `target` feeds gradients; the
/// labeled target test split and the held-out source split are read for
/// MF1 and discrepancy logging.
#[derive(Clone, Copy)]
pub struct AdaptInputs<'a> {
    pub target: &'a Dataset,
    pub target_test: &'a Dataset,
    pub source_test: &'a Dataset,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Back-propagate every loss term separately and record the gradient
    /// norm each one delivered to each trainable module.
    pub instrument: bool,
}

/// Norm of the gradient one loss term delivered to one module's
/// parameters in one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub term: String,
    pub module: String,
    pub norm: f64,
}

pub struct RunArtifacts {
    pub variant: Variant,
    pub metrics: Vec<MetricsRow>,
    pub curve: DiscrepancyCurve,
    pub recovery: Recovery,
    pub target_encoder: Encoder,
    pub bank: AnchorBank,
    /// MF1 of the target encoder after the last epoch.
    pub final_mf1: f64,
    /// MF1 of the frozen source model on recovered target test samples.
    pub srclike_mf1: f64,
    pub routes: Vec<RouteRecord>,
    /// Fingerprints of (source encoder, classifier) before and after.
    pub frozen_before: (String, String),
    pub frozen_after: (String, String),
}

impl RunArtifacts {
    /// The number a variant reports.
    pub fn reported_mf1(&self) -> f64 {
        match self.variant {
            Variant::SrcLikeOnly => self.srclike_mf1,
            _ => self.final_mf1,
        }
    }
}

pub const TERMS: [&str; 4] = ["L_Seg", "L_ARDM", "L_Align", "L_TrgEnt"];

fn norm<M: Module>(m: &M) -> f64 {
    let mut s = 0.0;
    m.visit_params(&mut |_, p| s += p.iter().map(|v| v * v).sum::<f64>());
    s.sqrt()
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TemsrError::training(term, format!("loss value {v}")))
    }
}

#[derive(Default)]
struct EpochSums {
    parts: LossParts,
    total: f64,
    batches: usize,
}

struct Evaluator<'a> {
    x_test: Array3<f64>,
    labels: Vec<usize>,
    classes: usize,
    masks: Vec<MaskSpec>,
    source_features: Array2<f64>,
    source: SourceModel<'a>,
}

struct EvalResult {
    mf1: f64,
    srclike_mf1: f64,
    source_like: Array2<f64>,
    target: Array2<f64>,
}

impl<'a> Evaluator<'a> {
    fn run(&self, recovery: &Recovery, target_encoder: &Encoder) -> Result<EvalResult> {
        let masked = apply_mask_batch(&self.x_test, &self.masks)?;
        let x_sl = recovery.recover(&masked, &self.masks)?;
        let source_like = encode_all(self.source.encoder, &x_sl)?;
        let target = encode_all(target_encoder, &self.x_test)?;
        let clf = self.source.classifier;
        Ok(EvalResult {
            mf1: macro_f1(&self.labels, &clf.predict(&target)?, self.classes)?,
            srclike_mf1: macro_f1(&self.labels, &clf.predict(&source_like)?, self.classes)?,
            source_like,
            target,
        })
    }
}

/// Full two-phase adaptation.
pub fn adapt(
    inputs: AdaptInputs,
    source_encoder: &Encoder,
    classifier: &Classifier,
    cfg: &AdaptConfig,
    opts: RunOptions,
) -> Result<RunArtifacts> {
    run_ablation(Variant::Full, inputs, source_encoder, classifier, cfg, opts)
}

pub fn run_ablation(
    variant: Variant,
    inputs: AdaptInputs,
    source_encoder: &Encoder,
    classifier: &Classifier,
    cfg: &AdaptConfig,
    opts: RunOptions,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let target = inputs.target;
    let (n, l) = target
        .shape()
        .ok_or_else(|| TemsrError::Data("empty target dataset".into()))?;
    if inputs.target_test.shape() != Some((n, l)) || inputs.source_test.shape() != Some((n, l)) {
        return Err(TemsrError::Shape("target and source splits disagree in shape".into()));
    }
    let seed = cfg.seed;
    let use_ardm = variant != Variant::NoArdm;
    let use_segments = variant != Variant::NoSeg;
    let use_bank = variant != Variant::NoBank;
    let sim = SimilarityParams {
        temperature: cfg.temperature,
        normalize: cfg.normalize_features,
    };

    // frozen source side; all reads go through the handles
    let fs = ModelHandle::frozen(source_encoder.clone());
    let g = ModelHandle::frozen(classifier.clone());
    let frozen_before = (fs.module().fingerprint(), g.module().fingerprint());
    let model = SourceModel::new(fs.module(), g.module());

    let mut recovery = Recovery::new(
        RecoverySpec {
            channels: n,
            ..cfg.recovery.clone()
        },
        &mut rng_stream(seed, 20),
    );
    let mut target_encoder = source_encoder.clone();
    let mut opt_r = OptimizerHandle::for_module(cfg.recovery_optimizer, &recovery);
    let mut opt_t = OptimizerHandle::for_module(cfg.target_optimizer, &target_encoder);

    let mask_for = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> Result<Vec<MaskSpec>> {
        (0..count).map(|_| make_mask(l, cfg.mask_ratio, cfg.mask_blocks, rng)).collect()
    };

    // bank starts from one full recovery pass over the target set
    let mut bank = AnchorBank::new(target.len());
    {
        let mut rng = rng_stream(seed, 21);
        let x = target.to_batch();
        let masks = mask_for(&mut rng, target.len())?;
        let x_sl = recovery.recover(&apply_mask_batch(&x, &masks)?, &masks)?;
        let feats = encode_all(model.encoder, &x_sl)?;
        let cache = model.classifier.forward(&feats)?;
        for (i, row) in cache.logits.outer_iter().enumerate() {
            let h = crate::losses::entropy_from_logits(row).0;
            bank.update(i, x_sl.index_axis(Axis(0), i).to_owned(), h)?;
        }
    }

    let evaluator = Evaluator {
        x_test: inputs.target_test.to_batch(),
        labels: inputs
            .target_test
            .labels()
            .ok_or_else(|| TemsrError::Data("target test split needs labels for MF1".into()))?,
        classes: inputs.target_test.class_count(),
        masks: mask_for(&mut rng_stream(seed, 22), inputs.target_test.len())?,
        source_features: encode_all(model.encoder, &inputs.source_test.to_batch())?,
        source: model,
    };

    let mut curve = DiscrepancyCurve::default();
    let mut metrics = Vec::with_capacity(cfg.epochs_total + 1);
    let mut routes = Vec::new();
    let mut log_epoch = |epoch: usize,
                         phase: &str,
                         sums: Option<&EpochSums>,
                         ev: &EvalResult,
                         curve: &mut DiscrepancyCurve|
     -> Result<()> {
        let row = curve.track(
            epoch,
            &FeatureSnapshot {
                source: &evaluator.source_features,
                source_like: &ev.source_like,
                target: &ev.target,
            },
            cfg.kl_estimator,
        )?;
        let mean = |v: f64| sums.map(|s| v / s.batches.max(1) as f64);
        let p = sums.map(|s| s.parts).unwrap_or_default();
        metrics.push(MetricsRow {
            epoch,
            phase: phase.to_string(),
            l_seg: mean(p.seg),
            l_ardm: mean(p.ardm),
            l_align: mean(p.align),
            l_trg_ent: mean(p.trg_ent),
            total: sums.and_then(|s| mean(s.total)),
            mf1_target: ev.mf1,
            kl_src_srclike: row.src_srclike,
            kl_srclike_trg: row.srclike_trg,
            kl_src_trg: row.src_trg,
        });
        Ok(())
    };

    let mut last = evaluator.run(&recovery, &target_encoder)?;
    log_epoch(0, "init", None, &last, &mut curve)?;

    for epoch in 0..cfg.epochs_total {
        let phase = cfg.phase_of(epoch);
        opt_r.set_epoch(epoch);
        opt_t.set_epoch(epoch);
        let mut sums = EpochSums::default();
        let plan = batches(target.len(), cfg.batch_size, &mut rng_stream(seed, 1000 + epoch as u64));
        for (bi, idx) in plan.iter().enumerate() {
            let mut rng = rng_stream(seed, ((epoch as u64 + 1) << 24) | bi as u64);
            // (1) mask and recover
            let x_t = target.batch(idx);
            let masks = mask_for(&mut rng, idx.len())?;
            let masked = apply_mask_batch(&x_t, &masks)?;
            let (x_sl, rcache) = recovery.forward(&masked, &masks)?;
            let complete = model.pass(&x_sl)?;
            let entropies = complete.entropies();

            // (2) anchor from the bank as it stood before this batch, then L_ARDM
            let (ardm, dz_ardm) = if use_ardm {
                let anchor = if use_bank {
                    bank.representative_anchor(cfg.anchor_ratio)?.values
                } else {
                    let rows: Vec<Array2<f64>> = x_sl.outer_iter().map(|v| v.to_owned()).collect();
                    batch_anchor(&rows, &entropies, cfg.anchor_ratio)?
                };
                let z_t = model.features(&x_t)?;
                let z_a = model.features(&anchor.insert_axis(Axis(0)))?;
                let (v, dz) = ardm_from_features(&complete.features, &z_t, z_a.row(0), &sim)?;
                (finite("L_ARDM", v)?, Some(dz))
            } else {
                (0.0, None)
            };

            // (3) bank update
            for (row, &id) in idx.iter().enumerate() {
                bank.update(id, x_sl.index_axis(Axis(0), row).to_owned(), entropies[row])?;
            }

            // (4) segment objective
            let passes = if use_segments {
                Some(SegmentPasses::evaluate(&model, &x_sl, &masks, cfg.proportion, &complete)?)
            } else {
                None
            };
            let seg = finite(
                "L_Seg",
                match &passes {
                    Some(p) => p.seg_ent() + p.seg_sim(cfg.sim_penalty),
                    None => entropies.iter().sum(),
                },
            )?;

            // (5) alignment of F_S(X_Sl) with F_T(X_T); source-like features are constants
            let (h_t, tcache) = target_encoder.forward(&x_t, Mode::Train)?;
            let coral = coral_loss(&complete.features, &h_t)?;
            let align = finite("L_Align", coral.value)?;

            // (6) target entropy
            let (trg_ent, dh_ent) = trg_ent_from_features(model.classifier, &h_t)?;
            let trg_ent = finite("L_TrgEnt", trg_ent)?;

            // (7) compose
            let parts = LossParts {
                seg,
                ardm,
                align,
                trg_ent,
            };
            let total = finite("total", total_loss(&parts, cfg.lambda_seg, cfg.lambda_ardm, phase))?;
            sums.parts.seg += seg;
            sums.parts.ardm += ardm;
            sums.parts.align += align;
            sums.parts.trg_ent += trg_ent;
            sums.total += total;
            sums.batches += 1;

            // (8) route gradients
            let mut record = |term: &str, module: &str, v: f64| {
                if opts.instrument {
                    routes.push(RouteRecord {
                        epoch,
                        phase,
                        term: term.to_string(),
                        module: module.to_string(),
                        norm: v,
                    });
                }
            };
            let mut applied: Vec<(&str, &str, f64)> = Vec::new();

            if phase == Phase::SourceLike {
                let seg_w = match &passes {
                    Some(p) => p.seg_weights(cfg.sim_penalty),
                    None => [1.0, 0.0, 0.0, 0.0],
                };
                let seg_w = seg_w.map(|w| w * cfg.lambda_seg);
                let mut dx_seg = Array3::zeros(x_sl.dim());
                let dfeat_seg = match &passes {
                    Some(p) => p.backward(&model, &complete, seg_w, &mut dx_seg),
                    None => complete.entropy_feature_grad(&model, &vec![seg_w[0]; idx.len()]),
                };
                let dfeat_ardm = dz_ardm.map(|dz| dz * cfg.lambda_ardm);
                let mut grad_r = recovery.zeros_like();
                if opts.instrument {
                    dx_seg += &complete.input_grad(&model, &dfeat_seg);
                    let mut gs = recovery.zeros_like();
                    recovery.backward(&rcache, &dx_seg, &mut gs);
                    applied.push(("L_Seg", "recovery", norm(&gs)));
                    grad_r.add_assign_params(&gs);
                    let mut ga = recovery.zeros_like();
                    if let Some(d) = &dfeat_ardm {
                        recovery.backward(&rcache, &complete.input_grad(&model, d), &mut ga);
                    }
                    applied.push(("L_ARDM", "recovery", norm(&ga)));
                    grad_r.add_assign_params(&ga);
                } else {
                    let dfeat = match &dfeat_ardm {
                        Some(d) => dfeat_seg + d,
                        None => dfeat_seg,
                    };
                    dx_seg += &complete.input_grad(&model, &dfeat);
                    recovery.backward(&rcache, &dx_seg, &mut grad_r);
                }
                step_module(&mut opt_r, &mut recovery, &grad_r, "L_Seg+L_ARDM")?;

                let mut grad_t = target_encoder.zeros_like();
                target_encoder.backward(&tcache, &dh_ent, Some(&mut grad_t));
                applied.push(("L_TrgEnt", "target_encoder", norm(&grad_t)));
                step_module(&mut opt_t, &mut target_encoder, &grad_t, "L_TrgEnt")?;
            } else {
                let mut grad_t = target_encoder.zeros_like();
                if opts.instrument {
                    let mut ga = target_encoder.zeros_like();
                    target_encoder.backward(&tcache, &coral.grad_b, Some(&mut ga));
                    applied.push(("L_Align", "target_encoder", norm(&ga)));
                    let mut ge = target_encoder.zeros_like();
                    target_encoder.backward(&tcache, &dh_ent, Some(&mut ge));
                    applied.push(("L_TrgEnt", "target_encoder", norm(&ge)));
                    grad_t.add_assign_params(&ga);
                    grad_t.add_assign_params(&ge);
                } else {
                    target_encoder.backward(&tcache, &(&coral.grad_b + &dh_ent), Some(&mut grad_t));
                }
                step_module(&mut opt_t, &mut target_encoder, &grad_t, "L_Align+L_TrgEnt")?;
            }
            target_encoder.absorb(&tcache);

            for term in TERMS {
                for module in ["recovery", "target_encoder", "source_encoder", "classifier"] {
                    let v = applied
                        .iter()
                        .find(|(t, m, _)| *t == term && *m == module)
                        .map_or(0.0, |a| a.2);
                    record(term, module, v);
                }
            }
        }
        last = evaluator.run(&recovery, &target_encoder)?;
        log_epoch(epoch + 1, phase.as_str(), Some(&sums), &last, &mut curve)?;
    }

    let frozen_after = (fs.module().fingerprint(), g.module().fingerprint());
    Ok(RunArtifacts {
        variant,
        metrics,
        curve,
        recovery,
        target_encoder,
        bank,
        final_mf1: last.mf1,
        srclike_mf1: last.srclike_mf1,
        routes,
        frozen_before,
        frozen_after,
    })
}
