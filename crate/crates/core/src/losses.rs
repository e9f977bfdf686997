//! Differentiable objectives. Each loss returns its value together with the
//! gradient with respect to its trainable input (recovered samples, target
//! features); frozen networks are only ever back-propagated for input
//! gradients, never for parameter gradients.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::MaskSpec;
use crate::error::{Result, TemsrError};
use crate::nets::{Classifier, ClassifierCache, Encoder, EncoderCache, Mode, Module};
use crate::segments::{extract_from_view, pad_edge, pad_edge_backward, SegmentKind};

/// Shannon entropy in nats, `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(TemsrError::Domain(format!("probability component {v} is invalid")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TemsrError::Domain(format!("probabilities sum to {sum}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Entropy of `softmax(logits)` and its gradient with respect to the logits.
pub fn entropy_from_logits(logits: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let logp = logits.mapv(|z| z - lse);
    let p = logp.mapv(f64::exp);
    let h = -(&p * &logp).sum();
    let grad = -(&p * &(&logp + h));
    (h, grad)
}

/// Eval-mode pass through the frozen source encoder and classifier, keeping
/// what is needed to back-propagate to the input.
pub struct FrozenPass {
    pub features: Array2<f64>,
    enc_cache: EncoderCache,
    clf_cache: ClassifierCache,
}

impl FrozenPass {
    pub fn probs(&self) -> &Array2<f64> {
        &self.clf_cache.probs
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.clf_cache.logits
    }

    /// Per-row prediction entropy.
    pub fn entropies(&self) -> Vec<f64> {
        self.logits().outer_iter().map(|r| entropy_from_logits(r).0).collect()
    }

    /// Gradient of `sum_i w_i H_i` with respect to the features.
    pub fn entropy_feature_grad(&self, model: &SourceModel, weights: &[f64]) -> Array2<f64> {
        let mut dlogits = Array2::zeros(self.logits().dim());
        for (i, (row, &w)) in self.logits().outer_iter().zip(weights).enumerate() {
            if w != 0.0 {
                let (_, g) = entropy_from_logits(row);
                dlogits.row_mut(i).assign(&(g * w));
            }
        }
        model.classifier.backward_logits(&self.clf_cache, &dlogits, None)
    }

    /// Back-propagates a feature gradient to the input.
    pub fn input_grad(&self, model: &SourceModel, dfeat: &Array2<f64>) -> Array3<f64> {
        model.encoder.backward(&self.enc_cache, dfeat, None)
    }
}

/// The pretrained source encoder and classifier, used read-only.
#[derive(Clone, Copy)]
pub struct SourceModel<'a> {
    pub encoder: &'a Encoder,
    pub classifier: &'a Classifier,
}

impl<'a> SourceModel<'a> {
    pub fn new(encoder: &'a Encoder, classifier: &'a Classifier) -> Self {
        SourceModel { encoder, classifier }
    }

    pub fn pass(&self, x: &Array3<f64>) -> Result<FrozenPass> {
        let (features, enc_cache) = self.encoder.forward(x, Mode::Eval)?;
        let clf_cache = self.classifier.forward(&features)?;
        Ok(FrozenPass {
            features,
            enc_cache,
            clf_cache,
        })
    }

    pub fn features(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        self.encoder.features(x, Mode::Eval)
    }
}

/// How the segment-consistency differences are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPenalty {
    #[default]
    Absolute,
    Squared,
}

/// `sum_{k<s} pen(E_k - E_s)` over the four kind aggregates and its
/// gradient with respect to each aggregate.
pub fn seg_sim_from_aggregates(agg: &[f64; 4], penalty: SimPenalty) -> (f64, [f64; 4]) {
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        for s in (k + 1)..4 {
            let d = agg[k] - agg[s];
            let (v, g) = match penalty {
                SimPenalty::Absolute => (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }),
                SimPenalty::Squared => (d * d, 2.0 * d),
            };
            value += v;
            grad[k] += g;
            grad[s] -= g;
        }
    }
    (value, grad)
}

struct Member {
    sample: usize,
    start: usize,
    len: usize,
    weight: f64,
}

struct SegmentGroup {
    kind: SegmentKind,
    members: Vec<Member>,
    pass: FrozenPass,
}

/// Frozen-model passes over the early, late and recovered-part segments of
/// a recovered batch, plus the complete-sample pass supplied by the caller.
pub struct SegmentPasses {
    groups: Vec<SegmentGroup>,
    /// `[kind][sample]` entropies; recovered-part entropy is the mean over
    /// that sample's masked blocks.
    pub per_kind: [Vec<f64>; 4],
}

impl SegmentPasses {
    /// `complete` must be the frozen pass over `x_sl` itself.
    pub fn evaluate(
        model: &SourceModel,
        x_sl: &Array3<f64>,
        masks: &[MaskSpec],
        proportion: f64,
        complete: &FrozenPass,
    ) -> Result<Self> {
        let (b, n, _) = x_sl.dim();
        if masks.len() != b {
            return Err(TemsrError::Shape(format!("{} masks for a batch of {b}", masks.len())));
        }
        let min_len = model.encoder.spec.min_len();
        // (kind, padded length) -> members and their padded values
        let mut buckets: BTreeMap<(usize, usize), Vec<(Member, Array2<f64>)>> = BTreeMap::new();
        for (i, mask) in masks.iter().enumerate() {
            let set = extract_from_view(x_sl.index_axis(Axis(0), i), mask, proportion)?;
            let blocks = set.recovered.len() as f64;
            for kind in [SegmentKind::Early, SegmentKind::Late, SegmentKind::Recovered] {
                for seg in set.of_kind(kind) {
                    let weight = if kind == SegmentKind::Recovered { 1.0 / blocks } else { 1.0 };
                    let padded = pad_edge(&seg.values, min_len);
                    buckets.entry((kind.index(), padded.ncols())).or_default().push((
                        Member {
                            sample: i,
                            start: seg.start,
                            len: seg.len(),
                            weight,
                        },
                        padded,
                    ));
                }
            }
        }

        let mut per_kind: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; b]);
        per_kind[0] = complete.entropies();
        let mut groups = Vec::with_capacity(buckets.len());
        for ((kind_idx, len), entries) in buckets {
            let kind = SegmentKind::ALL[kind_idx];
            let mut input = Array3::zeros((entries.len(), n, len));
            for (row, (_, v)) in entries.iter().enumerate() {
                input.index_axis_mut(Axis(0), row).assign(v);
            }
            let pass = model.pass(&input)?;
            let ents = pass.entropies();
            let members: Vec<Member> = entries.into_iter().map(|(m, _)| m).collect();
            for (m, h) in members.iter().zip(&ents) {
                per_kind[kind_idx][m.sample] += m.weight * h;
            }
            groups.push(SegmentGroup { kind, members, pass });
        }
        Ok(SegmentPasses { groups, per_kind })
    }

    /// Batch-aggregated entropy per kind, in `SegmentKind::ALL` order.
    pub fn aggregates(&self) -> [f64; 4] {
        std::array::from_fn(|k| self.per_kind[k].iter().sum())
    }

    pub fn seg_ent(&self) -> f64 {
        self.aggregates().iter().sum()
    }

    pub fn seg_sim(&self, penalty: SimPenalty) -> f64 {
        seg_sim_from_aggregates(&self.aggregates(), penalty).0
    }

    /// Per-kind weights `w_k` so that `d L_Seg / d H_{k,i} = w_k`.
    pub fn seg_weights(&self, penalty: SimPenalty) -> [f64; 4] {
        let (_, g) = seg_sim_from_aggregates(&self.aggregates(), penalty);
        std::array::from_fn(|k| 1.0 + g[k])
    }

    /// Adds the gradient of `sum_k w_k E_k` for the early, late and
    /// recovered kinds into `dx`; the complete kind is returned as a feature
    /// gradient `w_C * d(sum_i H_{C,i}) / d features` so callers can merge it
    /// with other feature-level gradients before one encoder backward pass.
    pub fn backward(
        &self,
        model: &SourceModel,
        complete: &FrozenPass,
        weights: [f64; 4],
        dx: &mut Array3<f64>,
    ) -> Array2<f64> {
        for g in &self.groups {
            let w = weights[g.kind.index()];
            if w == 0.0 {
                continue;
            }
            let row_w: Vec<f64> = g.members.iter().map(|m| w * m.weight).collect();
            let dfeat = g.pass.entropy_feature_grad(model, &row_w);
            let dseg = g.pass.input_grad(model, &dfeat);
            for (row, m) in g.members.iter().enumerate() {
                let d = pad_edge_backward(&dseg.index_axis(Axis(0), row).to_owned(), m.len);
                let mut dst = dx.slice_mut(s![m.sample, .., m.start..m.start + m.len]);
                dst += &d;
            }
        }
        let wc = vec![weights[0]; complete.features.nrows()];
        complete.entropy_feature_grad(model, &wc)
    }
}

/// Value and recovered-sample gradient of a segment objective.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub seg_ent: f64,
    pub seg_sim: f64,
    pub aggregates: [f64; 4],
    pub grad: Array3<f64>,
}

impl SegLoss {
    pub fn value(&self) -> f64 {
        self.seg_ent + self.seg_sim
    }
}

fn seg_objective(
    model: &SourceModel,
    x_sl: &Array3<f64>,
    masks: &[MaskSpec],
    proportion: f64,
    penalty: SimPenalty,
    weights_of: impl Fn(&SegmentPasses) -> [f64; 4],
) -> Result<SegLoss> {
    let complete = model.pass(x_sl)?;
    let passes = SegmentPasses::evaluate(model, x_sl, masks, proportion, &complete)?;
    let mut grad = Array3::zeros(x_sl.dim());
    let dfeat = passes.backward(model, &complete, weights_of(&passes), &mut grad);
    grad += &complete.input_grad(model, &dfeat);
    Ok(SegLoss {
        seg_ent: passes.seg_ent(),
        seg_sim: passes.seg_sim(penalty),
        aggregates: passes.aggregates(),
        grad,
    })
}

/// `L_SegEnt`: summed prediction entropy of the four segment kinds.
/// `seg_sim`/`aggregates` are filled for reference; `grad` is that of
/// `L_SegEnt` alone.
pub fn seg_ent_loss(model: &SourceModel, x_sl: &Array3<f64>, masks: &[MaskSpec], proportion: f64) -> Result<SegLoss> {
    seg_objective(model, x_sl, masks, proportion, SimPenalty::Absolute, |_| [1.0; 4])
}

/// `L_SegSim`; `grad` is that of the consistency term alone.
pub fn seg_sim_loss(
    model: &SourceModel,
    x_sl: &Array3<f64>,
    masks: &[MaskSpec],
    proportion: f64,
    penalty: SimPenalty,
) -> Result<SegLoss> {
    seg_objective(model, x_sl, masks, proportion, penalty, |p| {
        let (_, g) = seg_sim_from_aggregates(&p.aggregates(), penalty);
        g
    })
}

/// `L_Seg = L_SegEnt + L_SegSim` with the gradient of the sum.
pub fn seg_loss(
    model: &SourceModel,
    x_sl: &Array3<f64>,
    masks: &[MaskSpec],
    proportion: f64,
    penalty: SimPenalty,
) -> Result<SegLoss> {
    seg_objective(model, x_sl, masks, proportion, penalty, |p| p.seg_weights(penalty))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub temperature: f64,
    /// Unit-normalize features before the dot product.
    pub normalize: bool,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams {
            temperature: 0.05,
            normalize: true,
        }
    }
}

impl SimilarityParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(TemsrError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

fn unit(v: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(&v).sqrt().max(1e-12);
    (v.mapv(|x| x / norm), norm)
}

/// `exp(a . b / tau)` on (optionally unit-normalized) features.
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>, params: &SimilarityParams) -> Result<f64> {
    params.validate()?;
    let m = if params.normalize {
        unit(a).0.dot(&unit(b).0)
    } else {
        a.dot(&b)
    };
    Ok((m / params.temperature).exp())
}

/// Anchor-based InfoNCE over features: recovered `z_sl [B, D]`, original
/// `z_t [B, D]`, anchor `z_anchor [D]`. Returns the value and the gradient
/// with respect to `z_sl` (targets and anchor are constants).
pub fn ardm_from_features(
    z_sl: &Array2<f64>,
    z_t: &Array2<f64>,
    z_anchor: ArrayView1<f64>,
    params: &SimilarityParams,
) -> Result<(f64, Array2<f64>)> {
    params.validate()?;
    let (b, d) = z_sl.dim();
    if b == 0 || z_t.dim() != (b, d) || z_anchor.len() != d {
        return Err(TemsrError::Shape(format!(
            "ARDM needs matching [B, D] inputs, got {:?}, {:?}, anchor {}",
            z_sl.dim(),
            z_t.dim(),
            z_anchor.len()
        )));
    }
    let tau = params.temperature;
    let prep = |v: ArrayView1<f64>| if params.normalize { unit(v) } else { (v.to_owned(), 1.0) };
    let sl: Vec<(Array1<f64>, f64)> = z_sl.outer_iter().map(prep).collect();
    let tg: Vec<Array1<f64>> = z_t.outer_iter().map(|v| prep(v).0).collect();
    let an = prep(z_anchor).0;

    let mut value = 0.0;
    let mut du = Array2::<f64>::zeros((b, d));
    for i in 0..b {
        let ui = &sl[i].0;
        // logits: anchor, own target, other recovered samples
        let mut logits = Vec::with_capacity(b + 1);
        logits.push(ui.dot(&an) / tau);
        logits.push(ui.dot(&tg[i]) / tau);
        for (k, (uk, _)) in sl.iter().enumerate() {
            if k != i {
                logits.push(ui.dot(uk) / tau);
            }
        }
        if let Some(bad) = logits.iter().find(|m| !m.is_finite() || m.exp().is_infinite()) {
            return Err(TemsrError::training(
                "L_ARDM",
                format!("similarity exp({bad}) is not finite; enable feature normalization or raise tau"),
            ));
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|m| (m - mx).exp()).sum();
        let lse = mx + z.ln();
        value += lse - logits[0];
        let q: Vec<f64> = logits.iter().map(|m| (m - lse).exp()).collect();
        let scale = 1.0 / (b as f64 * tau);
        {
            let mut row = du.row_mut(i);
            row.scaled_add((q[0] - 1.0) * scale, &an);
            row.scaled_add(q[1] * scale, &tg[i]);
        }
        let mut j = 2;
        for k in 0..b {
            if k == i {
                continue;
            }
            let uk = sl[k].0.clone();
            du.row_mut(i).scaled_add(q[j] * scale, &uk);
            du.row_mut(k).scaled_add(q[j] * scale, ui);
            j += 1;
        }
    }
    value /= b as f64;

    let dz = if params.normalize {
        let mut dz = Array2::zeros((b, d));
        for i in 0..b {
            let (u, norm) = &sl[i];
            let g = du.row(i);
            let proj = u.dot(&g);
            dz.row_mut(i).assign(&((&g - &(u * proj)) / *norm));
        }
        dz
    } else {
        du
    };
    Ok((value, dz))
}

/// `L_ARDM` on raw samples through the frozen source encoder; gradient is
/// with respect to the recovered batch.
pub fn ardm_loss(
    model: &SourceModel,
    x_sl: &Array3<f64>,
    x_t: &Array3<f64>,
    anchor: &Array2<f64>,
    params: &SimilarityParams,
) -> Result<(f64, Array3<f64>)> {
    let pass = model.pass(x_sl)?;
    let z_t = model.features(x_t)?;
    let z_a = model.features(&anchor.clone().insert_axis(Axis(0)))?;
    let (value, dz) = ardm_from_features(&pass.features, &z_t, z_a.row(0), params)?;
    Ok((value, pass.input_grad(model, &dz)))
}

#[derive(Debug, Clone)]
pub struct CoralOutput {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

fn covariance(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (cov, centered)
}

/// Deep CORAL: `||Cov(a) - Cov(b)||_F^2 / (4 D^2)` with unbiased covariances.
pub fn coral_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<CoralOutput> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(TemsrError::Config(format!(
            "CORAL needs at least 2 rows per batch, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(TemsrError::Shape(format!(
            "CORAL feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols() as f64;
    let (ca, xa) = covariance(a);
    let (cb, xb) = covariance(b);
    let diff = &ca - &cb;
    let norm = 4.0 * d * d;
    let value = diff.mapv(|v| v * v).sum() / norm;
    // dL/dC_a = 2 diff / norm, and dC/dX = 2 Xc dC / (n - 1) for symmetric dC
    let grad_a = xa.dot(&diff) * (4.0 / (norm * (a.nrows() as f64 - 1.0)));
    let grad_b = xb.dot(&diff) * (-4.0 / (norm * (b.nrows() as f64 - 1.0)));
    Ok(CoralOutput { value, grad_a, grad_b })
}

/// `L_TrgEnt` through the trainable target encoder (training mode) and the
/// frozen classifier.
pub struct TrgEntLoss {
    pub value: f64,
    pub features: Array2<f64>,
    /// Gradient with respect to the target encoder parameters.
    pub encoder_grad: Encoder,
    pub cache: EncoderCache,
}

/// Summed prediction entropy of `G(F_T(x_t))` and its gradient with respect
/// to the features.
pub fn trg_ent_from_features(classifier: &Classifier, features: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let cache = classifier.forward(features)?;
    let mut value = 0.0;
    let mut dlogits = Array2::zeros(cache.logits.dim());
    for (i, row) in cache.logits.outer_iter().enumerate() {
        let (h, g) = entropy_from_logits(row);
        value += h;
        dlogits.row_mut(i).assign(&g);
    }
    Ok((value, classifier.backward_logits(&cache, &dlogits, None)))
}

pub fn trg_ent_loss(target_encoder: &Encoder, classifier: &Classifier, x_t: &Array3<f64>) -> Result<TrgEntLoss> {
    let (features, cache) = target_encoder.forward(x_t, Mode::Train)?;
    let (value, dfeat) = trg_ent_from_features(classifier, &features)?;
    let mut encoder_grad = target_encoder.zeros_like();
    target_encoder.backward(&cache, &dfeat, Some(&mut encoder_grad));
    Ok(TrgEntLoss {
        value,
        features,
        encoder_grad,
        cache,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourceLike,
    Transfer,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SourceLike => "source_like",
            Phase::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub ardm: f64,
    pub align: f64,
    pub trg_ent: f64,
}

/// Per-phase composition: source-like optimization uses
/// `lambda_seg L_Seg + lambda_ardm L_ARDM + L_TrgEnt`, transfer uses
/// `L_Align + L_TrgEnt`.
pub fn total_loss(parts: &LossParts, lambda_seg: f64, lambda_ardm: f64, phase: Phase) -> f64 {
    match phase {
        Phase::SourceLike => lambda_seg * parts.seg + lambda_ardm * parts.ardm + parts.trg_ent,
        Phase::Transfer => parts.align + parts.trg_ent,
    }
}
