use std::collections::btree_map::{BTreeMap, Entry};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use temsr::anchor_bank::AnchorBank;
use temsr::datagen::{generate_domain_pair, DomainSplits};
use temsr::metrics::{read_metrics_csv, write_metrics_csv};
use temsr::nets::{load_checkpoint, save_checkpoint, Checkpoint};
use temsr::trainer::{
    evaluate, pretrain_source, run_ablation, AdaptInputs, ExperimentConfig, RunOptions, SourceModelOwned, Variant,
};
use temsr::verify::{
    collapse_probe, diversity_probe, gradient_check, gradient_tolerance, oracle_check, ProbeConfig, PropertyReport,
    LOSS_NAMES, ORACLE_NAMES,
};

use crate::plot::line_plot;
use crate::{Suite, SweepParam};

pub const SEED_ENV: &str = "TEMSR_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Bad invocation: missing input files or malformed flags. Exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum JobKind {
    Pretrain,
    Adapt { source_model: PathBuf, variant: String },
    Ablate { variants: Vec<String> },
    Sweep { param: String, values: Vec<f64> },
}

impl JobKind {
    fn name(&self) -> &'static str {
        match self {
            JobKind::Pretrain => "pretrain",
            JobKind::Adapt { .. } => "adapt",
            JobKind::Ablate { .. } => "ablate",
            JobKind::Sweep { .. } => "sweep",
        }
    }
}

/// Written next to every run's outputs; enough to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Resolved configuration snapshot, relative to the run directory.
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub run_id: String,
    pub job: JobKind,
}

pub struct Job {
    kind: JobKind,
    config: ExperimentConfig,
    seeds: Vec<u64>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            let seed: u64 = v.trim().parse().map_err(|_| usage(format!("{SEED_ENV} is not an integer: {v}")))?;
            Ok(cfg.with_seed(seed))
        }
        Err(_) => Ok(cfg.with_seed(cfg.seed)),
    }
}

fn seeds_or_default(seeds: &[u64], cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::LambdaSeg => "lambda_seg",
            SweepParam::LambdaArdm => "lambda_ardm",
            SweepParam::ProportionSeg => "p_s",
            SweepParam::MaskRatio => "p_m",
            SweepParam::AnchorRatio => "anchor_ratio",
        }
    }

    fn from_key(key: &str) -> Result<Self> {
        use clap::ValueEnum;
        SweepParam::from_str(key, false).map_err(|_| usage(format!("unknown sweep parameter {key}")))
    }

    /// Published grid for this parameter.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::LambdaSeg | SweepParam::LambdaArdm => vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 50.0, 100.0],
            SweepParam::ProportionSeg => (2..=7).rev().map(|k| k as f64 / 8.0).collect(),
            SweepParam::MaskRatio => (1..=6).map(|k| k as f64 / 8.0).collect(),
            SweepParam::AnchorRatio => vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        let a = &mut cfg.adapt;
        match self {
            SweepParam::LambdaSeg => a.lambda_seg = v,
            SweepParam::LambdaArdm => a.lambda_ardm = v,
            SweepParam::ProportionSeg => a.proportion = v,
            SweepParam::MaskRatio => a.mask_ratio = v,
            SweepParam::AnchorRatio => a.anchor_ratio = v,
        }
    }
}

impl Job {
    pub fn pretrain(config: Option<&Path>) -> Result<Self> {
        let config = load_config(config)?;
        Ok(Job {
            kind: JobKind::Pretrain,
            seeds: vec![config.seed],
            config,
        })
    }

    pub fn adapt(config: Option<&Path>, source_model: &Path, variant: &str) -> Result<Self> {
        let config = load_config(config)?;
        Variant::parse(variant).map_err(|e| usage(e.to_string()))?;
        let source_model = fs::canonicalize(source_model)
            .map_err(|e| usage(format!("source model {}: {e}", source_model.display())))?;
        Ok(Job {
            kind: JobKind::Adapt {
                source_model,
                variant: variant.to_string(),
            },
            seeds: vec![config.seed],
            config,
        })
    }

    pub fn ablate(config: Option<&Path>, variants: &[String], seeds: &[u64]) -> Result<Self> {
        let config = load_config(config)?;
        let variants: Vec<String> = if variants.is_empty() {
            Variant::ALL.iter().map(|v| v.as_str().to_string()).collect()
        } else {
            variants.to_vec()
        };
        for v in &variants {
            Variant::parse(v).map_err(|e| usage(e.to_string()))?;
        }
        Ok(Job {
            kind: JobKind::Ablate { variants },
            seeds: seeds_or_default(seeds, &config),
            config,
        })
    }

    pub fn sweep(config: Option<&Path>, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Self> {
        let config = load_config(config)?;
        let values = if values.is_empty() {
            param.default_values()
        } else {
            values.to_vec()
        };
        for &v in &values {
            let mut c = config.clone();
            param.apply(&mut c, v);
            c.validate().map_err(|e| usage(format!("{} = {v}: {e}", param.key())))?;
        }
        Ok(Job {
            kind: JobKind::Sweep {
                param: param.key().to_string(),
                values,
            },
            seeds: seeds_or_default(seeds, &config),
            config,
        })
    }

    fn run_id(&self, config_text: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.kind).expect("job serializes"));
        h.update(serde_json::to_vec(&self.seeds).expect("seeds serialize"));
        h.update(config_text.as_bytes());
        hex::encode(h.finalize())[..12].to_string()
    }

    /// Writes the configuration snapshot and manifest, then the outputs.
    pub fn execute(&self, out: &Path) -> Result<Manifest> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let config_text = self.config.to_toml()?;
        fs::write(out.join(CONFIG_SNAPSHOT), &config_text)?;
        let manifest = Manifest {
            command: self.kind.name().to_string(),
            config_path: PathBuf::from(CONFIG_SNAPSHOT),
            output_dir: out.to_path_buf(),
            seeds: self.seeds.clone(),
            run_id: self.run_id(&config_text),
            job: self.kind.clone(),
        };
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        match &self.kind {
            JobKind::Pretrain => self.run_pretrain(out)?,
            JobKind::Adapt { source_model, variant } => self.run_adapt(out, source_model, variant)?,
            JobKind::Ablate { variants } => self.run_ablate(out, variants)?,
            JobKind::Sweep { param, values } => self.run_sweep(out, SweepParam::from_key(param)?, values)?,
        }
        eprintln!("run {} written to {}", manifest.run_id, out.display());
        Ok(manifest)
    }

    fn run_pretrain(&self, out: &Path) -> Result<()> {
        let cfg = &self.config;
        let (src, trg) = generate_domain_pair(&cfg.data, cfg.seed)?;
        let model = pretrain_source(&src.train, &cfg.encoder_spec(), &cfg.pretrain, cfg.seed)?;
        let mut ckpt = Checkpoint::new();
        ckpt.add_encoder("encoder", &model.encoder);
        ckpt.add_classifier("classifier", &model.classifier);
        save_checkpoint(&ckpt, &out.join("source.ckpt"))?;
        let mut w = csv::Writer::from_path(out.join("pretrain.csv"))?;
        w.write_record(["epoch", "L_CE"])?;
        for (e, l) in model.loss_history.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        println!(
            "source test MF1 {:.4}, target test MF1 (source only) {:.4}",
            evaluate(&model.encoder, &model.classifier, &src.test)?,
            evaluate(&model.encoder, &model.classifier, &trg.test)?
        );
        Ok(())
    }

    fn run_adapt(&self, out: &Path, source_model: &Path, variant: &str) -> Result<()> {
        let cfg = &self.config;
        let ckpt = load_checkpoint(source_model)
            .map_err(|e| usage(format!("source model {}: {e}", source_model.display())))?;
        let model = SourceModelOwned {
            encoder: ckpt.encoder("encoder")?,
            classifier: ckpt.classifier("classifier")?,
            loss_history: Vec::new(),
        };
        let (src, trg) = generate_domain_pair(&cfg.data, cfg.seed)?;
        let src_only = evaluate(&model.encoder, &model.classifier, &trg.test)?;
        let run = adapt_run(Variant::parse(variant)?, &model, &src, &trg, cfg)?;

        let mut rec = Checkpoint::new();
        rec.add_recovery("recovery", &run.recovery);
        save_checkpoint(&rec, &out.join("recovery.ckpt"))?;
        let mut tgt = Checkpoint::new();
        tgt.add_encoder("encoder", &run.target_encoder);
        tgt.add_classifier("classifier", &model.classifier);
        save_checkpoint(&tgt, &out.join("target.ckpt"))?;
        save_bank(&run.bank, &out.join("bank.snapshot"))?;
        write_metrics_csv(&run.metrics, &out.join("metrics.csv"))?;
        let summary = serde_json::json!({
            "variant": variant,
            "src_only_mf1": src_only,
            "final_mf1": run.final_mf1,
            "srclike_mf1": run.srclike_mf1,
            "reported_mf1": run.reported_mf1(),
        });
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{summary}");
        Ok(())
    }

    fn run_ablate(&self, out: &Path, variants: &[String]) -> Result<()> {
        let mut rows: Vec<(String, u64, f64)> = Vec::new();
        for &seed in &self.seeds {
            let cfg = self.config.with_seed(seed);
            let (src, trg) = generate_domain_pair(&cfg.data, seed)?;
            let model = pretrain_source(&src.train, &cfg.encoder_spec(), &cfg.pretrain, seed)?;
            rows.push(("src_only".into(), seed, evaluate(&model.encoder, &model.classifier, &trg.test)?));
            for v in variants {
                let run = adapt_run(Variant::parse(v)?, &model, &src, &trg, &cfg)?;
                eprintln!("seed {seed} {v}: {:.4}", run.reported_mf1());
                rows.push((v.clone(), seed, run.reported_mf1()));
            }
        }
        let mut w = csv::Writer::from_path(out.join("ablation_runs.csv"))?;
        w.write_record(["variant", "seed", "MF1"])?;
        for (v, s, m) in &rows {
            w.write_record([v.clone(), s.to_string(), m.to_string()])?;
        }
        w.flush()?;

        let mut order = vec!["src_only".to_string()];
        order.extend(variants.iter().cloned());
        let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
        w.write_record(["variant", "MF1_mean", "MF1_std", "runs"])?;
        for v in &order {
            let vals: Vec<f64> = rows.iter().filter(|r| &r.0 == v).map(|r| r.2).collect();
            let (m, s) = mean_std(&vals);
            w.write_record([v.clone(), format!("{m:.6}"), format!("{s:.6}"), vals.len().to_string()])?;
            println!("{v:<14} {:>6.2} ± {:.2}", 100.0 * m, 100.0 * s);
        }
        w.flush()?;
        Ok(())
    }

    fn run_sweep(&self, out: &Path, param: SweepParam, values: &[f64]) -> Result<()> {
        let mut models = BTreeMap::new();
        let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
        w.write_record(["param", "value", "seed", "MF1"])?;
        let mut summary = Vec::new();
        for &value in values {
            let mut mf1 = Vec::new();
            for &seed in &self.seeds {
                let mut cfg = self.config.with_seed(seed);
                param.apply(&mut cfg, value);
                let (src, trg) = generate_domain_pair(&cfg.data, seed)?;
                if let Entry::Vacant(e) = models.entry(seed) {
                    e.insert(pretrain_source(&src.train, &cfg.encoder_spec(), &cfg.pretrain, seed)?);
                }
                let run = adapt_run(Variant::Full, &models[&seed], &src, &trg, &cfg)?;
                let curve = out.join(format!("curve_{}_{value}_seed{seed}.csv", param.key()));
                write_metrics_csv(&run.metrics, &curve)?;
                eprintln!("{} = {value} seed {seed}: {:.4}", param.key(), run.final_mf1);
                w.write_record([param.key().to_string(), value.to_string(), seed.to_string(), run.final_mf1.to_string()])?;
                mf1.push(run.final_mf1);
            }
            let (m, s) = mean_std(&mf1);
            summary.push((value, m, s));
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out.join("sweep_summary.csv"))?;
        w.write_record(["value", "MF1_mean", "MF1_std"])?;
        for (v, m, s) in &summary {
            w.write_record([v.to_string(), format!("{m:.6}"), format!("{s:.6}")])?;
        }
        w.flush()?;
        let log_axis = matches!(param, SweepParam::LambdaSeg | SweepParam::LambdaArdm);
        let pts: Vec<(f64, f64)> = summary
            .iter()
            .map(|&(v, m, _)| (if log_axis { v.log10() } else { v }, m))
            .collect();
        let x_label = if log_axis {
            format!("log10 {}", param.key())
        } else {
            param.key().to_string()
        };
        line_plot(
            &out.join("sweep.svg"),
            &format!("MF1 vs {}", param.key()),
            &x_label,
            "MF1",
            &[("mean MF1".to_string(), pts)],
        )?;
        Ok(())
    }
}

fn adapt_run(
    variant: Variant,
    model: &SourceModelOwned,
    src: &DomainSplits,
    trg: &DomainSplits,
    cfg: &ExperimentConfig,
) -> Result<temsr::trainer::RunArtifacts> {
    let target = trg.train.without_labels();
    let inputs = AdaptInputs {
        target: &target,
        target_test: &trg.test,
        source_test: &src.test,
    };
    Ok(run_ablation(
        variant,
        inputs,
        &model.encoder,
        &model.classifier,
        &cfg.adapt,
        RunOptions::default(),
    )?)
}

fn save_bank(bank: &AnchorBank, path: &Path) -> Result<()> {
    if !bank.is_empty() {
        bank.save(path)?;
    }
    Ok(())
}

/// Sample standard deviation; zero for a single value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn rerun(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| usage(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| usage(format!("bad manifest: {e}")))?;
    let run_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let snapshot = run_dir.join(&manifest.config_path);
    let config_text = fs::read_to_string(&snapshot)
        .map_err(|e| usage(format!("cannot read config snapshot {}: {e}", snapshot.display())))?;
    let config = ExperimentConfig::from_toml(&config_text).map_err(|e| usage(e.to_string()))?;
    let job = Job {
        kind: manifest.job.clone(),
        config,
        seeds: manifest.seeds.clone(),
    };
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.to_path_buf());
    let again = job.execute(&target)?;
    if again.run_id != manifest.run_id {
        anyhow::bail!("rerun id {} differs from recorded {}", again.run_id, manifest.run_id);
    }
    Ok(())
}

pub fn verify(suite: Suite, config: Option<&Path>, seeds: &[u64], out: Option<&Path>) -> Result<bool> {
    let probe = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            ProbeConfig::from_toml(&text).map_err(|e| usage(e.to_string()))?
        }
        None => ProbeConfig::default(),
    };
    let reports: Vec<PropertyReport> = match suite {
        Suite::Gradients => LOSS_NAMES
            .iter()
            .map(|l| gradient_check(l, gradient_tolerance(l), 0))
            .collect::<temsr::Result<_>>()?,
        Suite::Oracles => ORACLE_NAMES
            .iter()
            .map(|l| oracle_check(l, 100, 0))
            .collect::<temsr::Result<_>>()?,
        Suite::Collapse => vec![
            collapse_probe(&probe, 6.0 / 8.0, false, seeds)?,
            collapse_probe(&probe, 1.0 / 8.0, true, seeds)?,
        ],
        Suite::Diversity => diversity_probe(&probe, seeds)?,
    };
    let mut sink = match out {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    for r in &reports {
        let line = r.to_json_line();
        println!("{line}");
        if let Some(f) = sink.as_mut() {
            writeln!(f, "{line}")?;
        }
    }
    Ok(reports.iter().all(|r| r.passed))
}

/// Renders the MF1 table, loss curves and discrepancy plot into
/// `<run_dir>/report`. Reads only metrics.csv.
pub fn report(run_dir: &Path) -> Result<PathBuf> {
    let metrics = run_dir.join("metrics.csv");
    if !metrics.exists() {
        return Err(usage(format!("{} not found", metrics.display())));
    }
    let rows = read_metrics_csv(&metrics)?;
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir)?;

    let mut w = csv::Writer::from_path(dir.join("mf1.csv"))?;
    w.write_record(["epoch", "phase", "MF1_target"])?;
    for r in &rows {
        w.write_record([r.epoch.to_string(), r.phase.clone(), format!("{:.4}", r.mf1_target)])?;
    }
    w.flush()?;

    let series = |name: &str, f: &dyn Fn(&temsr::metrics::MetricsRow) -> Option<f64>| {
        (
            name.to_string(),
            rows.iter()
                .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
                .collect::<Vec<_>>(),
        )
    };
    let losses: Vec<_> = [
        series("L_Seg", &|r| r.l_seg),
        series("L_ARDM", &|r| r.l_ardm),
        series("L_Align", &|r| r.l_align),
        series("L_TrgEnt", &|r| r.l_trg_ent),
        series("total", &|r| r.total),
    ]
    .into_iter()
    .filter(|s| !s.1.is_empty())
    .collect();
    line_plot(&dir.join("losses.svg"), "Losses per epoch", "epoch", "loss", &losses)?;
    let kl = [
        series("KL(src||src-like)", &|r| Some(r.kl_src_srclike)),
        series("KL(src-like||trg)", &|r| Some(r.kl_srclike_trg)),
        series("KL(src||trg)", &|r| Some(r.kl_src_trg)),
    ];
    line_plot(&dir.join("discrepancy.svg"), "Feature discrepancy", "epoch", "KL", &kl)?;
    line_plot(
        &dir.join("mf1.svg"),
        "Target MF1",
        "epoch",
        "MF1",
        &[series("MF1_target", &|r| Some(r.mf1_target))],
    )?;
    println!("report written to {}", dir.display());
    Ok(dir)
}
