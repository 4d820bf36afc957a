//! Experiment commands behind the CLI: each one loads what it needs from
//! the config, runs, and writes a JSON summary plus CSV detail files into
//! the output directory. Reports embed the config hash and seed; reruns
//! with identical config and seed are byte-identical.

use crate::bayes::{
    confidence_interval, mc_forward, metrics_suite, ood_decide, predictive_entropy,
    predictive_mean, predictive_variance, McPrediction, OodDecision, SuiteMetrics, Verdict,
};
use crate::checkpoint::{history_digest, load_checkpoint, save_checkpoint};
use crate::cim::{cim_forward, energy_rollup, map_model, MappingStrategy, ModelPlan};
use crate::config::ExperimentConfig;
use crate::data::{make_ood, Dataset, OodKind};
use crate::dropout::{sample_layer_masks, DropoutConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::mtj::{
    calibrate_current, generate_bitstream, switching_probability, varied_rates,
};
use crate::report::{ensure_out_dir, fmt_f64, fmt_opt, out_path, write_json, CsvTable};
use crate::rng::{derive_stream, MaskSource};
use crate::stats::{mean, spearman_rho};
use crate::tensor::RealTensor;
use crate::train::{evaluate_accuracy, train};
use serde::Serialize;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

pub const CHECKPOINT_FILE: &str = "checkpoint.sdcp";
pub const CI_PERCENT: f64 = 95.0;
/// Evaluation chunk size (keeps transient patch matrices small).
const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    McEval,
    Ood,
    ShiftSweep,
    CimSim,
    SpinCalibrate,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::McEval => "mc-eval",
            Command::Ood => "ood",
            Command::ShiftSweep => "shift-sweep",
            Command::CimSim => "cim-sim",
            Command::SpinCalibrate => "spin-calibrate",
        };
        f.write_str(s)
    }
}

/// Runs one command; returns the path of its JSON summary.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_out_dir(&cfg.experiment.out_dir)?;
    match command {
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::McEval => cmd_mc_eval(cfg),
        Command::Ood => cmd_ood(cfg),
        Command::ShiftSweep => cmd_shift_sweep(cfg),
        Command::CimSim => cmd_cim_sim(cfg),
        Command::SpinCalibrate => cmd_spin_calibrate(cfg),
    }
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.experiment.out_dir.join(CHECKPOINT_FILE))
}

fn load_model(cfg: &ExperimentConfig) -> Result<(Model, DropoutConfig)> {
    let path = checkpoint_path(cfg);
    let (model, dropout, _) = load_checkpoint(&path)?;
    Ok((model, dropout))
}

/// Dropout rates used at inference: the checkpointed nominal rates, shifted
/// by the configured device variation (one frozen draw per run).
fn inference_rates(cfg: &ExperimentConfig, dropout: &DropoutConfig) -> Result<Vec<f64>> {
    if cfg.variation.sigma == 0.0 && cfg.variation.mu == 0.0 {
        return Ok(dropout.rates.clone());
    }
    let mut rng = derive_stream(cfg.experiment.seed, "variation", 0);
    varied_rates(&cfg.variation, &dropout.rates, &mut rng)
}

// ───────────────────────── train ─────────────────────────

#[derive(Serialize)]
struct TrainSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    epochs: usize,
    train_samples: usize,
    test_samples: usize,
    dropout_rates: Vec<f64>,
    model_weight_params: usize,
    final_train_loss: f64,
    final_train_acc: f64,
    final_test_acc: Option<f64>,
    history_digest: String,
    checkpoint: String,
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    let (train_set, test_set) = cfg.dataset.load(seed)?;
    let mut model = Model::build(&cfg.model, seed)?;
    let dropout = cfg.dropout.resolve(&model)?;
    let history = train(
        &mut model,
        &train_set,
        Some(&test_set),
        &cfg.training,
        &dropout,
        seed,
    )?;

    let history_csv = history.to_csv();
    std::fs::write(
        out_path(&cfg.experiment.out_dir, "history.csv"),
        format!("# config_hash={} seed={seed}\n{history_csv}", cfg.hash()),
    )?;
    let digest = history_digest(&history);

    let ckpt = cfg.experiment.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, &dropout, Some(digest.clone()), true)?;

    let last = history.epochs.last().expect("at least one epoch");
    let summary = TrainSummary {
        command: "train",
        config_hash: cfg.hash(),
        seed,
        epochs: history.epochs.len(),
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        dropout_rates: dropout.rates.clone(),
        model_weight_params: model.binary_layer_param_counts().iter().sum(),
        final_train_loss: last.train_loss,
        final_train_acc: last.train_acc,
        final_test_acc: last.test_acc,
        history_digest: digest,
        checkpoint: ckpt.display().to_string(),
    };
    let path = out_path(&cfg.experiment.out_dir, "train_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── eval ─────────────────────────

#[derive(Serialize)]
struct EvalSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    checkpoint: String,
    n: usize,
    accuracy: f64,
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let (model, dropout) = load_model(cfg)?;
    let (_, test_set) = cfg.dataset.load(cfg.experiment.seed)?;
    let accuracy = evaluate_accuracy(&model, &test_set, &dropout, EVAL_BATCH)?;
    let summary = EvalSummary {
        command: "eval",
        config_hash: cfg.hash(),
        seed: cfg.experiment.seed,
        checkpoint: checkpoint_path(cfg).display().to_string(),
        n: test_set.len(),
        accuracy,
    };
    let path = out_path(&cfg.experiment.out_dir, "eval_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── mc-eval ─────────────────────────

/// Monte-Carlo predictions for every input of a dataset, chunked. Masks
/// depend only on (seed, pass), so chunking does not change results.
pub fn mc_eval_dataset(
    model: &Model,
    ds: &Dataset,
    t_passes: usize,
    dropout: &DropoutConfig,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<McPrediction>> {
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let x = ds.slice_batch(start, end);
        out.extend(mc_forward(model, &x, t_passes, dropout, rates, seed)?);
        start = end;
    }
    Ok(out)
}

#[derive(Serialize)]
struct McRecord<'a> {
    index: usize,
    label: Option<usize>,
    pred: usize,
    correct: Option<bool>,
    mean: &'a [f64],
    variance: &'a [f64],
    entropy: f64,
    ci_lo: Vec<f64>,
    ci_hi: Vec<f64>,
    verdict: Verdict,
    score: f64,
    #[serde(rename = "T")]
    t: usize,
    seed: u64,
}

#[derive(Serialize)]
struct McSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    checkpoint: String,
    t_passes: usize,
    n: usize,
    quantile_level: f64,
    threshold: f64,
    inference_rates: Vec<f64>,
    accuracy: f64,
    mean_entropy: f64,
    metrics: SuiteMetrics,
}

struct McRun {
    preds: Vec<McPrediction>,
    decisions: Vec<OodDecision>,
    pred_classes: Vec<usize>,
    correct: Option<Vec<bool>>,
}

fn mc_run(
    cfg: &ExperimentConfig,
    model: &Model,
    dropout: &DropoutConfig,
    rates: &[f64],
    ds: &Dataset,
    seed: u64,
) -> Result<McRun> {
    let t = cfg.resolve_t(model);
    let preds = mc_eval_dataset(model, ds, t, dropout, rates, seed)?;
    let mut decisions = Vec::with_capacity(preds.len());
    let mut pred_classes = Vec::with_capacity(preds.len());
    for p in &preds {
        decisions.push(ood_decide(p, cfg.ood.quantile_level, cfg.ood.threshold)?);
        let m = predictive_mean(p);
        pred_classes.push(argmax(&m));
    }
    let correct = ds.labels.as_ref().map(|labels| {
        pred_classes
            .iter()
            .zip(labels)
            .map(|(p, l)| p == l)
            .collect()
    });
    Ok(McRun {
        preds,
        decisions,
        pred_classes,
        correct,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

fn cmd_mc_eval(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    let (model, dropout) = load_model(cfg)?;
    let rates = inference_rates(cfg, &dropout)?;
    let (_, test_set) = cfg.dataset.load(seed)?;
    let run = mc_run(cfg, &model, &dropout, &rates, &test_set, seed)?;

    // Per-input JSONL records.
    let records_path = out_path(&cfg.experiment.out_dir, "mc_records.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&records_path)?);
    let t = cfg.resolve_t(&model);
    let mut entropies = Vec::with_capacity(run.preds.len());
    for (i, p) in run.preds.iter().enumerate() {
        let mean_vec = predictive_mean(p);
        let var_vec = predictive_variance(p);
        let entropy = predictive_entropy(p);
        entropies.push(entropy);
        let ci = confidence_interval(p, CI_PERCENT)?;
        let record = McRecord {
            index: i,
            label: test_set.label(i),
            pred: run.pred_classes[i],
            correct: run.correct.as_ref().map(|c| c[i]),
            mean: &mean_vec,
            variance: &var_vec,
            entropy,
            ci_lo: ci.iter().map(|c| c.0).collect(),
            ci_hi: ci.iter().map(|c| c.1).collect(),
            verdict: run.decisions[i].verdict,
            score: run.decisions[i].score,
            t,
            seed,
        };
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| Error::InvalidArgument(format!("record serialization: {e}")))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;

    let correct = run
        .correct
        .as_ref()
        .ok_or_else(|| Error::Config("mc-eval needs a labeled test set".to_string()))?;
    let metrics = metrics_suite(&run.decisions, correct)?;
    let mut csv = CsvTable::with_provenance(
        &[
        "n",
        "accuracy",
        "ood_rate",
        "tpr",
        "tnr",
        "ar_correct_given_accepted",
        "ar_accepted_given_correct",
        ],
        &cfg.hash(),
        seed,
    );
    csv.row(&[
        metrics.n.to_string(),
        fmt_f64(metrics.accuracy),
        fmt_f64(metrics.ood_rate),
        fmt_opt(metrics.tpr),
        fmt_opt(metrics.tnr),
        fmt_opt(metrics.ar_correct_given_accepted),
        fmt_opt(metrics.ar_accepted_given_correct),
    ]);
    csv.write(&out_path(&cfg.experiment.out_dir, "mc_metrics.csv"))?;

    let summary = McSummary {
        command: "mc-eval",
        config_hash: cfg.hash(),
        seed,
        checkpoint: checkpoint_path(cfg).display().to_string(),
        t_passes: t,
        n: test_set.len(),
        quantile_level: cfg.ood.quantile_level,
        threshold: cfg.ood.threshold,
        inference_rates: rates,
        accuracy: metrics.accuracy,
        mean_entropy: mean(&entropies),
        metrics,
    };
    let path = out_path(&cfg.experiment.out_dir, "mc_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── ood ─────────────────────────

#[derive(Serialize)]
struct OodSetReport {
    set: String,
    n: usize,
    detection_rate: f64,
    mean_entropy: f64,
    mean_score: f64,
}

#[derive(Serialize)]
struct OodSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    checkpoint: String,
    t_passes: usize,
    quantile_level: f64,
    threshold: f64,
    id_metrics: SuiteMetrics,
    sets: Vec<OodSetReport>,
}

fn set_strength(cfg: &ExperimentConfig, kind: OodKind) -> f64 {
    match kind {
        OodKind::Rotate => cfg.ood.rotate_degrees,
        OodKind::AdditiveGaussian | OodKind::AdditiveUniform => cfg.ood.noise_strength,
        _ => 0.0,
    }
}

fn cmd_ood(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    let (model, dropout) = load_model(cfg)?;
    let rates = inference_rates(cfg, &dropout)?;
    let (_, test_set) = cfg.dataset.load(seed)?;

    // In-distribution accept/reject analysis.
    let id_run = mc_run(cfg, &model, &dropout, &rates, &test_set, seed)?;
    let id_metrics = metrics_suite(
        &id_run.decisions,
        id_run
            .correct
            .as_ref()
            .ok_or_else(|| Error::Config("ood needs a labeled test set".to_string()))?,
    )?;

    let mut csv = CsvTable::with_provenance(
        &["set", "n", "detection_rate", "mean_entropy", "mean_score"],
        &cfg.hash(),
        seed,
    );
    csv.row(&[
        "id-test".to_string(),
        test_set.len().to_string(),
        fmt_f64(id_metrics.ood_rate),
        fmt_f64(mean(
            &id_run.preds.iter().map(predictive_entropy).collect::<Vec<_>>(),
        )),
        fmt_f64(mean(
            &id_run.decisions.iter().map(|d| d.score).collect::<Vec<_>>(),
        )),
    ]);

    let mut sets = Vec::new();
    for (i, &kind) in cfg.ood.sets.iter().enumerate() {
        let ds = make_ood(kind, Some(&test_set), set_strength(cfg, kind), seed ^ (i as u64 + 1))?;
        let run = mc_run(cfg, &model, &dropout, &rates, &ds, seed)?;
        let detected = run
            .decisions
            .iter()
            .filter(|d| d.verdict == Verdict::Ood)
            .count();
        let report = OodSetReport {
            set: kind.label().to_string(),
            n: ds.len(),
            detection_rate: detected as f64 / ds.len() as f64,
            mean_entropy: mean(&run.preds.iter().map(predictive_entropy).collect::<Vec<_>>()),
            mean_score: mean(&run.decisions.iter().map(|d| d.score).collect::<Vec<_>>()),
        };
        csv.row(&[
            report.set.clone(),
            report.n.to_string(),
            fmt_f64(report.detection_rate),
            fmt_f64(report.mean_entropy),
            fmt_f64(report.mean_score),
        ]);
        sets.push(report);
    }
    csv.write(&out_path(&cfg.experiment.out_dir, "ood_rates.csv"))?;

    let summary = OodSummary {
        command: "ood",
        config_hash: cfg.hash(),
        seed,
        checkpoint: checkpoint_path(cfg).display().to_string(),
        t_passes: cfg.resolve_t(&model),
        quantile_level: cfg.ood.quantile_level,
        threshold: cfg.ood.threshold,
        id_metrics,
        sets,
    };
    let path = out_path(&cfg.experiment.out_dir, "ood_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── shift-sweep ─────────────────────────

#[derive(Serialize)]
struct SweepLevel {
    level: usize,
    strength: f64,
    accuracy: Option<f64>,
    mean_entropy: f64,
    ood_rate: f64,
}

#[derive(Serialize)]
struct SweepSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    checkpoint: String,
    kind: String,
    t_passes: usize,
    levels: Vec<SweepLevel>,
    spearman_entropy_vs_strength: f64,
}

fn cmd_shift_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    let (model, dropout) = load_model(cfg)?;
    let rates = inference_rates(cfg, &dropout)?;
    let (_, test_set) = cfg.dataset.load(seed)?;

    let mut levels = Vec::new();
    let mut csv = CsvTable::with_provenance(
        &["level", "strength", "accuracy", "mean_entropy", "ood_rate"],
        &cfg.hash(),
        seed,
    );
    for level in 0..cfg.sweep.levels {
        let strength =
            cfg.sweep.max_strength * level as f64 / (cfg.sweep.levels - 1) as f64;
        let ds = if level == 0 {
            test_set.clone()
        } else {
            make_ood(cfg.sweep.kind, Some(&test_set), strength, seed ^ (level as u64))?
        };
        let run = mc_run(cfg, &model, &dropout, &rates, &ds, seed)?;
        let accuracy = run.correct.as_ref().map(|c| {
            c.iter().filter(|&&ok| ok).count() as f64 / c.len() as f64
        });
        let entry = SweepLevel {
            level,
            strength,
            accuracy,
            mean_entropy: mean(&run.preds.iter().map(predictive_entropy).collect::<Vec<_>>()),
            ood_rate: run
                .decisions
                .iter()
                .filter(|d| d.verdict == Verdict::Ood)
                .count() as f64
                / ds.len() as f64,
        };
        csv.row(&[
            entry.level.to_string(),
            fmt_f64(entry.strength),
            fmt_opt(entry.accuracy),
            fmt_f64(entry.mean_entropy),
            fmt_f64(entry.ood_rate),
        ]);
        levels.push(entry);
    }
    csv.write(&out_path(&cfg.experiment.out_dir, "sweep.csv"))?;

    let strengths: Vec<f64> = levels.iter().map(|l| l.strength).collect();
    let entropies: Vec<f64> = levels.iter().map(|l| l.mean_entropy).collect();
    let summary = SweepSummary {
        command: "shift-sweep",
        config_hash: cfg.hash(),
        seed,
        checkpoint: checkpoint_path(cfg).display().to_string(),
        kind: cfg.sweep.kind.label().to_string(),
        t_passes: cfg.resolve_t(&model),
        spearman_entropy_vs_strength: spearman_rho(&strengths, &entropies),
        levels,
    };
    let path = out_path(&cfg.experiment.out_dir, "sweep_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── cim-sim ─────────────────────────

#[derive(Serialize)]
struct LayerPlanReport {
    layer: usize,
    shape: crate::cim::LayerShape,
    strategy: MappingStrategy,
    tiles: usize,
    crossbars: usize,
    utilization: f64,
}

#[derive(Serialize)]
struct CimSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    strategy: MappingStrategy,
    adc_bits: u32,
    rows: usize,
    cols: usize,
    total_crossbars: usize,
    utilization: f64,
    area_mm2: f64,
    t_passes: u64,
    equivalence_inputs: usize,
    equivalence_exact: bool,
    energy: crate::cim::EnergyLedger,
    energy_per_image_uj: f64,
    assumptions: Vec<String>,
}

/// The op-count assumptions written into every energy report.
pub fn energy_assumptions(cfg: &ExperimentConfig) -> Vec<String> {
    vec![
        "crossbar_read: one per used array per input application per pass".to_string(),
        match cfg.crossbar.config.memory_op_unit {
            crate::cim::MemoryOpUnit::ArrayReadsOnly => {
                "memory_decode_sense: one per crossbar read".to_string()
            }
            crate::cim::MemoryOpUnit::ArrayReadsPlusBuffers => {
                "memory_decode_sense: one per crossbar read plus one per element written \
                 to an inter-stage buffer (sign outputs, pooled maps, residual saves, \
                 final outputs)"
                    .to_string()
            }
        },
        "rng: one per binary layer per pass (single shared stochastic module)".to_string(),
        "adder_accumulator: cross-tile partial-sum merges, bias adds, residual adds".to_string(),
        "comparator: sign activations and max-pool comparisons".to_string(),
        "averaging: once per Bayesian inference".to_string(),
        "a crossbar crosspoint is one complementary cell pair".to_string(),
    ]
}

pub fn cim_equivalence_check(
    model: &Model,
    plan: &ModelPlan,
    cfg: &ExperimentConfig,
    dropout: &DropoutConfig,
    inputs: usize,
    seed: u64,
) -> Result<bool> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(&model.input_shape);
    let volume: usize = shape.iter().product();
    let mut rng = derive_stream(seed, "cim-equivalence", 0);
    use rand::Rng;
    for i in 0..inputs {
        let data: Vec<f64> = (0..volume).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = RealTensor::new(shape.clone(), data)?;
        let mut mask_rng = MaskSource::new(derive_stream(seed, "cim-masks", i as u64));
        let masks = sample_layer_masks(dropout, &dropout.rates, &mut mask_rng)?;
        let want = model.forward_eval(&x, &masks, dropout)?;
        let got = cim_forward(model, plan, &cfg.crossbar.config, &x, &masks, dropout)?;
        if want.data() != got.data() {
            return Ok(false);
        }
    }
    Ok(true)
}

fn cmd_cim_sim(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    // Use the trained checkpoint when it exists; otherwise a fresh build
    // (mapping and energy do not depend on the weight values).
    let (model, dropout) = match load_model(cfg) {
        Ok(pair) => pair,
        Err(_) => {
            let model = Model::build(&cfg.model, seed)?;
            let dropout = cfg.dropout.resolve(&model)?;
            (model, dropout)
        }
    };
    let plan = map_model(&model, cfg.crossbar.strategy, &cfg.crossbar.config)?;

    let mut layer_reports = Vec::new();
    let mut plan_csv = CsvTable::with_provenance(
        &[
        "layer",
        "crossbar",
        "array_row",
        "src_row_start",
        "src_row_end",
        "src_col_start",
        "src_col_end",
        ],
        &cfg.hash(),
        seed,
    );
    for (i, mapped) in plan.layers.iter().enumerate() {
        layer_reports.push(LayerPlanReport {
            layer: i,
            shape: mapped.plan.shape,
            strategy: mapped.plan.strategy,
            tiles: mapped.plan.tiles.len(),
            crossbars: mapped.plan.num_crossbars,
            utilization: mapped.plan.utilization,
        });
        for t in &mapped.plan.tiles {
            plan_csv.row(&[
                i.to_string(),
                t.crossbar.to_string(),
                t.array_row.to_string(),
                t.src_rows.0.to_string(),
                t.src_rows.1.to_string(),
                t.src_cols.0.to_string(),
                t.src_cols.1.to_string(),
            ]);
        }
    }
    plan_csv.write(&out_path(&cfg.experiment.out_dir, "cim_tiles.csv"))?;
    #[derive(Serialize)]
    struct PlanFile {
        config_hash: String,
        seed: u64,
        layers: Vec<LayerPlanReport>,
    }
    write_json(
        &out_path(&cfg.experiment.out_dir, "cim_plan.json"),
        &PlanFile {
            config_hash: cfg.hash(),
            seed,
            layers: layer_reports,
        },
    )?;

    let t = cfg.resolve_t(&model) as u64;
    let ledger = energy_rollup(&plan, &model, t, &cfg.crossbar.config)?;
    let equivalence_inputs = 20;
    let exact = cim_equivalence_check(&model, &plan, cfg, &dropout, equivalence_inputs, seed)?;

    let summary = CimSummary {
        command: "cim-sim",
        config_hash: cfg.hash(),
        seed,
        strategy: cfg.crossbar.strategy,
        adc_bits: cfg.crossbar.config.adc_bits,
        rows: cfg.crossbar.config.rows,
        cols: cfg.crossbar.config.cols,
        total_crossbars: plan.total_crossbars,
        utilization: plan.utilization,
        area_mm2: plan.area_mm2,
        t_passes: t,
        equivalence_inputs,
        equivalence_exact: exact,
        energy_per_image_uj: ledger.energy_per_image_j * 1e6,
        energy: ledger,
        assumptions: energy_assumptions(cfg),
    };
    let path = out_path(&cfg.experiment.out_dir, "cim_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}

// ───────────────────────── spin-calibrate ─────────────────────────

#[derive(Serialize)]
struct CalibrationPoint {
    p_target: f64,
    current_a: f64,
    residual: f64,
}

#[derive(Serialize)]
struct SpinSummary {
    command: &'static str,
    config_hash: String,
    seed: u64,
    device: crate::mtj::MtjDevice,
    pulse_s: f64,
    calibrations: Vec<CalibrationPoint>,
    bitstream_bits: usize,
    bitstream_p: f64,
    ones_fraction: f64,
    lag1_autocorrelation: f64,
    stream_time_s: f64,
}

fn cmd_spin_calibrate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let seed = cfg.experiment.seed;
    let dev = cfg.mtj;
    let t = dev.pulse_s;

    // Calibrate the 50% hardware target plus every configured dropout rate
    // that is strictly inside (0,1).
    let mut targets = vec![0.5];
    if let Some(rates) = &cfg.dropout.rates {
        targets.extend(rates.iter().copied());
    }
    targets.extend([0.2, 0.1]);
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    targets.dedup();
    let mut calibrations = Vec::new();
    for p in targets.into_iter().filter(|p| 0.0 < *p && *p < 1.0) {
        let current = calibrate_current(&dev, p, t)?;
        let residual = (switching_probability(&dev, current, t)? - p).abs();
        calibrations.push(CalibrationPoint {
            p_target: p,
            current_a: current,
            residual,
        });
    }

    // Switching curve over the monotone region.
    let mut curve = CsvTable::with_provenance(&["current_a", "p_sw"], &cfg.hash(), seed);
    let hi = dev.monotone_limit_a();
    for i in 1..=100 {
        let current = hi * i as f64 / 100.0;
        curve.row(&[
            fmt_f64(current),
            fmt_f64(switching_probability(&dev, current, t)?),
        ]);
    }
    curve.write(&out_path(&cfg.experiment.out_dir, "psw_curve.csv"))?;

    // Stochastic bit quality at the calibrated 50% point.
    let half = calibrations
        .iter()
        .find(|c| c.p_target == 0.5)
        .expect("0.5 always calibrated");
    let p = switching_probability(&dev, half.current_a, t)?;
    let mut rng = derive_stream(seed, "bitstream", 0);
    let n = 100_000;
    let stream = generate_bitstream(p, n, &mut rng)?;

    let summary = SpinSummary {
        command: "spin-calibrate",
        config_hash: cfg.hash(),
        seed,
        device: dev,
        pulse_s: t,
        calibrations,
        bitstream_bits: n,
        bitstream_p: p,
        ones_fraction: stream.ones_fraction(),
        lag1_autocorrelation: stream.lag1_autocorrelation(),
        stream_time_s: stream.total_time_s(),
    };
    let path = out_path(&cfg.experiment.out_dir, "spin_summary.json");
    write_json(&path, &summary)?;
    Ok(path)
}
