use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use qkmps::ansatz::{feature_map_circuit, CompileOptions};
use qkmps::kernel::{make_schedule, run_distributed, GramSidecar, RunOptions, RunReport};
use qkmps::learn::{
    self, decision_scores, default_alpha, evaluate, gaussian_gram, svm_train, Dataset, Metrics, Split,
};
use qkmps::mps::{inner_product, Basis};
use qkmps::{FeatureMapConfig, GramKind, GramMatrix, MpsState};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, StageExt};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).stage("output")?);
    serde_json::to_writer_pretty(&mut w, value).stage("output")?;
    w.write_all(b"\n").stage("output")?;
    w.flush().stage("output")
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir).stage("output")?;
    Ok(&cfg.out_dir)
}

/// Loads the configured dataset (or generates it), keeps the first
/// `features` columns and draws `n_per_class` rows of each class.
pub fn load_balanced(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let ds = match &cfg.data {
        Some(path) => Dataset::read_csv(path).stage("load")?,
        None => learn::synthetic(&cfg.synthetic_spec()).stage("load")?,
    };
    let ds = ds.select_features(cfg.features).stage("load")?;
    learn::balance(&ds, cfg.n_per_class, cfg.seed).stage("select")
}

#[derive(Debug, Serialize)]
pub struct PreprocessSummary {
    pub output: PathBuf,
    pub rows: usize,
    pub positives: usize,
    pub negatives: usize,
    pub features: usize,
}

/// Balanced, down-selected dataset rescaled into `[0, 2]`.
pub fn preprocess(cfg: &ExperimentConfig, output: Option<&Path>) -> Result<PreprocessSummary, CliError> {
    cfg.validate()?;
    let mut ds = load_balanced(cfg)?;
    let params = learn::fit_rescale(&ds.features).stage("rescale")?;
    ds.features = learn::apply_rescale(&ds.features, &params).stage("rescale")?;
    let output = match output {
        Some(p) => p.to_path_buf(),
        None => ensure_out_dir(cfg)?.join("dataset.csv"),
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).stage("output")?;
    }
    ds.write_csv(BufWriter::new(File::create(&output).stage("output")?)).stage("output")?;
    Ok(PreprocessSummary {
        output,
        rows: ds.len(),
        positives: ds.count(1),
        negatives: ds.count(-1),
        features: ds.num_features(),
    })
}

pub fn prepare_split(cfg: &ExperimentConfig) -> Result<Split, CliError> {
    let ds = load_balanced(cfg)?;
    let split = learn::split_and_rescale(&ds, cfg.train_fraction, cfg.seed).stage("split")?;
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        if part.count(1) == 0 || part.count(-1) == 0 {
            return Err(CliError::validation(
                "split",
                format!(
                    "{name} split lacks a class ({} rows per class, fraction {})",
                    cfg.n_per_class, cfg.train_fraction
                ),
            ));
        }
    }
    Ok(split)
}

fn distributed_gram(
    cfg: &ExperimentConfig,
    fm: &FeatureMapConfig,
    bras: &[Vec<f64>],
    kets: &[Vec<f64>],
    kind: GramKind,
    name: &str,
) -> Result<(GramMatrix, RunReport), CliError> {
    let schedule = make_schedule(bras.len(), kets.len(), cfg.workers, cfg.strategy, kind).stage("schedule")?;
    let opts = RunOptions {
        budget: cfg.trunc_budget,
        ..RunOptions::default()
    };
    let (gram, report) = run_distributed(bras, kets, fm, &schedule, &opts).stage("gram")?;
    let dir = ensure_out_dir(cfg)?;
    gram.write_csv(&dir.join(format!("{name}.csv"))).stage("output")?;
    GramSidecar::new(&gram, fm, &schedule, cfg.trunc_budget, &report)
        .write_json(&dir.join(format!("{name}.json")))
        .stage("output")?;
    Ok((gram, report))
}

#[derive(Debug, Serialize)]
pub struct GramSummary {
    pub train: (usize, usize),
    pub test: Option<(usize, usize)>,
    pub simulations: usize,
    pub inner_products: usize,
}

/// Train and test quantum Gram matrices for the configured split, or only
/// a train matrix for an already rescaled `input` CSV.
pub fn gram(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<GramSummary, CliError> {
    cfg.validate()?;
    let fm = cfg.feature_map()?;
    match input {
        Some(path) => {
            let ds = Dataset::read_csv(path).stage("load")?.select_features(cfg.features).stage("load")?;
            let rows = &ds.features;
            let (g, rep) = distributed_gram(cfg, &fm, rows, rows, GramKind::Train, "gram_train")?;
            Ok(GramSummary {
                train: (g.rows(), g.cols()),
                test: None,
                simulations: rep.simulations,
                inner_products: rep.inner_products,
            })
        }
        None => {
            let split = prepare_split(cfg)?;
            let (tr, te) = (&split.train.features, &split.test.features);
            let (g_tr, r_tr) = distributed_gram(cfg, &fm, tr, tr, GramKind::Train, "gram_train")?;
            let (g_te, r_te) = distributed_gram(cfg, &fm, te, tr, GramKind::Test, "gram_test")?;
            write_json(&cfg.out_dir.join("split.json"), &SplitIndices::from(&split))?;
            Ok(GramSummary {
                train: (g_tr.rows(), g_tr.cols()),
                test: Some((g_te.rows(), g_te.cols())),
                simulations: r_tr.simulations + r_te.simulations,
                inner_products: r_tr.inner_products + r_te.inner_products,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitIndices {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl From<&Split> for SplitIndices {
    fn from(s: &Split) -> Self {
        Self {
            train_indices: s.train_indices.clone(),
            test_indices: s.test_indices.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CRow {
    pub c: f64,
    pub support_vectors: usize,
    pub iterations: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub kernel: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub split: SplitIndices,
    pub per_c: Vec<CRow>,
    pub best: CRow,
}

fn sweep_c(
    cfg: &ExperimentConfig,
    k_train: &GramMatrix,
    k_test: &GramMatrix,
    split: &Split,
) -> Result<(Vec<CRow>, CRow), CliError> {
    let mut rows = Vec::with_capacity(cfg.c_grid.len());
    for &c in &cfg.c_grid {
        let model = svm_train(k_train, &split.train.labels, c, cfg.tol).stage("train")?;
        let scores = decision_scores(&model, k_test).stage("evaluate")?;
        let metrics = evaluate(&scores, &split.test.labels, 0.0).stage("evaluate")?;
        rows.push(CRow {
            c,
            support_vectors: model.support_indices.len(),
            iterations: model.iterations,
            metrics,
        });
    }
    // first C wins ties
    let best = rows
        .iter()
        .reduce(|a, b| if b.metrics.auc > a.metrics.auc { b } else { a })
        .cloned()
        .expect("non-empty C grid");
    Ok((rows, best))
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub quantum: KernelReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<KernelReport>,
}

/// Split, simulate, build both Gram matrices, sweep C and evaluate; also
/// the Gaussian baseline on the same split when enabled.
pub fn experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    cfg.validate()?;
    let fm = cfg.feature_map()?;
    let split = prepare_split(cfg)?;
    let (tr, te) = (&split.train.features, &split.test.features);
    let (k_train, _) = distributed_gram(cfg, &fm, tr, tr, GramKind::Train, "gram_train")?;
    let (k_test, _) = distributed_gram(cfg, &fm, te, tr, GramKind::Test, "gram_test")?;
    let (per_c, best) = sweep_c(cfg, &k_train, &k_test, &split)?;
    let quantum = KernelReport {
        kernel: "quantum".into(),
        alpha: None,
        split: SplitIndices::from(&split),
        per_c,
        best,
    };
    let gaussian = if cfg.gaussian_baseline {
        let alpha = default_alpha(tr).stage("gaussian")?;
        let g_train = gaussian_gram(tr, tr, alpha, GramKind::Train).stage("gaussian")?;
        let g_test = gaussian_gram(te, tr, alpha, GramKind::Test).stage("gaussian")?;
        let (per_c, best) = sweep_c(cfg, &g_train, &g_test, &split)?;
        Some(KernelReport {
            kernel: "gaussian".into(),
            alpha: Some(alpha),
            split: SplitIndices::from(&split),
            per_c,
            best,
        })
    } else {
        None
    };
    let report = ExperimentReport {
        config: cfg.clone(),
        train_size: tr.len(),
        test_size: te.len(),
        quantum,
        gaussian,
    };
    write_json(&ensure_out_dir(cfg)?.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quartiles.
pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Quartiles {
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
    }
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub simulation_seconds: Quartiles,
    pub inner_product_seconds: Quartiles,
    pub max_chi: Quartiles,
    pub peak_memory_bytes: Quartiles,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub cfg: FeatureMapConfig,
    pub samples: usize,
    pub trunc_budget: f64,
    pub simulation_seconds: Vec<f64>,
    /// Pairs `i < j` in row-major order.
    pub inner_product_seconds: Vec<f64>,
    pub max_chi: Vec<usize>,
    /// MPS memory after each gate, one series per sample.
    pub memory_series: Vec<Vec<usize>>,
    pub summary: BenchSummary,
}

/// Times `samples` circuit simulations from the training split and every
/// inner product between them.
pub fn benchmark(cfg: &ExperimentConfig) -> Result<BenchReport, CliError> {
    cfg.validate()?;
    let fm = cfg.feature_map()?;
    let split = prepare_split(cfg)?;
    let rows = &split.train.features;
    if rows.len() < cfg.samples {
        return Err(CliError::validation(
            "benchmark",
            format!("{} samples requested, training split has {}", cfg.samples, rows.len()),
        ));
    }
    let mut states = Vec::with_capacity(cfg.samples);
    let (mut sim_s, mut chi, mut series) = (Vec::new(), Vec::new(), Vec::new());
    for x in &rows[..cfg.samples] {
        let circuit = feature_map_circuit(x, &fm, CompileOptions::default()).stage("benchmark")?;
        let mut mem = Vec::with_capacity(circuit.len());
        let start = Instant::now();
        let mut state = MpsState::new(fm.m, Basis::Zero).stage("benchmark")?.with_budget(cfg.trunc_budget);
        state
            .apply_circuit_observed(&circuit, |_, s| mem.push(s.memory_bytes()))
            .stage("benchmark")?;
        sim_s.push(start.elapsed().as_secs_f64());
        chi.push(state.stats().max_chi);
        series.push(mem);
        states.push(state);
    }
    let mut ip_s = Vec::new();
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let start = Instant::now();
            inner_product(&states[i], &states[j]).stage("benchmark")?;
            ip_s.push(start.elapsed().as_secs_f64());
        }
    }
    let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let peaks: Vec<usize> = series.iter().map(|s| s.iter().copied().max().unwrap_or(0)).collect();
    let summary = BenchSummary {
        simulation_seconds: quartiles(&sim_s),
        inner_product_seconds: quartiles(&ip_s),
        max_chi: quartiles(&as_f64(&chi)),
        peak_memory_bytes: quartiles(&as_f64(&peaks)),
    };
    let report = BenchReport {
        cfg: fm,
        samples: cfg.samples,
        trunc_budget: cfg.trunc_budget,
        simulation_seconds: sim_s,
        inner_product_seconds: ip_s,
        max_chi: chi,
        memory_series: series,
        summary,
    };
    let dir = ensure_out_dir(cfg)?;
    write_json(&dir.join("benchmark.json"), &report)?;
    let mut csv = BufWriter::new(File::create(dir.join("benchmark_memory.csv")).stage("output")?);
    writeln!(csv, "sample,gate,memory_bytes").stage("output")?;
    for (s, mem) in report.memory_series.iter().enumerate() {
        for (g, bytes) in mem.iter().enumerate() {
            writeln!(csv, "{s},{g},{bytes}").stage("output")?;
        }
    }
    csv.flush().stage("output")?;
    Ok(report)
}
