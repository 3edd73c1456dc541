//! Command implementations. Each returns the files it produced plus a short
//! human summary; nothing is written here.

use std::path::Path;

use blockquant::analysis::{
    density_report, memory_density, quant_error, variance_profile, ProfileSite,
};
use blockquant::linalg::{QuantConfig, TensorSite};
use blockquant::model_zoo::{
    build_copy_model, build_toy_model, decode_model, encode_model, evaluate,
    inject_scaling_offsets, synth_dataset, Dataset, ToyModel,
};
use blockquant::quantizer::{cast, encode_qtensor};
use blockquant::search::{
    best_trial, bitwidth_histogram, calibrate_alpha, filter_trials, parse_trial_log,
    write_trial_log, Calibration, ModelSearch, Objective, SearchSpace, SiteChoices, Trial,
    WidthDistribution, WIDTH_BUCKETS,
};
use blockquant::Tensor;
use log::info;
use serde::Serialize;

use crate::config::{require, AlphaSpec, Command, ModelSpec, OutputFormat, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::output::{fmt_float, Csv, OutputSet};

/// Files and a one-decimal summary for stdout.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub files: OutputSet,
    pub summary: String,
}

pub fn execute(command: Command, cfg: &RunConfig) -> CliResult<CommandOutput> {
    match command {
        Command::Quantize => quantize(cfg),
        Command::Eval => eval(cfg),
        Command::Density => density(cfg),
        Command::Profile => profile(cfg),
        Command::Search => search(cfg),
        Command::Report => report(cfg),
        Command::BuildModel => build_model(cfg),
    }
}

fn format_of(cfg: &RunConfig, default: OutputFormat) -> OutputFormat {
    cfg.output_format.unwrap_or(default)
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Reads a tensor from `{"shape": [r, c], "data": [...]}` JSON or from CSV
/// with one row per line.
pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    let text = read_text(path)?;
    let t = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        parse_csv_tensor(&text)?
    } else {
        serde_json::from_str::<Tensor>(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    if !t.all_finite() {
        return Err(CliError::Numeric(format!(
            "{}: non-finite value in tensor",
            path.display()
        )));
    }
    Ok(t)
}

pub fn parse_csv_tensor(text: &str) -> CliResult<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("tensor csv line {}: {e}", i + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(CliError::Config(format!(
                    "tensor csv line {} has {} values, expected {n}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok(Tensor::from_vec(rows, cols.unwrap_or(0), data)?)
}

fn load_model(cfg: &RunConfig, command: Command) -> CliResult<ToyModel> {
    let model = match require(&cfg.model, "model", command)? {
        ModelSpec::File { path } => decode_model(&read_bytes(path)?)?,
        ModelSpec::Random { dims, seed } => build_toy_model(*dims, seed.unwrap_or(cfg.seed()))?,
        ModelSpec::Planted { shift } => build_copy_model(*shift)?,
    };
    match &cfg.offsets {
        Some(plan) => Ok(inject_scaling_offsets(&model, plan)?),
        None => Ok(model),
    }
}

fn load_dataset(cfg: &RunConfig, command: Command, model: &ToyModel) -> CliResult<Dataset> {
    let spec = require(&cfg.dataset, "dataset", command)?;
    Ok(synth_dataset(
        spec.task,
        spec.size,
        model.dims.vocab,
        model.dims.seq_len,
        spec.seed.unwrap_or(cfg.seed()),
    )?)
}

fn finite(name: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Numeric(format!("{name} is not finite")))
    }
}

fn quantize(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Quantize;
    let input = require(&cfg.input, "input", c)?;
    let format = require(&cfg.format, "format", c)?;
    format.validate()?;
    let tensor = read_tensor(input)?;
    let q = cast(&tensor, format)?;
    let err = quant_error(&tensor, format)?;
    let mut files = OutputSet::default();
    files.add("quantized.bqt", encode_qtensor(&q));
    match format_of(cfg, OutputFormat::Json) {
        OutputFormat::Json => files.add_json("error.json", &err),
        OutputFormat::Csv => {
            let mut csv = Csv::new(&["mse", "sqnr_db", "max_abs_err"]);
            csv.row(&[
                fmt_float(err.mse),
                fmt_float(err.sqnr_db),
                fmt_float(err.max_abs_err),
            ]);
            files.add("error.csv", csv.finish());
        }
    }
    Ok(CommandOutput {
        files,
        summary: format!(
            "{}x{} tensor, mse {:.1e}, sqnr {:.1} dB",
            tensor.rows(),
            tensor.cols(),
            err.mse,
            err.sqnr_db
        ),
    })
}

#[derive(Debug, Serialize)]
struct EvalDoc {
    accuracy: f64,
    mean_loss: f64,
    labels: usize,
    memory_density: f64,
}

fn eval(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Eval;
    let quant = cfg.quant.clone().unwrap_or_else(QuantConfig::identity);
    let model = load_model(cfg, c)?;
    let data = load_dataset(cfg, c, &model)?;
    let r = evaluate(&model, &data, &quant)?;
    let doc = EvalDoc {
        accuracy: r.accuracy,
        mean_loss: finite("mean loss", r.mean_loss)?,
        labels: r.labels,
        memory_density: memory_density(&quant, &model.dims)?,
    };
    let mut files = OutputSet::default();
    match format_of(cfg, OutputFormat::Json) {
        OutputFormat::Json => files.add_json("eval.json", &doc),
        OutputFormat::Csv => {
            let mut csv = Csv::new(&["accuracy", "mean_loss", "labels", "memory_density"]);
            csv.row(&[
                fmt_float(doc.accuracy),
                fmt_float(doc.mean_loss),
                doc.labels.to_string(),
                fmt_float(doc.memory_density),
            ]);
            files.add("eval.csv", csv.finish());
        }
    }
    Ok(CommandOutput {
        files,
        summary: format!(
            "accuracy {:.1}%, loss {:.1}, memory density {:.1}x",
            100.0 * doc.accuracy,
            doc.mean_loss,
            doc.memory_density
        ),
    })
}

fn density(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Density;
    let dims = require(&cfg.dims, "dims", c)?;
    let quant = require(&cfg.quant, "quant", c)?;
    let r = density_report(quant, dims)?;
    let mut files = OutputSet::default();
    match format_of(cfg, OutputFormat::Json) {
        OutputFormat::Json => files.add_json("density.json", &r),
        OutputFormat::Csv => {
            let mut csv = Csv::new(&["site", "elements", "bits", "bits_per_element"]);
            for s in &r.sites {
                csv.row(&[
                    s.site.to_string(),
                    s.elements.to_string(),
                    s.bits.to_string(),
                    fmt_float(s.bits_per_element),
                ]);
            }
            csv.row(&[
                "total".into(),
                r.total_elements.to_string(),
                r.total_bits.to_string(),
                fmt_float(r.total_bits as f64 / r.total_elements as f64),
            ]);
            files.add("density.csv", csv.finish());
        }
    }
    let arith = r
        .arithmetic_density
        .map_or_else(|| "n/a".to_string(), |a| format!("{a:.1}x"));
    Ok(CommandOutput {
        files,
        summary: format!(
            "memory density {:.1}x, arithmetic density {arith}",
            r.memory_density
        ),
    })
}

fn profile(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Profile;
    let model = load_model(cfg, c)?;
    let data = load_dataset(cfg, c, &model)?;
    let sites = cfg
        .sites
        .clone()
        .unwrap_or_else(|| ProfileSite::all(model.dims.layers));
    let p = variance_profile(&model, &data, &sites)?;
    for s in &p.sites {
        finite(&format!("variance at {}", s.site), s.variance)?;
    }
    let mut files = OutputSet::default();
    match format_of(cfg, OutputFormat::Csv) {
        OutputFormat::Json => files.add_json("profile.json", &p),
        OutputFormat::Csv => {
            let mut csv = Csv::new(&["site", "count", "variance"]);
            for s in &p.sites {
                csv.row(&[
                    s.site.to_string(),
                    s.count.to_string(),
                    fmt_float(s.variance),
                ]);
            }
            files.add("profile.csv", csv.finish());
        }
    }
    let peak = p
        .sites
        .iter()
        .max_by(|a, b| a.variance.total_cmp(&b.variance))
        .map(|s| format!(", largest variance {:.1} at {}", s.variance, s.site))
        .unwrap_or_default();
    Ok(CommandOutput {
        files,
        summary: format!("{} sites profiled{peak}", p.sites.len()),
    })
}

/// One row per site; fraction cells stay empty when no trial was counted.
pub fn histogram_csv(h: &[WidthDistribution]) -> String {
    let mut header = vec!["site", "count"];
    header.extend(WIDTH_BUCKETS);
    header.push("mean_width");
    let mut csv = Csv::new(&header);
    for d in h {
        let mut cells = vec![d.site.to_string(), d.count.to_string()];
        for f in d.fractions {
            cells.push(if d.count == 0 {
                String::new()
            } else {
                fmt_float(f)
            });
        }
        cells.push(d.mean_width.map(fmt_float).unwrap_or_default());
        csv.row(&cells);
    }
    csv.finish()
}

#[derive(Debug, Clone, Serialize)]
struct BestDoc {
    index: usize,
    acc: f64,
    mem: f64,
    score: f64,
}

impl From<&Trial> for BestDoc {
    fn from(t: &Trial) -> Self {
        BestDoc {
            index: t.index,
            acc: t.acc,
            mem: t.mem,
            score: t.score,
        }
    }
}

#[derive(Debug, Serialize)]
struct SearchSummary {
    fp32_acc: f64,
    acc_floor: f64,
    mem_floor: f64,
    alpha: f64,
    calibration: Option<Calibration>,
    trials: usize,
    filtered: usize,
    best: Option<BestDoc>,
    best_filtered: Option<BestDoc>,
}

fn search(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Search;
    let space_spec = cfg.space.clone().unwrap_or_default();
    let params = cfg.search.unwrap_or_default();
    params.tpe.validate()?;
    if params.batch == 0 {
        return Err(CliError::Config("search batch must be positive".into()));
    }
    let thresholds = cfg.thresholds.unwrap_or_default();
    let budget = cfg.budget();
    if budget == 0 {
        return Err(CliError::Config("budget must be positive".into()));
    }
    if let AlphaSpec::Value(a) = cfg.alpha() {
        Objective::new(a).validate()?;
    }
    let model = load_model(cfg, c)?;
    let data = load_dataset(cfg, c, &model)?;
    let space = SearchSpace::new(model.dims.layers, &space_spec.widths, &space_spec.blocks)?;
    let runner = ModelSearch {
        model: &model,
        data: &data,
        space: &space,
        params,
        seed: cfg.seed(),
    };

    let fp32_acc = evaluate(&model, &data, &QuantConfig::identity())?.accuracy;
    let (alpha, calibration) = match cfg.alpha() {
        AlphaSpec::Value(a) => (a, None),
        AlphaSpec::Calibrate => {
            let cal = calibrate_alpha(
                &runner,
                cfg.calibration_budget.unwrap_or(budget),
                cfg.patience(),
            )?;
            info!("calibrated alpha {} after {} trials", cal.alpha, cal.trials);
            (finite("calibrated alpha", cal.alpha)?, Some(cal))
        }
    };
    let objective = Objective::new(alpha);
    objective.validate()?;
    let trials = runner.run(&objective, budget)?;
    let acc_floor = thresholds
        .acc_floor
        .unwrap_or(fp32_acc - thresholds.acc_drop);
    let kept = filter_trials(&trials, acc_floor, thresholds.mem_floor);
    let hist = bitwidth_histogram(&kept, &space)?;
    let best =
        best_trial(&trials).ok_or_else(|| CliError::Config("search ran no trials".into()))?;

    let summary = SearchSummary {
        fp32_acc,
        acc_floor,
        mem_floor: thresholds.mem_floor,
        alpha,
        calibration,
        trials: trials.len(),
        filtered: kept.len(),
        best: Some(best.into()),
        best_filtered: best_trial(&kept).map(BestDoc::from),
    };
    let mut files = OutputSet::default();
    files.add("trials.jsonl", write_trial_log(&trials));
    files.add("histogram.csv", histogram_csv(&hist));
    files.add_json("best_config.json", &best.config);
    files.add_json("summary.json", &summary);
    Ok(CommandOutput {
        files,
        summary: format!(
            "{} trials, alpha {:.3}, best acc {:.1}% at {:.1}x, {} pass the thresholds",
            trials.len(),
            alpha,
            100.0 * best.acc,
            best.mem,
            kept.len()
        ),
    })
}

/// Search space covering every site the trials configure, for histograms.
fn space_of(trials: &[Trial]) -> CliResult<SearchSpace> {
    let layers = trials
        .iter()
        .flat_map(|t| t.config.explicit_sites().keys())
        .map(|s| s.layer + 1)
        .max()
        .ok_or_else(|| CliError::Config("trial log has no per-site configs".into()))?;
    Ok(SearchSpace {
        sites: TensorSite::all(layers)
            .into_iter()
            .map(|site| SiteChoices {
                site,
                widths: Vec::new(),
                blocks: Vec::new(),
            })
            .collect(),
    })
}

#[derive(Debug, Serialize)]
struct ReportSummary {
    acc_floor: f64,
    mem_floor: f64,
    trials: usize,
    filtered: usize,
    mean_acc: Option<f64>,
    mean_mem: Option<f64>,
    best: Option<BestDoc>,
}

fn report(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let c = Command::Report;
    let path = require(&cfg.trials, "trials", c)?;
    let trials = parse_trial_log(&read_text(path)?)?;
    let space = space_of(&trials)?;
    let t = cfg.thresholds.unwrap_or_default();
    let acc_floor = t.acc_floor.unwrap_or(0.0);
    let kept = filter_trials(&trials, acc_floor, t.mem_floor);
    let hist = bitwidth_histogram(&kept, &space)?;
    let mean = |f: fn(&Trial) -> f64| {
        (!kept.is_empty()).then(|| kept.iter().map(f).sum::<f64>() / kept.len() as f64)
    };
    let summary = ReportSummary {
        acc_floor,
        mem_floor: t.mem_floor,
        trials: trials.len(),
        filtered: kept.len(),
        mean_acc: mean(|t| t.acc),
        mean_mem: mean(|t| t.mem),
        best: best_trial(&kept).map(BestDoc::from),
    };
    let mut files = OutputSet::default();
    files.add("histogram.csv", histogram_csv(&hist));
    match format_of(cfg, OutputFormat::Json) {
        OutputFormat::Json => files.add_json("summary.json", &summary),
        OutputFormat::Csv => {
            let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
            let mut csv = Csv::new(&[
                "acc_floor",
                "mem_floor",
                "trials",
                "filtered",
                "mean_acc",
                "mean_mem",
                "best_index",
                "best_score",
            ]);
            csv.row(&[
                fmt_float(acc_floor),
                fmt_float(t.mem_floor),
                summary.trials.to_string(),
                summary.filtered.to_string(),
                opt(summary.mean_acc),
                opt(summary.mean_mem),
                summary
                    .best
                    .as_ref()
                    .map(|b| b.index.to_string())
                    .unwrap_or_default(),
                opt(summary.best.as_ref().map(|b| b.score)),
            ]);
            files.add("summary.csv", csv.finish());
        }
    }
    let means = match (summary.mean_acc, summary.mean_mem) {
        (Some(a), Some(m)) => format!(", mean acc {:.1}%, mean density {m:.1}x", 100.0 * a),
        _ => String::new(),
    };
    Ok(CommandOutput {
        files,
        summary: format!("{} of {} trials pass{means}", kept.len(), trials.len()),
    })
}

fn build_model(cfg: &RunConfig) -> CliResult<CommandOutput> {
    let model = load_model(cfg, Command::BuildModel)?;
    let mut files = OutputSet::default();
    files.add("model.bqm", encode_model(&model));
    let d = model.dims;
    Ok(CommandOutput {
        files,
        summary: format!(
            "{} layers, d_model {}, d_ff {}, {} heads, vocab {}, seq_len {}",
            d.layers, d.d_model, d.d_ff, d.heads, d.vocab, d.seq_len
        ),
    })
}
