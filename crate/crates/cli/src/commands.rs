use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use chrono::Utc;
use evalflow_core::backend::HttpBackendConfig;
use evalflow_core::config::{BackendDescriptor, EvalConfig};
use evalflow_core::dataset::{load_dataset, DatasetManifest, EvalItem, ManifestDefaults};
use evalflow_core::report::{aggregate, emit_report, render, MetricReport, ReportFormat};
use evalflow_core::runner::{read_records, rescore_record, write_records, write_run, Evaluator, RunMeta, META_FILE, RECORDS_FILE};
use evalflow_core::AnswerExtractor;

use crate::{EvalArgs, ReportArgs, ScoreArgs, ValidateArgs};

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATASET: u8 = 2;
pub const ITEM_ERRORS: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn usage(e: impl Display) -> Failure {
    Failure { code: USAGE, message: e.to_string() }
}

fn dataset_error(e: impl Display) -> Failure {
    Failure { code: DATASET, message: e.to_string() }
}

type Outcome = Result<u8, Failure>;

fn parse_format(s: &str) -> Result<ReportFormat, Failure> {
    s.parse().map_err(usage)
}

fn apply_overrides(config: &mut EvalConfig, args: &EvalArgs) -> Result<(), Failure> {
    if let Some(url) = &args.backend {
        let model = args
            .model
            .clone()
            .or_else(|| config.backend.model_name().map(str::to_string))
            .ok_or_else(|| usage("--backend needs a model name (--model or config)"))?;
        let mut http = HttpBackendConfig::new(url, &model);
        if let BackendDescriptor::Http(existing) = &config.backend {
            http = HttpBackendConfig {
                base_url: url.clone(),
                model_name: model,
                ..existing.clone()
            };
        }
        config.backend = BackendDescriptor::Http(http);
    } else if let Some(model) = &args.model {
        config.backend.set_model_name(model).map_err(usage)?;
    }
    if let Some(p) = &args.dataset {
        config.dataset = Some(p.clone());
    }
    if let Some(mode) = args.mode {
        config.run.mode = mode;
    }
    if let Some(n) = args.shots {
        config.run.num_shots = n;
    }
    if args.cot {
        config.run.use_cot = true;
    }
    if let Some(n) = args.limit {
        config.run.limit = Some(n);
    }
    if let Some(k) = args.concurrency {
        config.run.concurrency_limit = k;
    }
    if let Some(p) = &args.output {
        config.run.output_dir = p.clone();
    }
    if let Some(p) = &args.cache {
        config.run.cache_dir = Some(p.clone());
    }
    Ok(())
}

fn write_reports(dir: &Path, report: &MetricReport) -> Result<(), Failure> {
    let reports = std::slice::from_ref(report);
    for (format, name) in [
        (ReportFormat::Markdown, "report.md"),
        (ReportFormat::Csv, "report.csv"),
        (ReportFormat::Jsonl, "report.jsonl"),
    ] {
        emit_report(reports, format, &dir.join(name)).map_err(usage)?;
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Outcome {
    let mut config = EvalConfig::load(&args.config).map_err(usage)?;
    apply_overrides(&mut config, &args)?;
    config.validate().map_err(usage)?;
    let dataset_path = config
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset given (--dataset or `dataset` in the config)"))?;
    let (manifest, items) = load_dataset(&dataset_path, &config.dataset_defaults).map_err(dataset_error)?;

    let backend = config.backend.build().map_err(usage)?;
    let capabilities = backend.capabilities().clone();
    let mut evaluator = Evaluator::new(backend, config.run.clone())
        .map_err(usage)?
        .with_template(config.template.clone())
        .map_err(usage)?
        .with_filters(config.filters().map_err(usage)?);
    if let Some(descriptor) = &config.extractor {
        evaluator = evaluator.with_extractor(descriptor.build().map_err(usage)?).map_err(usage)?;
    }

    let runtime = tokio::runtime::Runtime::new().map_err(usage)?;
    let started_at = Utc::now();
    let records = runtime.block_on(evaluator.run(&items, &manifest)).map_err(usage)?;
    let finished_at = Utc::now();

    let report = aggregate(&records, &manifest, &capabilities.model_name).map_err(usage)?;
    let meta = RunMeta {
        dataset: manifest.name.clone(),
        model: capabilities.model_name.clone(),
        started_at,
        finished_at,
        config: config.run.clone(),
        capabilities,
        manifest,
        item_count: report.item_count,
        error_count: report.error_count,
    };
    let dir = write_run(&config.run.output_dir, &meta, &records).map_err(usage)?;
    write_reports(&dir, &report)?;
    print!("{}", render(std::slice::from_ref(&report), ReportFormat::Markdown));
    eprintln!("run written to {}", dir.display());
    if report.error_count > 0 {
        for record in records.iter().filter(|r| r.is_error()) {
            eprintln!("item {}: {}", record.item_id, record.error.as_deref().unwrap_or_default());
        }
        return Ok(ITEM_ERRORS);
    }
    Ok(OK)
}

fn load_meta(records_path: &Path) -> Option<RunMeta> {
    let meta_path = records_path.with_file_name(META_FILE);
    let text = std::fs::read_to_string(meta_path).ok()?;
    match serde_json::from_str(&text) {
        Ok(meta) => Some(meta),
        Err(e) => {
            tracing::warn!(error = %e, "ignoring unreadable run metadata");
            None
        }
    }
}

fn optional_config(path: Option<&PathBuf>) -> Result<Option<EvalConfig>, Failure> {
    path.map(|p| EvalConfig::load(p).map_err(usage)).transpose()
}

pub fn score(args: ScoreArgs) -> Outcome {
    let format = parse_format(&args.format)?;
    let config = optional_config(args.config.as_ref())?;
    let (defaults, filters) = match &config {
        Some(c) => (c.dataset_defaults.clone(), c.filters().map_err(usage)?),
        None => (ManifestDefaults::default(), AnswerExtractor::default()),
    };
    let (manifest, items) = load_dataset(&args.dataset, &defaults).map_err(dataset_error)?;
    let records = read_records(&args.records).map_err(usage)?;
    let by_id: HashMap<&str, &EvalItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let rescored = records
        .iter()
        .map(|r| {
            by_id
                .get(r.item_id.as_str())
                .map(|item| rescore_record(r, item, &filters, &manifest.metrics))
                .ok_or_else(|| dataset_error(format!("record `{}` has no item in {}", r.item_id, args.dataset.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = args
        .model
        .clone()
        .or_else(|| load_meta(&args.records).map(|m| m.model))
        .unwrap_or_else(|| "unknown".to_string());
    let report = aggregate(&rescored, &manifest, &model).map_err(usage)?;
    if let Some(out) = &args.out {
        write_records(out, &rescored).map_err(usage)?;
    }
    print!("{}", render(std::slice::from_ref(&report), format));
    Ok(if report.error_count > 0 { ITEM_ERRORS } else { OK })
}

pub fn validate(args: ValidateArgs) -> Outcome {
    let config = optional_config(args.config.as_ref())?;
    let defaults = config.map(|c| c.dataset_defaults).unwrap_or_default();
    match load_dataset(&args.dataset, &defaults) {
        Ok((manifest, items)) => {
            println!("{}: {} items, dataset `{}` version {}", args.dataset.display(), items.len(), manifest.name, manifest.version);
            Ok(OK)
        }
        Err(e) => {
            println!("{e}");
            Ok(USAGE)
        }
    }
}

fn collect_runs(root: &Path) -> Result<Vec<(RunMeta, PathBuf)>, Failure> {
    if !root.is_dir() {
        return Err(usage(format!("{} is not a directory", root.display())));
    }
    let mut runs = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(usage)?;
        if entry.file_name() != RECORDS_FILE {
            continue;
        }
        match load_meta(entry.path()) {
            Some(meta) => runs.push((meta, entry.path().to_path_buf())),
            None => tracing::warn!(path = %entry.path().display(), "skipping records without run metadata"),
        }
    }
    Ok(runs)
}

fn aggregate_run(manifest: &DatasetManifest, model: &str, records_path: &Path) -> Result<MetricReport, Failure> {
    let records = read_records(records_path).map_err(usage)?;
    aggregate(&records, manifest, model).map_err(|e| usage(format!("{}: {e}", records_path.display())))
}

pub fn report(args: ReportArgs) -> Outcome {
    let format = parse_format(&args.format)?;
    let runs = collect_runs(&args.runs)?;
    if runs.is_empty() {
        return Err(usage(format!("no runs found under {}", args.runs.display())));
    }
    let reports = runs
        .iter()
        .map(|(meta, path)| aggregate_run(&meta.manifest, &meta.model, path))
        .collect::<Result<Vec<_>, _>>()?;
    match &args.out {
        Some(out) => emit_report(&reports, format, out).map_err(usage)?,
        None => print!("{}", render(&reports, format)),
    }
    Ok(OK)
}
