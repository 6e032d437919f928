use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use qlan::allocation::{optimize, predicted_link_rates, LinkId, LinkPrediction, Objective};
use qlan::coincidence::{correlate as correlate_streams, CoincidenceResult, CorrelateOptions};
use qlan::config::ExperimentConfig;
use qlan::experiment::{
    compensation_scan, rsp_execute, run_experiment, schedule, setting_streams, LinkEntry, LinkSetup, RspReport,
    RunManifest,
};
use qlan::optics::Label;
use qlan::qmath::states;
use qlan::seed::derive_seed;
use qlan::source::{car, jsi_matrix, JsiOptions};
use qlan::timetag::{read_stream, stream_to_bytes, TimetagStream};
use qlan::tomography::{sample_posterior, summarize_link, ChainDiagnostics, LinkReport, MeasurementRecord, SamplerOptions};

use crate::error::CliError;
use crate::{AllocateArgs, CorrelateArgs, JsiArgs, RunArgs, SimulateArgs, TomoArgs};

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(path).map_err(CliError::from)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct SimulatedFile {
    path: String,
    link: String,
    labels: String,
    node: String,
    records: usize,
    sha256: String,
}

#[derive(Serialize)]
struct SimulatedLink {
    link: String,
    channels: Vec<usize>,
    compensation_x_deg: f64,
    delay_bins: i64,
}

#[derive(Serialize)]
struct SimulateManifest {
    schema_version: u32,
    seed: u64,
    integration_s: f64,
    resolution_ps: u32,
    config_sha256: String,
    config: String,
    links: Vec<SimulatedLink>,
    files: Vec<SimulatedFile>,
}

/// Writes `<out>/<link>/<labels>/<node>.qltt` for every scheduled setting.
/// Only the link under test is bright, so each file holds one link's light.
pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let alloc = cfg.allocation_model()?;
    let bases = cfg.bases();
    let per_link = alloc
        .links
        .par_iter()
        .map(|(link, chans)| -> Result<(SimulatedLink, Vec<SimulatedFile>), CliError> {
            let setup = LinkSetup::from_config(&cfg, link, chans)?;
            let scan = compensation_scan(&cfg, &setup)?;
            let mut files = Vec::new();
            for labels in schedule(&bases) {
                let tag = format!("{}{}", labels[0], labels[1]);
                let (a, b) = setting_streams(&cfg, &setup, labels, scan.x_deg)?;
                for s in [&a, &b] {
                    let rel = format!("{link}/{tag}/{}.qltt", s.node);
                    let bytes = stream_to_bytes(s)?;
                    write_file(&args.out.join(&rel), &bytes)?;
                    files.push(SimulatedFile {
                        path: rel,
                        link: link.to_string(),
                        labels: tag.clone(),
                        node: s.node.clone(),
                        records: s.len(),
                        sha256: sha256_hex(&bytes),
                    });
                }
            }
            let summary = SimulatedLink {
                link: link.to_string(),
                channels: chans.clone(),
                compensation_x_deg: scan.x_deg,
                delay_bins: scan.delay_bins,
            };
            Ok((summary, files))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = cfg.to_toml();
    let mut manifest = SimulateManifest {
        schema_version: cfg.schema_version,
        seed: cfg.seed,
        integration_s: cfg.plan.integration_s,
        resolution_ps: cfg.plan.resolution_ps,
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        links: Vec::new(),
        files: Vec::new(),
    };
    for (link, files) in per_link {
        manifest.links.push(link);
        manifest.files.extend(files);
    }
    manifest.files.sort_by(|x, y| x.path.cmp(&y.path));
    write_file(&args.out.join("manifest.json"), to_json(&manifest))?;
    println!("wrote {} streams to {}", manifest.files.len(), args.out.display());
    Ok(())
}

fn read_qltt(path: &Path) -> Result<TimetagStream, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_stream(BufReader::new(f)).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct CorrelateOutput {
    first: String,
    second: String,
    resolution_ps: u32,
    #[serde(flatten)]
    result: CoincidenceResult,
}

pub fn correlate(args: &CorrelateArgs) -> Result<(), CliError> {
    let a = read_qltt(&args.first)?;
    let b = read_qltt(&args.second)?;
    let duration = match args.duration_s {
        Some(d) if d > 0.0 => d,
        Some(d) => return Err(CliError::Validation(format!("--duration-s must be positive, got {d}"))),
        None => {
            let bins = a.records.iter().chain(&b.records).map(|r| r.global_bin);
            let (lo, hi) = bins.fold((u64::MAX, 0), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let span = hi.saturating_sub(lo) as f64 * f64::from(a.clock_resolution_ps) * 1e-12;
            if span <= 0.0 {
                return Err(CliError::Validation("streams span no time; pass --duration-s".into()));
            }
            span
        }
    };
    let opts = CorrelateOptions {
        window_ns: args.window_ns,
        span_bins: args.span_bins,
        num_shifts: args.shifts,
    };
    let (result, hist) = correlate_streams(&a, &b, duration, &opts)?;
    if let Some(path) = &args.histogram {
        write_file(path, hist.to_csv())?;
    }
    print!(
        "{}",
        to_json(&CorrelateOutput {
            first: a.node,
            second: b.node,
            resolution_ps: a.clock_resolution_ps,
            result,
        })
    );
    Ok(())
}

fn target_ket(name: &str) -> Result<Vec<qlan::qmath::C64>, CliError> {
    match name {
        "psi-plus" => Ok(states::psi_plus()),
        "psi-minus" => Ok(states::psi_minus()),
        "phi-plus" => Ok(states::phi_plus()),
        "phi-minus" => Ok(states::phi_minus()),
        _ => Err(CliError::Validation(format!("unknown target state {name:?}"))),
    }
}

/// Parses `setting1,setting2,count` rows; a header row is optional.
fn read_counts(path: &Path) -> Result<Vec<([Label; 2], f64)>, CliError> {
    let bad = |line: usize, msg: String| CliError::Validation(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(i + 1, e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(bad(line, format!("expected 3 columns, found {}", rec.len())));
        }
        if i == 0 && rec[0].eq_ignore_ascii_case("setting1") {
            continue;
        }
        let label = |s: &str| s.parse::<Label>().map_err(|e| bad(line, e.to_string()));
        let count: f64 = rec[2].parse().map_err(|_| bad(line, format!("bad count {:?}", &rec[2])))?;
        rows.push(([label(&rec[0])?, label(&rec[1])?], count));
    }
    if rows.is_empty() {
        return Err(bad(0, "no count rows".into()));
    }
    Ok(rows)
}

#[derive(Serialize)]
struct TomoOutput {
    #[serde(flatten)]
    report: LinkReport,
    diagnostics: ChainDiagnostics,
}

pub fn tomo(args: &TomoArgs) -> Result<(), CliError> {
    if !(args.integration_s > 0.0) {
        return Err(CliError::Validation("--integration-s must be positive".into()));
    }
    let target = target_ket(&args.target)?;
    let rows = read_counts(&args.counts)?;
    let records: Vec<MeasurementRecord> = rows
        .iter()
        .map(|(l, n)| MeasurementRecord::pair(l[0].frame_setting(), l[1].frame_setting(), *n, args.integration_s))
        .collect();
    let bases: BTreeSet<_> = rows.iter().map(|(l, _)| (l[0].basis(), l[1].basis())).collect();
    let rate = rows.iter().map(|(_, n)| n).sum::<f64>() / (bases.len() as f64 * args.integration_s);
    let opts = SamplerOptions {
        num_samples: args.samples,
        seed: args.seed,
        ..SamplerOptions::default()
    };
    let ens = sample_posterior(&records, &opts)?;
    let report = summarize_link(&ens, rate, &target);
    if let Some(path) = &args.samples_out {
        let mut s = String::from("sample,fidelity,log_negativity,ebit_rate\n");
        for (i, m) in report.per_sample.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{}\n", m.fidelity, m.log_negativity, m.ebit_rate));
        }
        write_file(path, s)?;
    }
    print!(
        "{}",
        to_json(&TomoOutput {
            report,
            diagnostics: ens.diagnostics,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct AllocateOutput {
    objective: String,
    objective_value: Option<f64>,
    links: Vec<LinkPrediction>,
}

fn allocation_table(preds: &[LinkPrediction]) -> String {
    let mut s = format!(
        "{:<6} {:<14} {:>9} {:>8} {:>10} {:>10} {:>10}\n",
        "link", "channels", "fidelity", "E_N", "R_E", "Rc", "Ra"
    );
    for p in preds {
        let chans = if p.channels.is_empty() {
            "-".to_string()
        } else {
            p.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        };
        s.push_str(&format!(
            "{:<6} {:<14} {:>9.4} {:>8.4} {:>10.2} {:>10.2} {:>10.2}\n",
            p.link.to_string(),
            chans,
            p.fidelity,
            p.log_negativity,
            p.ebit_rate,
            p.coincidence_rate,
            p.accidental_rate
        ));
    }
    s
}

pub fn allocate(args: &AllocateArgs) -> Result<(), CliError> {
    let objective: Objective = args.objective.parse().map_err(CliError::Validation)?;
    let cfg = load_config(&args.config)?;
    let links: Vec<LinkId> = cfg.allocation_model()?.link_ids();
    if links.is_empty() {
        return Err(CliError::Validation("allocation.links names no links to serve".into()));
    }
    let budgets = cfg.budgets();
    let model = cfg.rate_model();
    let alloc = optimize(objective, &cfg.source.channels, &budgets, &links, &model)?;
    let preds = predicted_link_rates(&alloc, &cfg.source.channels, &budgets, &model)?;
    let value = qlan::allocation::objective_value(objective, &preds);
    if args.json {
        print!(
            "{}",
            to_json(&AllocateOutput {
                objective: args.objective.clone(),
                objective_value: value,
                links: preds,
            })
        );
    } else {
        print!("{}", allocation_table(&preds));
        if let Some(v) = value {
            println!("objective {} = {v:.4}", args.objective);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct JsiOutput {
    integration_s: f64,
    car: f64,
    /// counts indexed [signal - 1][idler - 1]
    matrix: Vec<Vec<f64>>,
}

pub fn jsi(args: &JsiArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let mut opts: JsiOptions = cfg
        .jsi
        .clone()
        .ok_or_else(|| CliError::Validation("config has no [jsi] section".into()))?;
    if let Some(seed) = args.seed {
        opts.poisson_seed = Some(derive_seed(seed, &["jsi"]));
    }
    let matrix = jsi_matrix(&cfg.source.channels, &opts);
    let ratio = car(&matrix)?;
    if let Some(path) = &args.csv {
        let mut s = String::from("signal,idler,count\n");
        for (i, row) in matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{v}\n", i + 1, j + 1));
            }
        }
        write_file(path, s)?;
    }
    print!(
        "{}",
        to_json(&JsiOutput {
            integration_s: opts.integration_s,
            car: ratio,
            matrix,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct RunManifestOut<'a> {
    #[serde(flatten)]
    run: &'a RunManifest,
    config_sha256: String,
    links: Vec<String>,
    failed_links: Vec<String>,
    rsp_tasks: usize,
}

fn link_file(out: &Path, dir: &str, link: &LinkId) -> PathBuf {
    out.join(dir).join(format!("{link}.json"))
}

/// Writes manifest.json, links/<link>.json, table.csv and, when RSP tasks
/// are configured, rsp/<link>.json plus poincare.csv.
pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.window_ns {
        cfg.plan.window_ns = w;
    }
    if let Some(n) = args.samples {
        cfg.plan.samples = n;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg);
    let out = &args.out;
    for entry in &report.links {
        write_file(&link_file(out, "links", &entry.link), to_json(entry))?;
    }
    let table = report.table_csv();
    write_file(&out.join("table.csv"), &table)?;

    let tasks = cfg.rsp_tasks();
    let rsp: Vec<(String, Result<RspReport, CliError>)> = tasks
        .par_iter()
        .map(|task| {
            let name = format!("{}:{}{}", task.link, task.sender, task.projection);
            let res = report
                .outcome(&task.link.to_string())
                .ok_or_else(|| CliError::Runtime(format!("RSP task {name}: link {} has no result", task.link)))
                .and_then(|run| rsp_execute(&cfg, task, run).map_err(CliError::from));
            (name, res)
        })
        .collect();
    let mut poincare = String::from("task,sample,s1,s2,s3\n");
    let mut first_error: Option<CliError> = None;
    for (task, (name, res)) in tasks.iter().zip(rsp) {
        match res {
            Ok(r) => {
                write_file(&link_file(out, "rsp", &task.link), to_json(&r))?;
                for (i, s) in r.stokes_samples.iter().enumerate() {
                    poincare.push_str(&format!("{name},{i},{},{},{}\n", s[0], s[1], s[2]));
                }
            }
            Err(e) => {
                eprintln!("RSP task {name} failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if !tasks.is_empty() {
        write_file(&out.join("poincare.csv"), poincare)?;
    }

    let failed: Vec<&LinkEntry> = report.links.iter().filter(|e| e.outcome.is_none()).collect();
    let text = cfg.to_toml();
    let manifest = RunManifestOut {
        run: &report.manifest,
        config_sha256: sha256_hex(text.as_bytes()),
        links: report.links.iter().map(|e| e.link.to_string()).collect(),
        failed_links: failed.iter().map(|e| e.link.to_string()).collect(),
        rsp_tasks: tasks.len(),
    };
    write_file(&out.join("manifest.json"), to_json(&manifest))?;
    print!("{table}");

    for e in &failed {
        eprintln!("link {} failed: {}", e.link, e.error.as_deref().unwrap_or("unknown error"));
    }
    if let Some(e) = failed.iter().find(|e| e.convergence_failure) {
        return Err(CliError::Convergence(format!(
            "link {}: {}",
            e.link,
            e.error.as_deref().unwrap_or("chain did not converge")
        )));
    }
    if let Some(e) = failed.first() {
        return Err(CliError::Runtime(format!("{} link(s) failed, first: {}", failed.len(), e.link)));
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
