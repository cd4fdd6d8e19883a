use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use mrsquant_core::datagen::DATASET_MAGIC;
use mrsquant_core::nn::{train_datasets, History};
use mrsquant_core::preprocess::SCAN_MAGIC;
use mrsquant_core::{
    build_basis, build_network, default_definitions, evaluate, parse_definitions, BasisSet, Checkpoint, Dataset,
    DatasetSpec, EvaluationReport, InputConfig, NetworkConfig, NnError, NnlsFitter, PhantomManifest, PpmWindow,
    Quantifier, Reduction, Scan, Split, Spectrum,
};
use mrsquant_core::eval::evaluate_phantoms;
use serde::Serialize;

use crate::args::{Baseline, EvaluateArgs, Format, GenBasisArgs, GenDatasetArgs, QuantifyArgs, TrainArgs};
use crate::error::{CliError, Kind, Result};
use crate::manifest::{beside, RunManifest};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::from(e).at(dir))
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::usage(e.to_string())
}

/// File name fragment for a linewidth: 1.25 becomes `1.25hz`.
fn linewidth_tag(lw: f64) -> String {
    format!("{lw:.2}hz")
}

pub fn gen_basis(args: &GenBasisArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("gen-basis", args, 0);
    let models = match &args.defs {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
            manifest.inputs.push(path.clone());
            parse_definitions(&text).map_err(|e| CliError::from(e).at(path))?
        }
        None => default_definitions(),
    };
    if args.linewidths.is_empty() {
        return Err(CliError::usage("at least one linewidth is required"));
    }
    let tags: Vec<String> = args.linewidths.iter().map(|&lw| linewidth_tag(lw)).collect();
    if let Some((i, t)) = tags.iter().enumerate().find(|(i, t)| tags[..*i].contains(t)) {
        return Err(CliError::usage(format!("linewidth {} repeats {t}", args.linewidths[i])));
    }
    let sets = build_basis(&models, &args.linewidths, &PpmWindow::default())?;
    create_dir(&args.out)?;
    for (set, tag) in sets.iter().zip(&tags) {
        let path = args.out.join(format!("basis-{tag}.basis"));
        set.save(&path).map_err(|e| CliError::from(e).at(&path))?;
        info!("wrote {} ({} metabolites)", path.display(), set.len());
        manifest.outputs.push(path);
    }
    manifest.finish(started, &args.out.join("gen-basis.manifest.json"))
}

/// A basis archive, or every `*.basis` file of a directory in name order.
fn load_bases(path: &Path) -> Result<Vec<(PathBuf, BasisSet)>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::from(e).at(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "basis"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(CliError::from(mrsquant_core::DatagenError::NoBasis).at(path));
    }
    files
        .into_iter()
        .map(|f| BasisSet::load(&f).map(|b| (f.clone(), b)).map_err(|e| CliError::from(e).at(&f)))
        .collect()
}

fn split_file_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train.dataset",
        Split::Validation => "validation.dataset",
        Split::Test => "test.dataset",
    }
}

/// Parses `train=5,val=1` into sample counts; the rounding remainder goes
/// to the first split. Zero-weight splits are dropped.
pub fn split_counts(text: &str, count: usize) -> Result<Vec<(Split, usize)>> {
    let mut weights: Vec<(Split, f64)> = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = part.split_once('=').unwrap_or((part, "1"));
        let split: Split = name.trim().parse().map_err(CliError::usage)?;
        let w: f64 = w.trim().parse().map_err(|_| CliError::usage(format!("split weight `{w}` is not a number")))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(CliError::usage(format!("split weight {w} must be non-negative")));
        }
        if weights.iter().any(|(s, _)| *s == split) {
            return Err(CliError::usage(format!("split `{name}` listed twice")));
        }
        weights.push((split, w));
    }
    weights.retain(|(_, w)| *w > 0.0);
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if weights.is_empty() {
        return Err(CliError::usage("no split has a positive weight"));
    }
    let mut counts: Vec<(Split, usize)> =
        weights.iter().map(|&(s, w)| (s, (count as f64 * w / total).floor() as usize)).collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    counts[0].1 += count - assigned;
    if let Some((s, _)) = counts.iter().find(|c| c.1 == 0) {
        return Err(CliError::usage(format!("split {s:?} would be empty with {count} samples")));
    }
    Ok(counts)
}

pub fn gen_dataset(args: &GenDatasetArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("gen-dataset", args, args.seed);
    let counts = split_counts(&args.split, args.count)?;
    let loaded = load_bases(&args.basis)?;
    manifest.inputs.extend(loaded.iter().map(|(p, _)| p.clone()));
    let bases: Vec<BasisSet> = loaded.into_iter().map(|(_, b)| b).collect();
    let mut spec = DatasetSpec::new(args.count, args.seed)
        .with_noisy_fraction(args.noisy_fraction)
        .with_sobol_skip(args.sobol_skip);
    spec.max_sigma = args.max_sigma;
    if let Some(s) = args.sigma {
        spec = spec.with_fixed_sigma(s);
    }
    let mut all = mrsquant_core::generate_dataset(&bases, &spec)?;
    let mut parts = Vec::new();
    for &(split, n) in counts.iter().skip(1).rev() {
        parts.push(all.split_off(n, split));
    }
    all.split = counts[0].0;
    parts.push(all);
    create_dir(&args.out)?;
    for part in parts.iter().rev() {
        let path = args.out.join(split_file_name(part.split));
        part.save(&path).map_err(|e| CliError::from(e).at(&path))?;
        info!("wrote {} ({} samples)", path.display(), part.len());
        manifest.outputs.push(path);
    }
    manifest.finish(started, &args.out.join("gen-dataset.manifest.json"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| CliError::from(e).at(path))
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".history.tsv");
    out.with_file_name(name)
}

fn write_history(path: &Path, history: &History) -> Result<()> {
    let mut text = String::from("epoch\ttrain_loss\tval_loss\tseconds\n");
    for e in &history.epochs {
        text.push_str(&format!("{}\t{}\t{}\t{:.3}\n", e.epoch, e.train_loss, e.val_loss, e.seconds));
    }
    fs::write(path, text).map_err(|e| CliError::from(e).at(path))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train", args, args.seed);
    let mut input = InputConfig::parse(&args.acquisitions, &args.components).map_err(usage)?;
    if args.no_b0 {
        input.b0 = None;
    }
    if args.epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let train_set = load_dataset(&args.train)?;
    let val_set = load_dataset(&args.val)?;
    manifest.inputs = vec![args.train.clone(), args.val.clone()];
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::usage("training and validation archives must be non-empty"));
    }
    if train_set.metabolites != val_set.metabolites {
        return Err(CliError::data(format!(
            "metabolites differ: {:?} vs {:?}",
            train_set.metabolites, val_set.metabolites
        )));
    }
    let net_cfg = NetworkConfig {
        size: args.size,
        reduction: args.reduction,
        input_rows: input.rows(),
        input_cols: input.bins(),
        output_dim: train_set.metabolites.len(),
        channel_scale: args.channel_scale,
        seed: args.seed,
    };
    let mut net = build_network(&net_cfg)?;
    let cfg = mrsquant_core::TrainConfig {
        batch_size: args.batch,
        max_epochs: args.epochs,
        learning_rate: args.learning_rate,
        patience: args.patience,
        seed: args.seed,
        ..Default::default()
    };
    info!(
        "training {}/{} ({} parameters) on {} samples, validating on {}",
        args.size,
        args.reduction,
        net.parameter_count(),
        train_set.len(),
        val_set.len()
    );
    let hist_path = history_path(&args.out);
    let outcome = match train_datasets(&mut net, &train_set, &val_set, &cfg, &input) {
        Ok(o) => o,
        Err(NnError::Divergence { epoch, history }) => {
            write_history(&hist_path, &history)?;
            return Err(CliError { kind: Kind::Numerical, message: format!("training diverged at epoch {epoch}") });
        }
        Err(e) => return Err(e.into()),
    };
    info!(
        "best validation loss {:.6e} at epoch {} of {}{}",
        outcome.best_val_loss,
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    write_history(&hist_path, &outcome.history)?;
    let ckpt = Checkpoint::new(net, input, train_set.metabolites.clone())?.with_history(outcome.history);
    ckpt.save(&args.out).map_err(|e| CliError::from(e).at(&args.out))?;
    manifest.outputs = vec![args.out.clone(), hist_path];
    manifest.finish(started, &beside(&args.out))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).at(path))
}

/// Named prediction rows for one scan or dataset archive.
fn quantify_file(ckpt: &Checkpoint, path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let bytes = fs::read(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if bytes.starts_with(DATASET_MAGIC) {
        let ds = Dataset::from_bytes(&bytes)?;
        let pred = ckpt.quantify_samples(&ds.samples)?;
        Ok(pred.rows().into_iter().enumerate().map(|(i, r)| (format!("{stem}#{i}"), r.to_vec())).collect())
    } else if bytes.starts_with(SCAN_MAGIC) {
        let scan = Scan::from_bytes(&bytes)?;
        let spectra = scan.spectra(&ckpt.input)?;
        let refs: Vec<&Spectrum> = spectra.iter().collect();
        let name = if scan.name.is_empty() { stem } else { scan.name };
        Ok(vec![(name, ckpt.quantify(&refs)?)])
    } else {
        Err(CliError::data("neither a scan nor a dataset archive"))
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    source: &'a Path,
    name: &'a str,
    values: &'a [f64],
}

#[derive(Serialize)]
struct PredictionReport<'a> {
    model: String,
    metabolites: &'a [String],
    spectra: Vec<PredictionRow<'a>>,
}

pub fn quantify(args: &QuantifyArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("quantify", args, 0);
    let ckpt = load_checkpoint(&args.model)?;
    manifest.inputs.push(args.model.clone());
    let mut results = Vec::new();
    let mut failed = 0usize;
    for path in &args.spectra {
        match quantify_file(&ckpt, path) {
            Ok(rows) => {
                manifest.inputs.push(path.clone());
                results.extend(rows.into_iter().map(|(n, v)| (path.as_path(), n, v)));
            }
            Err(e) => {
                error!("{}", e.at(path));
                failed += 1;
            }
        }
    }
    let text = match args.format {
        Format::Tsv => {
            let mut text = format!("spectrum\t{}\n", ckpt.metabolites.join("\t"));
            for (_, name, values) in &results {
                let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                text.push_str(&format!("{name}\t{}\n", cells.join("\t")));
            }
            text
        }
        Format::Report => {
            let report = PredictionReport {
                model: ckpt.name(),
                metabolites: &ckpt.metabolites,
                spectra: results.iter().map(|(s, n, v)| PredictionRow { source: s, name: n, values: v }).collect(),
            };
            serde_json::to_string_pretty(&report)? + "\n"
        }
    };
    match &args.out {
        Some(out) => {
            fs::write(out, text).map_err(|e| CliError::from(e).at(out))?;
            manifest.outputs.push(out.clone());
            manifest.finish(started, &beside(out))?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    if failed > 0 {
        return Err(CliError::data(format!("{failed} of {} inputs failed", args.spectra.len())));
    }
    Ok(())
}

fn print_summary(r: &EvaluationReport) {
    println!(
        "{}\tepsilon={:.6}\tsigma={:.6}\tsigma_abs={:.6}\trecords={}\texcluded={}",
        r.model, r.epsilon, r.sigma, r.sigma_abs_error, r.records, r.excluded_records
    );
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("evaluate", args, 0);
    let reduction = args.reduce.as_deref().map(|r| Reduction::parse(r, args.merge_glx)).transpose().map_err(usage)?;

    let mut quantifiers: Vec<(&str, Box<dyn Quantifier>)> = Vec::new();
    if let Some(model) = &args.model {
        quantifiers.push(("network", Box::new(load_checkpoint(model)?)));
        manifest.inputs.push(model.clone());
    }
    if let Some(Baseline::Nnls) = args.baseline {
        let basis_path = args.basis.as_ref().ok_or_else(|| CliError::usage("--baseline needs --basis"))?;
        let mut bases = load_bases(basis_path)?;
        if bases.len() > 1 {
            warn!("{} basis archives found; fitting with {}", bases.len(), bases[0].0.display());
        }
        let (path, basis) = bases.swap_remove(0);
        let cfg = InputConfig::parse(&args.acquisitions, &args.components).map_err(usage)?;
        quantifiers.push(("nnls", Box::new(NnlsFitter::new(&basis, &cfg)?)));
        manifest.inputs.push(path);
    }

    let mut reports = Vec::new();
    let mut failures = 0usize;
    if let Some(ds_path) = &args.dataset {
        let ds = load_dataset(ds_path)?;
        manifest.inputs.push(ds_path.clone());
        if ds.is_empty() {
            return Err(CliError::usage(format!("{}: dataset is empty", ds_path.display())));
        }
        let name = ds_path.display().to_string();
        for (tag, q) in &quantifiers {
            reports.push((*tag, evaluate(q.as_ref(), &ds, reduction.as_ref(), &name)?));
        }
    } else if let Some(m_path) = &args.phantom_manifest {
        let pm = PhantomManifest::load(m_path).map_err(|e| CliError::from(e).at(m_path))?;
        manifest.inputs.push(m_path.clone());
        if pm.phantoms.is_empty() {
            return Err(CliError::usage(format!("{}: no phantoms listed", m_path.display())));
        }
        let name = m_path.display().to_string();
        for (tag, q) in &quantifiers {
            let (report, errs) = evaluate_phantoms(q.as_ref(), &pm, reduction.as_ref(), &name)?;
            for e in &errs {
                error!("{tag}: {e}");
            }
            failures += errs.len();
            reports.push((*tag, report));
        }
    }

    create_dir(&args.out)?;
    for (tag, report) in &reports {
        let path = args.out.join(format!("report-{tag}.json"));
        report.save(&path).map_err(|e| CliError::from(e).at(&path))?;
        print_summary(report);
        manifest.outputs.push(path);
    }
    manifest.finish(started, &args.out.join("evaluate.manifest.json"))?;
    if failures > 0 {
        return Err(CliError::data(format!("{failures} phantom scans failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_weights() {
        assert_eq!(split_counts("train=5,val=1,test=0", 6000).unwrap(), vec![(Split::Train, 5000), (Split::Validation, 1000)]);
        assert_eq!(split_counts("train", 7).unwrap(), vec![(Split::Train, 7)]);
        assert_eq!(split_counts("val=1,train=1", 5).unwrap(), vec![(Split::Validation, 3), (Split::Train, 2)]);
        assert!(split_counts("train=1,train=2", 5).is_err());
        assert!(split_counts("train=0", 5).is_err());
        assert!(split_counts("dev=1", 5).is_err());
        assert!(split_counts("train=1,test=1", 1).is_err());
    }

    #[test]
    fn derived_paths() {
        assert_eq!(history_path(Path::new("/x/m.ckpt")), PathBuf::from("/x/m.ckpt.history.tsv"));
        assert_eq!(beside(Path::new("m.ckpt")), PathBuf::from("m.ckpt.manifest.json"));
        assert_eq!(linewidth_tag(0.75), "0.75hz");
    }
}
