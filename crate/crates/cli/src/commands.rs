use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use velc_core::data::{
    load_kdd99, load_ucr, minority_class, relabel_minority, scale_and_split, synthetic_sines, Split,
    SplitSpec, SyntheticSpec,
};
use velc_core::scoring::{score_components, score_from_components, ScoreComponents};
use velc_core::train::train_with;
use velc_core::{
    auc, load_checkpoint, save_checkpoint, Dataset, EvalReport, Graph, ScoreFile, ScoreParams, Tensor,
    TrainLog, VelcError, VelcModel,
};

use crate::config::{resolve_train_config, score_params};
use crate::{
    CliError, CliResult, DatasetKind, EvalArgs, ExportArgs, PrepareArgs, ScoreArgs, SweepArgs,
    TrainArgs,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(VelcError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Debug)]
pub struct PrepareOutput {
    pub train_file: PathBuf,
    pub test_file: PathBuf,
    pub manifest_file: PathBuf,
    pub manifest: String,
    pub split: Split,
}

/// Loads raw data, marks anomalies, splits and scales, then writes the
/// canonical train/test files and a manifest.
pub fn cmd_prepare(a: &PrepareArgs, seed: u64) -> CliResult<PrepareOutput> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    let mut dataset: Dataset = match a.kind {
        DatasetKind::Ucr => {
            let (first, rest) = a
                .inputs
                .split_first()
                .ok_or_else(|| CliError::Usage("prepare --kind ucr needs at least one --input".into()))?;
            let mut raw = load_ucr(first)?;
            for p in rest {
                raw.extend(load_ucr(p)?)?;
            }
            let hist: Vec<String> = raw.histogram().iter().map(|(c, n)| format!("{c}:{n}")).collect();
            extra.push(("classes", hist.join(",")));
            extra.push(("anomalous_class", minority_class(&raw)?));
            relabel_minority(&raw)?
        }
        DatasetKind::Kdd99 => match a.inputs.as_slice() {
            [path] => load_kdd99(path)?,
            _ => return Err(CliError::Usage("prepare --kind kdd99 takes exactly one --input".into())),
        },
        DatasetKind::Synthetic => {
            if !a.inputs.is_empty() {
                return Err(CliError::Usage("prepare --kind synthetic takes no --input".into()));
            }
            synthetic_sines(&SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            })?
        }
    };
    if let Some(name) = &a.name {
        dataset = Dataset::new(name, dataset.series, dataset.labels)?;
    }
    let split = scale_and_split(
        &dataset,
        &SplitSpec {
            test_fraction: a.test_fraction,
            seed,
        },
    )?;

    ensure_dir(&a.out)?;
    let name = dataset.name.clone();
    let train_file = a.out.join(format!("{name}_train.tsv"));
    let test_file = a.out.join(format!("{name}_test.tsv"));
    let manifest_file = a.out.join(format!("{name}_manifest.txt"));
    split.train.write(&train_file)?;
    split.test.write(&test_file)?;

    let kind = match a.kind {
        DatasetKind::Ucr => "ucr",
        DatasetKind::Kdd99 => "kdd99",
        DatasetKind::Synthetic => "synthetic",
    };
    let inputs: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    let mut fields: Vec<(&str, String)> = vec![
        ("kind", kind.into()),
        ("name", name.clone()),
        ("inputs", inputs.join(",")),
        ("seed", seed.to_string()),
        ("test_fraction", a.test_fraction.to_string()),
        ("length", dataset.length().to_string()),
        ("size", dataset.len().to_string()),
        ("n_anomalous", dataset.n_anomalous().to_string()),
        ("anomaly_ratio", format!("{:.6}", dataset.anomaly_ratio())),
    ];
    fields.extend(extra);
    fields.extend([
        ("train_size", split.train.len().to_string()),
        ("test_size", split.test.len().to_string()),
        ("test_anomalous", split.test.n_anomalous().to_string()),
        ("train_file", file_name(&train_file)),
        ("test_file", file_name(&test_file)),
    ]);
    let manifest = key_value_text(&fields);
    fs::write(&manifest_file, &manifest).map_err(io_err(&manifest_file))?;
    Ok(PrepareOutput {
        train_file,
        test_file,
        manifest_file,
        manifest,
        split,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn key_value_text(fields: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in fields {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub model: VelcModel,
    pub train_log: TrainLog,
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> CliResult<TrainOutput> {
    let cfg = resolve_train_config(&a.preset, a.config.as_deref(), &a.overrides, seed)?;
    let data = Dataset::read(&a.train)?;
    let model = VelcModel::new(cfg.model_config(data.length()), cfg.seed)?;
    let quiet = a.quiet;
    let (model, log) = train_with(model, &data, &cfg, |e| {
        if !quiet {
            eprintln!(
                "iter {:>7}  total {:.6}  rec {:.6}  kl1 {:.6}  kl2 {:.6}  lat {:.6}",
                e.iteration, e.loss.total, e.loss.l_rec_x, e.loss.l_kl_1, e.loss.l_kl_2, e.loss.l_lat
            );
        }
    })?;

    ensure_dir(&a.out)?;
    let checkpoint = a.out.join("model.ckpt");
    let log_file = a.out.join("train_log.tsv");
    let manifest = a.out.join("train_manifest.txt");
    save_checkpoint(&model, &checkpoint)?;
    log.write(&log_file)?;

    let mut fields: Vec<(&str, String)> = vec![
        ("train_file", a.train.display().to_string()),
        ("dataset", data.name.clone()),
        ("series_len", data.length().to_string()),
        ("train_size", data.len().to_string()),
        ("preset", a.preset.clone()),
    ];
    fields.extend(cfg.to_key_values());
    if let Some(last) = log.entries.last() {
        fields.push(("final_total_loss", format!("{:.6}", last.loss.total)));
    }
    fs::write(&manifest, key_value_text(&fields)).map_err(io_err(&manifest))?;
    Ok(TrainOutput {
        checkpoint,
        log: log_file,
        manifest,
        model,
        train_log: log,
    })
}

fn load_pair(checkpoint: &Path, data: &Path) -> CliResult<(VelcModel, Dataset)> {
    let model = load_checkpoint(checkpoint)?;
    let data = Dataset::read(data)?;
    if data.length() != model.series_len() {
        return Err(VelcError::Config(format!(
            "{} has series of length {} but the checkpoint expects {}",
            data.name,
            data.length(),
            model.series_len()
        ))
        .into());
    }
    Ok((model, data))
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<ScoreFile> {
    let params = score_params(&a.weights)?;
    let (model, data) = load_pair(&a.checkpoint, &a.data)?;
    let comps = score_components(&model, &data.series)?;
    let records = score_from_components(&comps, Some(&data.labels), &params)?;
    let file = ScoreFile {
        dataset: data.name,
        params,
        records,
    };
    file.write(&a.out)?;
    Ok(file)
}

fn labels_of(file: &ScoreFile) -> CliResult<Vec<u8>> {
    file.labels().ok_or_else(|| {
        CliError::Core(VelcError::Config(format!(
            "score file for {} has samples without labels",
            file.dataset
        )))
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let file = ScoreFile::read(&a.scores)?;
    let labels = labels_of(&file)?;
    let raw: Vec<f64> = file.records.iter().map(|r| r.raw).collect();
    let report = EvalReport::new(&file.dataset, &raw, &labels)?;
    if let Some(path) = &a.results {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut text = String::new();
        if fresh {
            text.push_str(EvalReport::HEADER);
            text.push('\n');
        }
        text.push_str(&report.to_row());
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(io_err(path))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub auc: f64,
}

/// AUC for each `alpha` (with `beta = 1 − alpha`), re-weighting one set of
/// per-sample error components.
pub fn sweep_components(
    comps: &[ScoreComponents],
    labels: &[u8],
    alphas: &[f64],
) -> CliResult<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(VelcError::Empty("sweep grid has no alpha values".into()).into());
    }
    alphas
        .iter()
        .map(|&alpha| {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(VelcError::Config(format!("sweep alpha {alpha} outside (0, 1)")).into());
            }
            let p = ScoreParams::from_alpha(alpha, 0.5)?;
            let raw: Vec<f64> = comps.iter().map(|&c| p.combine(c)).collect();
            Ok(SweepRow {
                alpha: p.alpha,
                beta: p.beta,
                auc: auc(&raw, labels)?,
            })
        })
        .collect()
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let (comps, labels) = match (&a.scores, &a.checkpoint, &a.data) {
        (Some(scores), _, _) => {
            let file = ScoreFile::read(scores)?;
            (file.components(), labels_of(&file)?)
        }
        (None, Some(ckpt), Some(data)) => {
            let (model, data) = load_pair(ckpt, data)?;
            (score_components(&model, &data.series)?, data.labels)
        }
        _ => {
            return Err(CliError::Usage(
                "sweep needs --scores or both --checkpoint and --data".into(),
            ))
        }
    };
    let rows = sweep_components(&comps, &labels, &a.alphas)?;
    if let Some(out) = &a.out {
        fs::write(out, sweep_table(&rows)).map_err(io_err(out))?;
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha\tbeta\tauc\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.6}", r.alpha, r.beta, r.auc);
    }
    s
}

/// Writes `(id, t, x_t, x′_t)` rows for each requested sample; returns the
/// number of rows written.
pub fn cmd_export_recon(a: &ExportArgs) -> CliResult<usize> {
    let (model, data) = load_pair(&a.checkpoint, &a.data)?;
    if let Some(&bad) = a.ids.iter().find(|&&i| i >= data.len()) {
        return Err(VelcError::UnknownId(bad).into());
    }
    if a.ids.is_empty() {
        return Err(VelcError::Empty("no sample ids to export".into()).into());
    }
    let rows: Vec<&[f64]> = a.ids.iter().map(|&i| data.series[i].as_slice()).collect();
    let x = Tensor::from_rows(&rows)?;
    let mut g = Graph::new();
    let (_, out) = model.forward_eval(&mut g, &x)?;
    let recon = g.value(out.x_recon.series);

    let mut s = String::from("id\tt\tx\tx_recon\n");
    for (k, &id) in a.ids.iter().enumerate() {
        for (t, (&xv, &rv)) in data.series[id].iter().zip(recon.row(k)).enumerate() {
            let _ = writeln!(s, "{id}\t{t}\t{xv:?}\t{rv:?}");
        }
    }
    fs::write(&a.out, s).map_err(io_err(&a.out))?;
    Ok(a.ids.len() * data.length())
}
