use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vitkd::metrics::{MetricsReport, CSV_HEADER};
use vitkd::nn::{checksum, load_weights, save_weights, Model, ModelSpec};
use vitkd::par;
use vitkd::preprocess::{
    extract_patches, load_source, read_split, write_dataset, Normalization, PatchRecord, Split,
};
use vitkd::synthdata::{generate_corpus, read_corpus};
use vitkd::train::{
    evaluate, fit_distill, fit_standalone, report_rows, sweep, write_report, CellResult,
    Prepared, RunRecord, TeacherSource, TrainData, BASELINE_ID,
};

use crate::config::Config;
use crate::error::{Failure, Result};
use crate::manifest::RunManifest;

pub const WEIGHTS: &str = "model.dfw";
pub const SPEC: &str = "model.toml";
pub const RECORD: &str = "record.csv";
pub const SUMMARY: &str = "summary.txt";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.tsv";
pub const REPORT_VAL: &str = "report_val.tsv";
pub const CELLS: &str = "cells";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Patch,
    TrainTeacher,
    Train,
    Distill,
    Eval,
    Sweep,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Patch => "patch",
            Command::TrainTeacher => "train-teacher",
            Command::Train => "train",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            Command::Synth,
            Command::Patch,
            Command::TrainTeacher,
            Command::Train,
            Command::Distill,
            Command::Eval,
            Command::Sweep,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

/// A fully resolved invocation, from flags or from a manifest.
#[derive(Debug, Clone)]
pub struct Job {
    pub command: Command,
    pub config: Config,
    pub inputs: Vec<(String, String)>,
    pub out: PathBuf,
    pub force: bool,
    pub workers: usize,
    pub split: Option<Split>,
}

impl Job {
    fn input(&self, name: &str) -> Result<PathBuf> {
        self.inputs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| PathBuf::from(v))
            .ok_or_else(|| Failure::config(format!("missing input {name}")))
    }

    fn teachers(&self) -> Vec<PathBuf> {
        (0..)
            .map_while(|i| self.input(&format!("teacher.{i}")).ok())
            .collect()
    }
}

pub fn execute(job: &Job) -> Result<()> {
    prepare_out(&job.out, job.force)?;
    let mut m = RunManifest::new(job.command.as_str(), &job.config, &job.out, job.workers);
    m.inputs = job.inputs.clone();
    m.split = job.split.map(|s| s.to_string());
    let result = with_workers(job.workers, || match job.command {
        Command::Synth => synth(job),
        Command::Patch => patch(job),
        Command::TrainTeacher => train(job, true, &mut m),
        Command::Train => train(job, false, &mut m),
        Command::Distill => distill(job, &mut m),
        Command::Eval => eval(job),
        Command::Sweep => run_sweep(job, &mut m),
    });
    // Partial results such as a sweep with failed cells still get a manifest.
    m.write(&job.out)?;
    result
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    par::set_execution(if workers == 1 {
        par::Execution::Sequential
    } else {
        par::Execution::Parallel
    });
    par::with_workers(workers, f)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.is_file() {
        return Err(Failure::config(format!("{} is a file, expected a directory", out.display())));
    }
    let nonempty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if nonempty && !force {
        return Err(Failure::config(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Failure::config(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn synth(job: &Job) -> Result<()> {
    let entries = generate_corpus(&job.config.synth(), &job.out)?;
    println!("wrote {} images to {}", entries.len(), job.out.display());
    Ok(())
}

fn patch(job: &Job) -> Result<()> {
    let corpus = job.input("corpus")?;
    let cfg = job.config.patch();
    cfg.validate()?;
    let entries = read_corpus(&corpus)?;
    let results = par::map_collect(entries.len(), |i| {
        let e = &entries[i];
        let image = e.image_path(&corpus);
        let mask = e.mask_path(&corpus);
        let missing: Vec<String> = [&image, &mask]
            .into_iter()
            .filter(|p| !p.is_file())
            .map(|p| format!("{}: missing", p.display()))
            .collect();
        if !missing.is_empty() {
            return Err(missing);
        }
        load_source(&e.id, &image, Some(&mask))
            .and_then(|src| extract_patches(&src, &cfg))
            .map(|recs| recs.into_iter().map(|r| (e.split, r)).collect::<Vec<_>>())
            .map_err(|err| vec![format!("{}: {err}", e.id)])
    });
    let mut records: Vec<(Split, PatchRecord)> = Vec::new();
    let mut problems = Vec::new();
    for r in results {
        match r {
            Ok(v) => records.extend(v),
            Err(v) => problems.extend(v),
        }
    }
    if !problems.is_empty() {
        return Err(Failure::data(format!(
            "{} corpus file(s) unusable:\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    let rows = write_dataset(&job.out, &records)?;
    for split in Split::ALL {
        let mut counts = [0usize; 2];
        for r in rows.iter().filter(|r| r.split == split) {
            counts[r.label] += 1;
        }
        println!("{split}: {} patches ({} artifact_free, {} air_bubbles)", counts[0] + counts[1], counts[0], counts[1]);
    }
    Ok(())
}

fn load_data(root: &Path, test: bool) -> Result<(TrainData<f32>, usize)> {
    let train = read_split(root, Split::Train)?;
    let val = read_split(root, Split::Val)?;
    for (name, set) in [("train", &train), ("val", &val)] {
        if set.is_empty() {
            return Err(Failure::data(format!("{}: {name} split is empty", root.display())));
        }
    }
    let test_set = if test { Some(read_split(root, Split::Test)?) } else { None };
    let test_set = test_set.filter(|s| !s.is_empty());
    let size = train.size;
    let data = TrainData::new(&train, &val, test_set.as_ref(), &Normalization::default())?;
    Ok((data, size))
}

pub fn save_checkpoint(dir: &Path, model: &dyn Model<f32>) -> Result<()> {
    let mut bytes = Vec::new();
    save_weights(model, &mut bytes)?;
    write(&dir.join(WEIGHTS), bytes)?;
    let spec = toml::to_string(&model.spec()).map_err(|e| Failure::run(format!("spec: {e}")))?;
    write(&dir.join(SPEC), spec)
}

/// Reads a checkpoint directory: architecture, raw weight bytes, and the
/// rebuilt model.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelSpec, Vec<u8>, Box<dyn Model<f32>>)> {
    let spec_path = dir.join(SPEC);
    let text = fs::read_to_string(&spec_path)
        .map_err(|e| Failure::data(format!("{}: {e}", spec_path.display())))?;
    let spec: ModelSpec =
        toml::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", spec_path.display())))?;
    let weights_path = dir.join(WEIGHTS);
    let weights = fs::read(&weights_path)
        .map_err(|e| Failure::data(format!("{}: {e}", weights_path.display())))?;
    let model = spec.build::<f32>(0)?;
    load_weights(model.as_ref(), &mut weights.as_slice())
        .map_err(|e| Failure::data(format!("{}: {e}", weights_path.display())))?;
    Ok((spec, weights, model))
}

fn finish_run(dir: &Path, model: &dyn Model<f32>, record: &RunRecord) -> Result<()> {
    save_checkpoint(dir, model)?;
    let mut csv = Vec::new();
    record.write_csv(&mut csv)?;
    write(&dir.join(RECORD), csv)?;
    let line = record.summary_line();
    write(&dir.join(SUMMARY), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn train(job: &Job, teacher: bool, m: &mut RunManifest) -> Result<()> {
    let data_dir = job.input("data")?;
    let (data, size) = load_data(&data_dir, true)?;
    let spec = if teacher { job.config.teacher(size) } else { job.config.student(size) };
    m.notes.push(("model".into(), model_kind(&spec).into()));
    let mut model = spec.build::<f32>(job.config.seed)?;
    let record = fit_standalone(model.as_mut(), &data, &job.config.train())?;
    finish_run(&job.out, model.as_ref(), &record)
}

fn model_kind(spec: &ModelSpec) -> &'static str {
    match spec {
        ModelSpec::Vit(_) => "vit",
        ModelSpec::Cnn(_) => "cnn",
    }
}

fn distill(job: &Job, m: &mut RunManifest) -> Result<()> {
    let data_dir = job.input("data")?;
    let teacher_dir = job.input("teacher.0")?;
    let kd = job.config.kd();
    kd.validate().map_err(Failure::config)?;
    let (_, weights, mut teacher) = load_checkpoint(&teacher_dir)?;
    m.notes.push(("teacher.0.checksum".into(), format!("{:#018x}", checksum(&weights))));
    let (data, size) = load_data(&data_dir, true)?;
    let spec = job.config.student(size);
    let mut student = spec.build::<f32>(job.config.seed)?;
    let record = fit_distill(student.as_mut(), teacher.as_mut(), &data, &job.config.train(), &kd)?;
    finish_run(&job.out, student.as_ref(), &record)
}

fn eval(job: &Job) -> Result<()> {
    let data_dir = job.input("data")?;
    let split = job.split.unwrap_or(Split::Test);
    let (spec, _, mut model) = load_checkpoint(&job.input("model")?)?;
    let set = read_split(&data_dir, split)?;
    if set.is_empty() {
        return Err(Failure::data(format!("{}: {split} split is empty", data_dir.display())));
    }
    if set.size != spec.image_size() {
        return Err(Failure::data(format!(
            "checkpoint expects {} px patches, dataset has {} px",
            spec.image_size(),
            set.size
        )));
    }
    let prepared = Prepared::<f32>::new(&set, &Normalization::default())?;
    let report: MetricsReport = evaluate(model.as_mut(), &prepared, job.config.batch_size)?;
    write(
        &job.out.join(METRICS),
        format!("{CSV_HEADER}\n{}\n", report.csv_row(split.as_str(), 0)),
    )?;
    println!(
        "split={split} n={} accuracy={:.6} f1={:.6} mcc={:.6}",
        set.len(),
        report.accuracy,
        report.f1,
        report.mcc
    );
    Ok(())
}

fn cell_name(c: &CellResult) -> String {
    if c.teacher_id == BASELINE_ID {
        format!("{BASELINE_ID}_seed{}", c.seed)
    } else {
        format!("{}_T{}_a{}_seed{}", c.teacher_id, c.kd.temperature, c.kd.alpha, c.seed)
    }
}

fn run_sweep(job: &Job, m: &mut RunManifest) -> Result<()> {
    let data_dir = job.input("data")?;
    let mut teachers = Vec::new();
    for (i, dir) in job.teachers().into_iter().enumerate() {
        let (spec, weights, _) = load_checkpoint(&dir)?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("teacher{i}"));
        if id == BASELINE_ID || teachers.iter().any(|t: &TeacherSource| t.id == id) {
            return Err(Failure::config(format!("teacher id {id:?} is reserved or repeated")));
        }
        m.notes.push((format!("teacher.{i}.checksum"), format!("{:#018x}", checksum(&weights))));
        teachers.push(TeacherSource { id, spec, weights });
    }
    if teachers.is_empty() {
        return Err(Failure::config("sweep needs at least one --teacher"));
    }
    let (data, size) = load_data(&data_dir, true)?;
    let student = job.config.student(size);
    let results = sweep(&teachers, &student, &job.config.plan(), &data, &job.config.train())?;

    let cells = job.out.join(CELLS);
    fs::create_dir_all(&cells)?;
    let mut failed = Vec::new();
    for c in &results {
        let name = cell_name(c);
        match &c.outcome {
            Ok(record) => {
                let mut csv = Vec::new();
                record.write_csv(&mut csv)?;
                write(&cells.join(format!("{name}.csv")), csv)?;
            }
            Err(e) => {
                write(&cells.join(format!("{name}.failed")), format!("{e}\n"))?;
                failed.push(format!("{name}: {e}"));
            }
        }
    }
    let rows = report_rows(&results);
    for (file, split) in [(REPORT, "test"), (REPORT_VAL, "val")] {
        let selected: Vec<_> = rows.iter().filter(|r| r.split == split).cloned().collect();
        let mut tsv = Vec::new();
        write_report(&mut tsv, &selected)?;
        write(&job.out.join(file), tsv)?;
    }
    println!(
        "{} cells, {} failed; report in {}",
        results.len(),
        failed.len(),
        job.out.join(REPORT).display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::run(format!("{} sweep cell(s) failed:\n  {}", failed.len(), failed.join("\n  "))))
    }
}
