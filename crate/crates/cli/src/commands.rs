use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use erground::model::{ModelParams, SceneBatch};
use erground::scene::{generate_dataset, read_dataset, token_str, write_dataset, DatasetStats, GeneratorConfig, CLASS_NAMES};
use erground::tensor::{op_suite, OpKind, Tensor, DEFAULT_STEP};
use erground::train::{ablation_csv, evaluate, run_ablation_suite, split_validation, train, ExperimentConfig};
use erground::Error;

use crate::{Command, SEED_ENV};

/// A failed command: exit code and one-line cause.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(_) => Self::usage(message),
            Error::NonFinite(_) => Self::numeric(message),
            _ => Self::data(message),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::GenData {
            out,
            seed,
            train_count,
            test_count,
            config,
        } => gen_data(&out, seed, train_count, test_count, config.as_deref()),
        Command::Train { data, out, config, seed } => train_cmd(&data, &out, config.as_deref(), seed),
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => eval(&checkpoint, &data, batch_size),
        Command::Ablate {
            data,
            out,
            seeds,
            config,
            seed,
        } => ablate(&data, &out, seeds, config.as_deref(), seed),
        Command::Gradcheck { seed, corrupt } => gradcheck(seed, corrupt.as_deref()),
        Command::DumpAttention {
            checkpoint,
            data,
            scene_index,
            out,
        } => dump_attention(&checkpoint, &data, scene_index, &out),
    }
}

/// `ERGROUND_SEED`, else the flag, else `fallback`.
fn effective_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::data(format!("creating {}: {e}", path.display())))
}

fn load_records(path: &Path) -> Result<Vec<erground::scene::DatasetRecord>, Failure> {
    if !path.is_file() {
        return Err(Failure::data(format!("dataset {} does not exist", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn gen_data(out: &Path, seed: Option<u64>, train_count: usize, test_count: usize, config: Option<&Path>) -> Outcome {
    let mut cfg = match config {
        Some(p) => GeneratorConfig::from_kv(&read_text(p)?)?,
        None => GeneratorConfig::default(),
    };
    cfg.seed = effective_seed(seed, cfg.seed)?;
    cfg.validate()?;
    create_dir(out)?;
    let train_set = generate_dataset(&cfg, 0, train_count)?;
    let test_set = generate_dataset(&cfg, 1, test_count)?;
    write_dataset(&out.join("train.jsonl"), &train_set)?;
    write_dataset(&out.join("test.jsonl"), &test_set)?;
    fs::write(out.join("generator.cfg"), cfg.to_kv())?;
    let summary = format!(
        "[train]\n{}[test]\n{}",
        DatasetStats::from_records(&train_set).summary(),
        DatasetStats::from_records(&test_set).summary()
    );
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Exclusive marker file removed on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::data(format!(
                "{} is locked by another training run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::data(format!("creating {}: {e}", path.display()))),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn train_cmd(data: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Outcome {
    let (text, mut cfg) = match config {
        Some(p) => {
            let text = read_text(p)?;
            let cfg = ExperimentConfig::from_kv(&text)?;
            (text, cfg)
        }
        None => {
            let cfg = ExperimentConfig::default();
            (cfg.to_kv(), cfg)
        }
    };
    cfg.train.seed = effective_seed(seed, cfg.train.seed)?;
    let train_set = load_records(&data.join("train.jsonl"))?;
    if train_set.is_empty() {
        return Err(Failure::data("training set is empty"));
    }
    let test_path = data.join("test.jsonl");
    let test_set = if test_path.is_file() { read_dataset(&test_path)? } else { Vec::new() };

    create_dir(out)?;
    let _lock = Lock::acquire(out)?;
    fs::write(out.join("config.txt"), &text)?;
    let (fit, select) = split_validation(&train_set, cfg.train.val_fraction);
    let mut params = ModelParams::new(cfg.model.clone(), cfg.train.seed)?;
    let checkpoint = out.join("best.ergt");
    let mut log = BufWriter::new(File::create(out.join("metrics.csv"))?);
    let report = train(&mut params, fit, select, &cfg.train, &mut log, Some(&checkpoint))?;
    log.flush()?;

    let mut summary = format!(
        "seed = {}\nsteps = {}\nbest_step = {}\nstopped_early = {}\nselect.overall = {}\nselect.easy = {}\nselect.hard = {}\nselect.view_dep = {}\nselect.view_indep = {}\n",
        cfg.train.seed,
        report.steps,
        report.best_step,
        report.stopped_early,
        report.best.overall.accuracy(),
        report.best.easy.accuracy(),
        report.best.hard.accuracy(),
        report.best.view_dep.accuracy(),
        report.best.view_indep.accuracy(),
    );
    if !test_set.is_empty() {
        let m = evaluate(&params, &test_set, cfg.train.batch_size)?;
        summary.push_str(&format!(
            "test.overall = {}\ntest.easy = {}\ntest.hard = {}\ntest.view_dep = {}\ntest.view_indep = {}\ntest.obj_acc = {}\ntest.lang_acc = {}\n",
            m.overall.accuracy(),
            m.easy.accuracy(),
            m.hard.accuracy(),
            m.view_dep.accuracy(),
            m.view_indep.accuracy(),
            m.objects.accuracy(),
            m.language.accuracy()
        ));
    }
    fs::write(out.join("final_metrics.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, Failure> {
    if !path.is_file() {
        return Err(Failure::data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(ModelParams::load(path)?)
}

fn eval(checkpoint: &Path, data: &Path, batch_size: usize) -> Outcome {
    let params = load_checkpoint(checkpoint)?;
    let records = load_records(data)?;
    let m = evaluate(&params, &records, batch_size)?;
    println!("overall easy hard view_dep view_indep");
    println!(
        "{} {} {} {} {}",
        m.overall.accuracy(),
        m.easy.accuracy(),
        m.hard.accuracy(),
        m.view_dep.accuracy(),
        m.view_indep.accuracy()
    );
    Ok(())
}

fn ablate(data: &Path, out: &Path, seeds: u64, config: Option<&Path>, seed: Option<u64>) -> Outcome {
    if seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let cfg = match config {
        Some(p) => ExperimentConfig::from_kv(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    let first = effective_seed(seed, cfg.train.seed)?;
    let train_set = load_records(&data.join("train.jsonl"))?;
    let test_set = load_records(&data.join("test.jsonl"))?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Failure::data("ablation needs non-empty train and test sets"));
    }
    create_dir(out)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| first + i).collect();
    let rows = run_ablation_suite(&cfg, &train_set, &test_set, &seed_list, &mut |v, s, m| {
        eprintln!("{} seed {s}: overall {:.4}", v.name, m.overall.accuracy());
    })?;
    let csv = ablation_csv(&rows);
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(seed: Option<u64>, corrupt: Option<&str>) -> Outcome {
    let seed = effective_seed(seed, 0)?;
    let fault = match corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::usage(format!("unknown op {name:?}")))?),
        None => None,
    };
    let mut worst: f64 = 0.0;
    for (kind, err) in op_suite(seed, fault, DEFAULT_STEP)? {
        println!("{:<16} {err:.3e}", kind.name());
        worst = worst.max(err);
    }
    let err = erground::model::model_gradcheck(seed, DEFAULT_STEP, fault)?;
    println!("{:<16} {err:.3e}", "model");
    worst = worst.max(err);
    if worst < 1e-4 {
        println!("ok: max relative error {worst:.3e}");
        Ok(())
    } else {
        Err(Failure::numeric(format!("max relative error {worst:.3e} exceeds 1e-4")))
    }
}

/// Writes `rows` of `weights` (row-major, `cols` wide) as CSV.
fn write_map(path: &Path, corner: &str, col_labels: &[String], row_labels: &[String], weights: &[f64], cols: usize, col_keep: &[usize]) -> Outcome {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{corner}")?;
    for l in col_labels {
        write!(w, ",{l}")?;
    }
    writeln!(w)?;
    for (r, label) in row_labels.iter().enumerate() {
        write!(w, "{label}")?;
        for &c in col_keep {
            write!(w, ",{}", weights[r * cols + c])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `rows` of a `[.., cols]` map, in order.
fn select_rows(t: &Tensor, rows: impl Iterator<Item = usize>, cols: usize) -> Vec<f64> {
    rows.flat_map(|r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn dump_attention(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Outcome {
    let params = load_checkpoint(checkpoint)?;
    let records = load_records(data)?;
    let record = records
        .get(index)
        .ok_or_else(|| Failure::data(format!("scene index {index} out of range ({} records)", records.len())))?;
    let batch = SceneBatch::from_records(&[record], &params.config)?;
    let inference = params.infer(&batch, true)?;
    let trace = inference.trace.expect("trace requested");
    create_dir(out)?;

    let n = batch.max_objects;
    let m = batch.max_tokens;
    let objects: Vec<String> = record
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{i}.{}", CLASS_NAMES[o.class_id]))
        .collect();
    let words: Vec<String> = record.tokens.iter().map(|&t| token_str(t).unwrap_or("<unk>").to_string()).collect();
    let (k, w) = (objects.len(), words.len());
    let obj_cols: Vec<usize> = (0..k).collect();
    let word_cols: Vec<usize> = (0..w).collect();

    let mut files = 0;
    for (l, layer) in trace.layers.iter().enumerate() {
        let l = l + 1;
        for (h, map) in layer.ea_lang_to_vis.iter().enumerate() {
            let rows = select_rows(map, 0..k, m);
            write_map(&out.join(format!("layer{l}_ea_lv_head{h}.csv")), "object", &words, &objects, &rows, m, &word_cols)?;
            files += 1;
        }
        for (h, map) in layer.ea_vis_to_lang.iter().enumerate() {
            let rows = select_rows(map, 0..w, n);
            write_map(&out.join(format!("layer{l}_ea_vl_head{h}.csv")), "word", &objects, &words, &rows, n, &obj_cols)?;
            files += 1;
        }
        if let Some(map) = &layer.relation {
            for i in 0..k {
                let rows = select_rows(map, (0..k).map(|j| i * n + j), m);
                write_map(&out.join(format!("layer{l}_ra_query{i}.csv")), "pair", &words, &objects, &rows, m, &word_cols)?;
                files += 1;
            }
        }
    }
    println!("wrote {files} files to {}", out.display());
    Ok(())
}
