//! Optimization, evaluation and the ablation protocol.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::attention::{BlockVariant, ModuleSwitches};
use crate::config::Kv;
use crate::error::{Error, Result};
use crate::model::{argmax_valid, forward, total_loss, ModelConfig, ModelParams, SceneBatch};
use crate::rng::{derive_seed, seeded};
use crate::scene::{DatasetRecord, Difficulty, RelationType, ViewDependency};
use crate::tensor::{Tape, Tensor};

/// Bias-corrected Adam moments for a list of tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam update of `params` from `grads` (same order and lengths).
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![state.m.len()],
            right: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != p.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Accuracy over one subset, kept with its size so overall figures can be
/// rebuilt exactly from the parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Split {
    pub correct: usize,
    pub total: usize,
}

impl Split {
    /// Fraction correct; 0 for an empty subset.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
    }
}

/// Referring accuracies per split plus auxiliary head accuracies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub overall: Split,
    pub easy: Split,
    pub hard: Split,
    pub view_dep: Split,
    pub view_indep: Split,
    /// Indexed like [`RelationType::ALL`].
    pub per_relation: [Split; 5],
    pub objects: Split,
    pub language: Split,
}

impl Metrics {
    /// Counts one referring prediction in every split the record belongs to.
    pub fn add_referral(&mut self, r: &DatasetRecord, hit: bool) {
        self.overall.add(hit);
        match r.difficulty {
            Difficulty::Easy => self.easy.add(hit),
            Difficulty::Hard => self.hard.add(hit),
        }
        match r.view_dep {
            ViewDependency::Dependent => self.view_dep.add(hit),
            ViewDependency::Independent => self.view_indep.add(hit),
        }
        let rel = RelationType::ALL.iter().position(|&t| t == r.relation_type).expect("known relation");
        self.per_relation[rel].add(hit);
    }

    /// Accuracy on between and allocentric records together.
    pub fn relational(&self) -> Split {
        let b = self.per_relation[2];
        let a = self.per_relation[3];
        Split {
            correct: b.correct + a.correct,
            total: b.total + a.total,
        }
    }

    /// `overall easy hard view_dep view_indep` as percentages.
    pub fn table_row(&self) -> String {
        format!(
            "{:.2} {:.2} {:.2} {:.2} {:.2}",
            100.0 * self.overall.accuracy(),
            100.0 * self.easy.accuracy(),
            100.0 * self.hard.accuracy(),
            100.0 * self.view_dep.accuracy(),
            100.0 * self.view_indep.accuracy()
        )
    }
}

/// Frozen-parameter evaluation in fixed-size batches.
pub fn evaluate(params: &ModelParams, records: &[DatasetRecord], batch_size: usize) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let cfg = &params.config;
    let mut m = Metrics::default();
    let mut loss_sum = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let batch = SceneBatch::from_records(&refs, cfg)?;
        let mut tape = Tape::new();
        let p = params.store.bind_frozen(&mut tape);
        let out = forward(&mut tape, params, &p, &batch, false)?;
        let loss = total_loss(&mut tape, &out, &batch, cfg.lambda_obj, cfg.lambda_lang)?;
        loss_sum += tape.value(loss.total).item() * chunk.len() as f64;
        let n = batch.max_objects;
        let k = cfg.num_classes;
        let referent = tape.value(out.referent_logits).data();
        let objects = tape.value(out.object_logits).data();
        let lang = tape.value(out.lang_logits).data();
        let mask = batch.object_mask.flags();
        let all = vec![true; k];
        for (s, r) in chunk.iter().enumerate() {
            let pred = argmax_valid(&referent[s * n..(s + 1) * n], &mask[s * n..(s + 1) * n]);
            m.add_referral(r, pred == Some(r.referent));
            for (i, o) in r.objects.iter().enumerate() {
                let row = (s * n + i) * k;
                m.objects.add(argmax_valid(&objects[row..row + k], &all) == Some(o.class_id));
            }
            m.language.add(argmax_valid(&lang[s * k..(s + 1) * k], &all) == Some(batch.lang_labels[s]));
        }
    }
    m.loss = loss_sum / records.len() as f64;
    Ok(m)
}

/// Optimization settings, serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps (0 = none).
    pub max_steps: usize,
    /// Optimizer steps between evaluations.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Share of the training file held out for model selection; 0 selects
    /// on the training records themselves.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            lr: 5e-4,
            max_epochs: 50,
            max_steps: 0,
            eval_interval: 100,
            patience: 10,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "seed = {}\nbatch_size = {}\nlr = {}\nmax_epochs = {}\nmax_steps = {}\neval_interval = {}\npatience = {}\nval_fraction = {}\n",
            self.seed, self.batch_size, self.lr, self.max_epochs, self.max_steps, self.eval_interval, self.patience, self.val_fraction
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = Kv::value(key, value)?,
            "batch_size" => self.batch_size = Kv::value(key, value)?,
            "lr" => self.lr = Kv::value(key, value)?,
            "max_epochs" => self.max_epochs = Kv::value(key, value)?,
            "max_steps" => self.max_steps = Kv::value(key, value)?,
            "eval_interval" => self.eval_interval = Kv::value(key, value)?,
            "patience" => self.patience = Kv::value(key, value)?,
            "val_fraction" => self.val_fraction = Kv::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model and optimization settings read from one `key = value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in Kv::parse(text)?.entries() {
            if !c.model.set(k, v)? && !c.train.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}", self.model.to_kv(), self.train.to_kv())
    }
}

pub const METRICS_HEADER: &str = "step,loss,overall,easy,hard,view_dep,view_indep,obj_acc,lang_acc";

fn metrics_row(step: usize, train_loss: f64, m: &Metrics) -> String {
    format!(
        "{step},{train_loss},{},{},{},{},{},{},{}",
        m.overall.accuracy(),
        m.easy.accuracy(),
        m.hard.accuracy(),
        m.view_dep.accuracy(),
        m.view_indep.accuracy(),
        m.objects.accuracy(),
        m.language.accuracy()
    )
}

/// Held-out tail of the training records: `(fit, select)`. With a zero
/// fraction both are the full set.
pub fn split_validation(records: &[DatasetRecord], fraction: f64) -> (&[DatasetRecord], &[DatasetRecord]) {
    let held = (records.len() as f64 * fraction).ceil() as usize;
    if held == 0 || held >= records.len() {
        return (records, records);
    }
    records.split_at(records.len() - held)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: usize,
    pub best: Metrics,
    pub stopped_early: bool,
}

/// Trains `params` in place and leaves them at the best evaluation.
///
/// Every `eval_interval` steps (and after the last step) the selection set
/// is evaluated and a CSV row is written to `log`; the mean training loss
/// since the previous row goes in the `loss` column. On improvement of
/// overall accuracy the parameters are kept and, if given, saved to
/// `checkpoint`.
pub fn train(
    params: &mut ModelParams,
    train_set: &[DatasetRecord],
    select_set: &[DatasetRecord],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = seeded(derive_seed(cfg.seed, 0x7261_696e));
    let mut adam = AdamState::new(params.store.tensors(), cfg.lr);
    writeln!(log, "{METRICS_HEADER}")?;

    let mut best: Option<(Metrics, usize, Vec<Tensor>)> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    let mut evaluate_now = |params: &mut ModelParams, step: usize, loss_acc: f64, loss_count: usize, best: &mut Option<(Metrics, usize, Vec<Tensor>)>, stale: &mut usize| -> Result<bool> {
        let m = evaluate(params, select_set, cfg.batch_size)?;
        let train_loss = if loss_count == 0 { 0.0 } else { loss_acc / loss_count as f64 };
        writeln!(log, "{}", metrics_row(step, train_loss, &m))?;
        log.flush()?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| m.overall.accuracy() > b.overall.accuracy());
        if improved {
            if let Some(path) = checkpoint {
                params.save(path)?;
            }
            *best = Some((m, step, params.store.tensors().to_vec()));
            *stale = 0;
        } else {
            *stale += 1;
        }
        Ok(*stale >= cfg.patience && cfg.patience > 0)
    };

    'epochs: for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&DatasetRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = SceneBatch::from_records(&refs, &params.config)?;
            let mut tape = Tape::new();
            let p = params.store.bind(&mut tape);
            let c = &params.config;
            let at_step = |e: Error| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at step {}", step + 1)),
                e => e,
            };
            let out = forward(&mut tape, params, &p, &batch, false).map_err(at_step)?;
            let loss = total_loss(&mut tape, &out, &batch, c.lambda_obj, c.lambda_lang).map_err(at_step)?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss is {value} at step {}", step + 1)));
            }
            tape.backward(loss.total)?;
            let grads: Vec<Vec<f64>> = p
                .vars()
                .iter()
                .zip(params.store.tensors())
                .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
            adam_step(&mut adam, params.store.tensors_mut(), &grads)?;
            step += 1;
            loss_acc += value;
            loss_count += 1;
            if step % cfg.eval_interval == 0 {
                let stop = evaluate_now(params, step, loss_acc, loss_count, &mut best, &mut stale)?;
                loss_acc = 0.0;
                loss_count = 0;
                if stop {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }
    if loss_count > 0 || best.is_none() {
        evaluate_now(params, step, loss_acc, loss_count, &mut best, &mut stale)?;
    }
    let (best, best_step, tensors) = best.expect("at least one evaluation ran");
    for (dst, src) in params.store.tensors_mut().iter_mut().zip(tensors) {
        *dst = src;
    }
    Ok(TrainReport {
        steps: step,
        best_step,
        best,
        stopped_early,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub variant: BlockVariant,
    pub layers: usize,
    pub switches: ModuleSwitches,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            layers: self.layers,
            switches: self.switches,
            ..base.clone()
        }
    }
}

/// Full model, five single changes, and depths 1 through 6.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let on = ModuleSwitches::default();
    let v = |name: &str, variant, layers, switches| Variant {
        name: name.to_string(),
        variant,
        layers,
        switches,
    };
    let l = base.layers;
    let mut out = vec![
        v("full", BlockVariant::Parallel, l, on),
        v("w/o SA", BlockVariant::Parallel, l, ModuleSwitches { self_attention: false, ..on }),
        v("w/o EA (V->L)", BlockVariant::Parallel, l, ModuleSwitches { ea_vis_to_lang: false, ..on }),
        v("w/o EA (L->V)", BlockVariant::Parallel, l, ModuleSwitches { ea_lang_to_vis: false, ..on }),
        v("w/o RA", BlockVariant::Parallel, l, ModuleSwitches { relation: false, ..on }),
        v("EA + RA (stacked)", BlockVariant::Stacked, l, on),
    ];
    out.extend((1..=6).map(|d| v(&format!("depth {d}"), BlockVariant::Parallel, d, on)));
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test metrics per seed.
    pub runs: Vec<Metrics>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn stat(&self, f: impl Fn(&Metrics) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

pub const ABLATION_HEADER: &str = "variant,block_variant,layers,self_attention,ea_vis_to_lang,ea_lang_to_vis,relation,seeds,overall_mean,overall_std,easy_mean,easy_std,hard_mean,hard_std,view_dep_mean,view_dep_std,view_indep_mean,view_indep_std,relational_mean,relational_std";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let v = &r.variant;
        let s = v.switches;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            v.name,
            v.variant.name(),
            v.layers,
            s.self_attention,
            s.ea_vis_to_lang,
            s.ea_lang_to_vis,
            s.relation,
            r.runs.len()
        );
        let stats: [fn(&Metrics) -> f64; 6] = [
            |m| m.overall.accuracy(),
            |m| m.easy.accuracy(),
            |m| m.hard.accuracy(),
            |m| m.view_dep.accuracy(),
            |m| m.view_indep.accuracy(),
            |m| m.relational().accuracy(),
        ];
        for f in stats {
            let (mean, std) = r.stat(f);
            let _ = write!(out, ",{mean},{std}");
        }
        out.push('\n');
    }
    out
}

/// Trains every variant once per seed with otherwise identical settings and
/// evaluates on `test`. Variants whose configuration coincides (the depth
/// equal to the base depth and the full model) share their runs.
/// `progress` receives each finished `(variant, seed, metrics)`.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    train_set: &[DatasetRecord],
    test_set: &[DatasetRecord],
    seeds: &[u64],
    progress: &mut dyn FnMut(&Variant, u64, &Metrics),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let (fit, select) = split_validation(train_set, base.train.val_fraction);
    let mut done: Vec<(ModelConfig, Vec<Metrics>)> = Vec::new();
    let mut rows = Vec::new();
    for variant in ablation_variants(&base.model) {
        let model_cfg = variant.apply(&base.model);
        if let Some((_, runs)) = done.iter().find(|(c, _)| *c == model_cfg) {
            rows.push(AblationRow {
                variant,
                runs: runs.clone(),
            });
            continue;
        }
        let mut runs = Vec::new();
        for &seed in seeds {
            let train_cfg = TrainConfig {
                seed,
                ..base.train.clone()
            };
            let mut params = ModelParams::new(model_cfg.clone(), seed)?;
            train(&mut params, fit, select, &train_cfg, &mut std::io::sink(), None)?;
            let m = evaluate(&params, test_set, train_cfg.batch_size)?;
            progress(&variant, seed, &m);
            runs.push(m);
        }
        done.push((model_cfg, runs.clone()));
        rows.push(AblationRow { variant, runs });
    }
    Ok(rows)
}
