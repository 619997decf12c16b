//! The full grounding network: point-set object encoder, word embeddings,
//! position fusion, a stack of contextual blocks and three heads.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::attention::{ercb_forward, AttentionMask, BlockOptions, BlockVariant, ErcbWeights, ForwardTrace, ModuleSwitches};
use crate::config::Kv;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::scene::{DatasetRecord, CLASS_NAMES, PAD, VOCAB};
use crate::tensor::{finite_diff_check_faulty, finite_diff_check_many, read_checkpoint, write_checkpoint, OpKind, ReduceMode, Tape, Tensor, Var};

/// Channels per point: `x y z r g b`.
pub const POINT_CHANNELS: usize = 6;

/// Architecture and loss settings, serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub max_objects: usize,
    pub max_tokens: usize,
    /// Hidden width of the shared per-point MLP.
    pub point_hidden: usize,
    pub lambda_obj: f64,
    pub lambda_lang: f64,
    pub variant: BlockVariant,
    pub switches: ModuleSwitches,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            layers: 4,
            d_ff: 256,
            num_classes: CLASS_NAMES.len(),
            vocab_size: VOCAB.len(),
            max_objects: 10,
            max_tokens: 14,
            point_hidden: 64,
            lambda_obj: 0.5,
            lambda_lang: 0.5,
            variant: BlockVariant::Parallel,
            switches: ModuleSwitches::default(),
            eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err("heads must divide d");
        }
        if self.layers == 0 {
            return err("layers must be at least 1");
        }
        if self.d_ff == 0 || self.point_hidden == 0 {
            return err("hidden widths must be positive");
        }
        if self.num_classes == 0 || self.vocab_size == 0 || self.max_objects == 0 || self.max_tokens == 0 {
            return err("class, vocabulary, object and token counts must be positive");
        }
        if !(self.lambda_obj >= 0.0 && self.lambda_lang >= 0.0) {
            return err("loss weights must be non-negative");
        }
        if !(self.eps >= 0.0) {
            return err("eps must be non-negative");
        }
        Ok(())
    }

    pub fn block_options(&self, record_trace: bool) -> BlockOptions {
        BlockOptions {
            variant: self.variant,
            switches: self.switches,
            eps: self.eps,
            record_trace,
        }
    }

    pub fn to_kv(&self) -> String {
        let s = &self.switches;
        format!(
            "d = {}\nheads = {}\nlayers = {}\nd_ff = {}\nnum_classes = {}\nvocab_size = {}\nmax_objects = {}\nmax_tokens = {}\npoint_hidden = {}\nlambda_obj = {}\nlambda_lang = {}\nblock_variant = {}\nself_attention = {}\nea_lang_to_vis = {}\nea_vis_to_lang = {}\nrelation = {}\neps = {}\n",
            self.d,
            self.heads,
            self.layers,
            self.d_ff,
            self.num_classes,
            self.vocab_size,
            self.max_objects,
            self.max_tokens,
            self.point_hidden,
            self.lambda_obj,
            self.lambda_lang,
            self.variant.name(),
            s.self_attention,
            s.ea_lang_to_vis,
            s.ea_vis_to_lang,
            s.relation,
            self.eps
        )
    }

    /// Applies one recognised key; returns `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = Kv::value(key, value)?,
            "heads" => self.heads = Kv::value(key, value)?,
            "layers" => self.layers = Kv::value(key, value)?,
            "d_ff" => self.d_ff = Kv::value(key, value)?,
            "num_classes" => self.num_classes = Kv::value(key, value)?,
            "vocab_size" => self.vocab_size = Kv::value(key, value)?,
            "max_objects" => self.max_objects = Kv::value(key, value)?,
            "max_tokens" => self.max_tokens = Kv::value(key, value)?,
            "point_hidden" => self.point_hidden = Kv::value(key, value)?,
            "lambda_obj" => self.lambda_obj = Kv::value(key, value)?,
            "lambda_lang" => self.lambda_lang = Kv::value(key, value)?,
            "block_variant" => self.variant = value.parse()?,
            "self_attention" => self.switches.self_attention = Kv::flag(key, value)?,
            "ea_lang_to_vis" => self.switches.ea_lang_to_vis = Kv::flag(key, value)?,
            "ea_vis_to_lang" => self.switches.ea_vis_to_lang = Kv::flag(key, value)?,
            "relation" => self.switches.relation = Kv::flag(key, value)?,
            "eps" => self.eps = Kv::value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in Kv::parse(text)?.entries() {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Weight and bias of a linear layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(format!("{name}.w"), dout, din, rng)?,
            b: store.add_zeros(format!("{name}.b"), dout)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Where each component's tensors live in the store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub point_in: Dense,
    pub point_out: Dense,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub fuse_visual: Dense,
    pub blocks: Vec<ErcbWeights>,
    pub referent_head: Dense,
    pub object_head: Dense,
    pub lang_head: Dense,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = rng::seeded(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let layout = Layout {
            point_in: Dense::init(s, "encoder.point.0", POINT_CHANNELS, c.point_hidden, r)?,
            point_out: Dense::init(s, "encoder.point.1", c.point_hidden, c.d, r)?,
            tokens: s.add_weight("embed.tokens", c.vocab_size, c.d, r)?,
            positions: s.add_weight("embed.positions", c.max_tokens, c.d, r)?,
            fuse_visual: Dense::init(s, "fuse.visual", c.d + 6, c.d, r)?,
            blocks: (0..c.layers)
                .map(|l| ErcbWeights::init(s, &format!("ercb.{l}"), c.d, c.heads, c.d_ff, r))
                .collect::<Result<_>>()?,
            referent_head: Dense::init(s, "head.referent", c.d, 1, r)?,
            object_head: Dense::init(s, "head.object", c.d, c.num_classes, r)?,
            lang_head: Dense::init(s, "head.lang", c.d, c.num_classes, r)?,
        };
        Ok(Self { config, store, layout })
    }

    /// Parameters that the configured switches leave unused.
    pub fn disabled_params(&self) -> Vec<ParamId> {
        self.layout
            .blocks
            .iter()
            .flat_map(|b| b.disabled_params(&self.config.switches))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.store.tensors().iter().all(Tensor::is_finite)
    }

    /// Forward pass over frozen parameters.
    pub fn infer(&self, batch: &SceneBatch, record_trace: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = forward(&mut tape, self, &p, batch, record_trace)?;
        Ok(Inference {
            referent_logits: tape.value(out.referent_logits).clone(),
            object_logits: tape.value(out.object_logits).clone(),
            lang_logits: tape.value(out.lang_logits).clone(),
            trace: out.trace,
        })
    }

    /// Writes the tensor container to `path` and the config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self.store.iter().collect();
        write_checkpoint(BufWriter::new(File::create(path)?), &named)?;
        fs::write(config_sidecar(path), self.config.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_sidecar(path);
        let text = fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", cfg_path.display())))?;
        let config = ModelConfig::from_kv(&text)?;
        let mut params = Self::new(config, 0)?;
        let named = read_checkpoint(BufReader::new(File::open(path)?))?;
        params.store.load(named)?;
        Ok(params)
    }
}

/// `model.ergt` → `model.cfg`.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

/// Padded, fixed-shape batch of scenes.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub size: usize,
    pub max_objects: usize,
    pub max_tokens: usize,
    pub points_per_object: usize,
    /// `[size · max_objects · P, 6]`, xyz relative to the object center.
    pub points: Tensor,
    /// `[size · max_objects, 6]`: center then size.
    pub boxes: Tensor,
    pub object_mask: AttentionMask,
    /// `size · max_tokens` token ids, padded with the pad id.
    pub tokens: Vec<usize>,
    pub word_mask: AttentionMask,
    pub referents: Vec<usize>,
    /// Class label per object slot (0 for padding).
    pub object_labels: Vec<usize>,
    /// Referent class per scene.
    pub lang_labels: Vec<usize>,
}

impl SceneBatch {
    pub fn from_records(records: &[&DatasetRecord], cfg: &ModelConfig) -> Result<Self> {
        let b = records.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let (n, m) = (cfg.max_objects, cfg.max_tokens);
        let p = records[0].objects.first().map_or(0, |o| o.points.len());
        if p == 0 {
            return Err(Error::Data("valid object with an empty point set".into()));
        }
        let mut points = vec![0.0; b * n * p * POINT_CHANNELS];
        let mut boxes = vec![0.0; b * n * 6];
        let mut object_valid = vec![false; b * n];
        let mut tokens = vec![PAD; b * m];
        let mut word_valid = vec![false; b * m];
        let mut referents = Vec::with_capacity(b);
        let mut object_labels = vec![0; b * n];
        let mut lang_labels = Vec::with_capacity(b);
        for (s, r) in records.iter().enumerate() {
            let k = r.objects.len();
            if k == 0 || k > n {
                return Err(Error::Data(format!("scene has {k} objects, model takes 1..={n}")));
            }
            if r.tokens.is_empty() || r.tokens.len() > m {
                return Err(Error::Data(format!("utterance has {} tokens, model takes 1..={m}", r.tokens.len())));
            }
            if r.referent >= k {
                return Err(Error::Data(format!("referent {} outside {k} objects", r.referent)));
            }
            if r.distractors().is_empty() {
                return Err(Error::Data("referent has no same-class distractor".into()));
            }
            for (i, o) in r.objects.iter().enumerate() {
                if o.points.len() != p {
                    return Err(Error::Data(format!("object has {} points, batch uses {p}", o.points.len())));
                }
                if o.class_id >= cfg.num_classes {
                    return Err(Error::Data(format!("class id {} outside {} classes", o.class_id, cfg.num_classes)));
                }
                let slot = s * n + i;
                object_valid[slot] = true;
                object_labels[slot] = o.class_id;
                boxes[slot * 6..slot * 6 + 3].copy_from_slice(&o.center);
                boxes[slot * 6 + 3..slot * 6 + 6].copy_from_slice(&o.size);
                for (j, pt) in o.points.iter().enumerate() {
                    let at = (slot * p + j) * POINT_CHANNELS;
                    for a in 0..3 {
                        points[at + a] = pt[a] - o.center[a];
                        points[at + 3 + a] = pt[3 + a];
                    }
                }
            }
            tokens[s * m..s * m + r.tokens.len()].copy_from_slice(&r.tokens);
            word_valid[s * m..s * m + r.tokens.len()].fill(true);
            referents.push(r.referent);
            lang_labels.push(r.objects[r.referent].class_id);
        }
        Ok(Self {
            size: b,
            max_objects: n,
            max_tokens: m,
            points_per_object: p,
            points: Tensor::new([b * n * p, POINT_CHANNELS], points)?,
            boxes: Tensor::new([b * n, 6], boxes)?,
            object_mask: AttentionMask::new(b, n, object_valid)?,
            tokens,
            word_mask: AttentionMask::new(b, m, word_valid)?,
            referents,
            object_labels,
            lang_labels,
        })
    }

    pub fn object_count(&self, scene: usize) -> usize {
        self.object_mask.count(scene)
    }
}

/// Shared per-point MLP and channel-wise max over each object's points.
/// `points` is `[objects · per_object, 6]`; the result is `[objects, d]`.
pub fn encode_objects(tape: &mut Tape, p: &Binding, layout: &Layout, points: Var, per_object: usize) -> Result<Var> {
    let rows = tape.shape(points)[0];
    if per_object == 0 || rows % per_object != 0 {
        return Err(Error::Data("empty point set for a valid object".into()));
    }
    let h = layout.point_in.apply(tape, p, points)?;
    let h = tape.relu(h);
    let h = layout.point_out.apply(tape, p, h)?;
    let d = tape.shape(h)[1];
    let h = tape.reshape(h, &[rows / per_object, per_object, d])?;
    tape.reduce(h, 1, ReduceMode::Max, None)
}

/// Table lookup, `[ids.len(), d]`.
pub fn embed_tokens(tape: &mut Tape, p: &Binding, layout: &Layout, ids: &[usize]) -> Result<Var> {
    let table = p.var(layout.tokens);
    let vocab = tape.shape(table)[0];
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::IndexOutOfRange {
            what: "token id",
            index: bad,
            bound: vocab,
        });
    }
    tape.gather_rows(table, ids)
}

/// Visual: `[feat, center, size]` projected back to width d. Linguistic:
/// word features plus the learned embedding of each token index, where
/// `words` holds consecutive sequences of `seq_len` tokens.
pub fn fuse_positions(tape: &mut Tape, p: &Binding, layout: &Layout, objects: Var, boxes: Var, words: Var, seq_len: usize) -> Result<(Var, Var)> {
    let cat = tape.concat(&[objects, boxes])?;
    let visual = layout.fuse_visual.apply(tape, p, cat)?;
    let rows = tape.shape(words)[0];
    let index: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
    let pos = tape.gather_rows(p.var(layout.positions), &index)?;
    let linguistic = tape.add(words, pos)?;
    Ok((visual, linguistic))
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[batch, n]`, −∞ at padded slots.
    pub referent_logits: Var,
    /// `[batch · n, K]`.
    pub object_logits: Var,
    /// `[batch, K]`.
    pub lang_logits: Var,
    pub trace: Option<ForwardTrace>,
}

/// Values of one frozen forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub referent_logits: Tensor,
    pub object_logits: Tensor,
    pub lang_logits: Tensor,
    pub trace: Option<ForwardTrace>,
}

pub fn forward(tape: &mut Tape, params: &ModelParams, p: &Binding, batch: &SceneBatch, record_trace: bool) -> Result<ModelOutput> {
    let cfg = &params.config;
    let layout = &params.layout;
    let (b, n, m, d) = (batch.size, batch.max_objects, batch.max_tokens, cfg.d);
    if n != cfg.max_objects || m != cfg.max_tokens {
        return Err(Error::Data(format!(
            "batch padded to {n} objects and {m} tokens, model expects {} and {}",
            cfg.max_objects, cfg.max_tokens
        )));
    }
    let points = tape.constant(batch.points.clone());
    let boxes = tape.constant(batch.boxes.clone());
    let obj = encode_objects(tape, p, layout, points, batch.points_per_object)?;
    let words = embed_tokens(tape, p, layout, &batch.tokens)?;
    let (vis, lang) = fuse_positions(tape, p, layout, obj, boxes, words, m)?;
    let mut vis = tape.reshape(vis, &[b, n, d])?;
    let mut lang = tape.reshape(lang, &[b, m, d])?;

    let opts = cfg.block_options(record_trace);
    let mut trace = record_trace.then(ForwardTrace::default);
    for block in &layout.blocks {
        let out = ercb_forward(tape, p, block, vis, lang, &batch.object_mask, &batch.word_mask, &opts)?;
        vis = out.visual;
        lang = out.linguistic;
        if let (Some(t), Some(l)) = (trace.as_mut(), out.trace) {
            t.layers.push(l);
        }
    }

    let flat = tape.reshape(vis, &[b * n, d])?;
    let scores = layout.referent_head.apply(tape, p, flat)?;
    let scores = tape.reshape(scores, &[b, n])?;
    let padded: Vec<bool> = batch.object_mask.flags().iter().map(|v| !v).collect();
    let referent_logits = tape.masked_fill(scores, &padded, f64::NEG_INFINITY)?;
    let object_logits = layout.object_head.apply(tape, p, flat)?;
    let pooled = tape.reduce(lang, 1, ReduceMode::Mean, Some(batch.word_mask.flags()))?;
    let lang_logits = layout.lang_head.apply(tape, p, pooled)?;
    Ok(ModelOutput {
        referent_logits,
        object_logits,
        lang_logits,
        trace,
    })
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub main: Var,
    pub object: Var,
    pub language: Var,
    pub total: Var,
}

/// Referent cross-entropy over valid objects, plus weighted object-class
/// cross-entropy over valid objects and utterance-class cross-entropy.
pub fn total_loss(tape: &mut Tape, out: &ModelOutput, batch: &SceneBatch, lambda_obj: f64, lambda_lang: f64) -> Result<LossTerms> {
    let main = tape.cross_entropy(out.referent_logits, &batch.referents, None)?;
    let object = tape.cross_entropy(out.object_logits, &batch.object_labels, Some(batch.object_mask.flags()))?;
    let language = tape.cross_entropy(out.lang_logits, &batch.lang_labels, None)?;
    let wo = tape.scale(object, lambda_obj);
    let wl = tape.scale(language, lambda_lang);
    let total = tape.add(main, wo)?;
    let total = tape.add(total, wl)?;
    Ok(LossTerms {
        main,
        object,
        language,
        total,
    })
}

/// Index of the largest logit among valid slots, lowest index on ties.
pub fn argmax_valid(logits: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in logits.iter().zip(valid).enumerate() {
        if ok && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best
}

/// Small configuration used by the whole-model gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        d_ff: 16,
        num_classes: 3,
        max_objects: 2,
        max_tokens: 3,
        point_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Two objects of one class, three words, four points each.
pub fn gradcheck_batch(seed: u64) -> Result<SceneBatch> {
    use crate::scene::{Difficulty, RelationType, SyntheticObject, ViewDependency};
    let mut r = rng::seeded(seed);
    let mut object = |x: f64| SyntheticObject {
        class_id: 1,
        center: [x, 1.0, 0.4],
        size: [0.5, 0.4, 0.8],
        color: [0.3, 0.6, 0.2],
        points: (0..4)
            .map(|_| {
                let mut pt = [0.0; 6];
                for v in &mut pt {
                    *v = rng::uniform(&mut r, 0.0, 1.0);
                }
                pt
            })
            .collect(),
    };
    let objects = vec![object(0.5), object(2.0)];
    let record = DatasetRecord {
        objects,
        tokens: vec![1, 5, 2],
        relation_type: RelationType::HorizontalProximity,
        referent: 1,
        difficulty: Difficulty::Easy,
        view_dep: ViewDependency::Independent,
    };
    SceneBatch::from_records(&[&record], &gradcheck_config())
}

/// Max relative error of the whole-model gradient against central
/// differences, over every parameter of a randomly perturbed small model.
/// `fault` corrupts one op's gradient rule to exercise the harness.
pub fn model_gradcheck(seed: u64, h: f64, fault: Option<OpKind>) -> Result<f64> {
    let mut params = ModelParams::new(gradcheck_config(), seed)?;
    let mut r = rng::seeded(rng::derive_seed(seed, 1));
    // Random biases and norm gains so no term is trivially zero.
    for t in params.store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng::normal(&mut r);
        }
    }
    let batch = gradcheck_batch(seed)?;
    let inputs: Vec<Tensor> = params.store.tensors().to_vec();
    let params = &params;
    let loss = |tape: &mut Tape, vars: &[Var]| {
        let p = Binding::from_vars(vars.to_vec());
        let out = forward(tape, params, &p, &batch, false)?;
        let c = &params.config;
        Ok(total_loss(tape, &out, &batch, c.lambda_obj, c.lambda_lang)?.total)
    };
    match fault {
        None => finite_diff_check_many(loss, &inputs, h),
        Some(kind) => finite_diff_check_faulty(kind, loss, &inputs, h),
    }
}
