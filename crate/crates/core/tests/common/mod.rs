//! Straight-line reference implementations over nested `Vec`s, written
//! without the tape so they can serve as oracles for it.

#![allow(dead_code)]

use erground::attention::{BlockVariant, ErcbWeights, FeedForward, ModuleSwitches, MultiHeadWeights, NormParams, RelationWeights};
use erground::model::{Dense, ModelParams};
use erground::params::{ParamId, ParamStore};
use erground::scene::{DatasetRecord, PAD};
use erground::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Rows `[b·rows, (b+1)·rows)` of a flattened tensor.
pub fn scene_rows(t: &Tensor, b: usize, rows: usize) -> Mat {
    to_mat(t)[b * rows..(b + 1) * rows].to_vec()
}

pub fn from_mats(ms: &[Mat]) -> Tensor {
    let rows = ms[0].len();
    let cols = ms[0][0].len();
    let data: Vec<f64> = ms.iter().flat_map(|m| m.iter().flatten().copied()).collect();
    Tensor::new([ms.len(), rows, cols], data).unwrap()
}

fn weight(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

/// `x · wᵀ + b` with `w` stored `[out, in]`.
pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .enumerate()
                .map(|(o, wr)| {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for (a, c) in row.iter().zip(wr) {
                        acc += a * c;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn dense(store: &ParamStore, d: &Dense, x: &Mat) -> Mat {
    linear(x, &weight(store, d.w), Some(&vector(store, d.b)))
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn concat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

/// Softmax over the valid entries; invalid entries get exactly zero.
pub fn masked_softmax(row: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().zip(valid).map(|(v, &ok)| if ok { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Returns `(output, weights)`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, valid: &[bool]) -> (Mat, Mat) {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k.iter().map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()).collect();
        let w = masked_softmax(&scores, valid);
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        out.push(o);
        weights.push(w);
    }
    (out, weights)
}

pub fn multi_head(store: &ParamStore, w: &MultiHeadWeights, q: &Mat, k: &Mat, v: &Mat, valid: &[bool]) -> (Mat, Vec<Mat>) {
    let mut joined: Mat = vec![Vec::new(); q.len()];
    let mut maps = Vec::new();
    for h in 0..w.heads {
        let qh = linear(q, &weight(store, w.wq[h]), None);
        let kh = linear(k, &weight(store, w.wk[h]), None);
        let vh = linear(v, &weight(store, w.wv[h]), None);
        let (o, a) = attention(&qh, &kh, &vh, valid);
        for (row, part) in joined.iter_mut().zip(o) {
            row.extend(part);
        }
        maps.push(a);
    }
    (linear(&joined, &weight(store, w.wout), None), maps)
}

pub fn layer_norm(store: &ParamStore, n: &NormParams, x: &Mat, eps: f64) -> Mat {
    let g = vector(store, n.gamma);
    let b = vector(store, n.beta);
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter().enumerate().map(|(c, v)| (v - mean) / (var + eps).sqrt() * g[c] + b[c]).collect()
        })
        .collect()
}

pub fn feed_forward(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let h = relu(&linear(x, &weight(store, f.w1), Some(&vector(store, f.b1))));
    linear(&h, &weight(store, f.w2), Some(&vector(store, f.b2)))
}

/// `relu(W(a − b) + bias)` for one pair.
pub fn relation_pair(store: &ParamStore, w: &RelationWeights, a: &[f64], b: &[f64]) -> Vec<f64> {
    let diff: Mat = vec![a.iter().zip(b).map(|(x, y)| x - y).collect()];
    relu(&linear(&diff, &weight(store, w.mlp.w), Some(&vector(store, w.mlp.b))))
        .pop()
        .unwrap()
}

/// Returns the per-object aggregate and the `[n·n, m]` word weights.
pub fn relation_attention(store: &ParamStore, w: &RelationWeights, f: &Mat, l: &Mat, objects: &[bool], words: &[bool]) -> (Mat, Mat) {
    let n = f.len();
    let keys = linear(l, &weight(store, w.wk), None);
    let values = linear(l, &weight(store, w.wv), None);
    let wq = weight(store, w.wq);
    let mut out = Vec::new();
    let mut maps = Vec::new();
    for i in 0..n {
        let pairs: Mat = (0..n).map(|j| relation_pair(store, w, &f[i], &f[j])).collect();
        let q = linear(&pairs, &wq, None);
        let (rows, a) = attention(&q, &keys, &values, words);
        maps.extend(a);
        let mut agg = vec![f64::NEG_INFINITY; f[0].len()];
        for (j, row) in rows.iter().enumerate() {
            if objects[j] {
                for (g, v) in agg.iter_mut().zip(row) {
                    *g = g.max(*v);
                }
            }
        }
        out.push(agg);
    }
    (out, maps)
}

pub struct BlockRef {
    pub visual: Mat,
    pub linguistic: Mat,
    pub ea_lang_to_vis: Vec<Mat>,
    pub ea_vis_to_lang: Vec<Mat>,
    pub relation: Option<Mat>,
}

#[allow(clippy::too_many_arguments)]
pub fn block(
    store: &ParamStore,
    w: &ErcbWeights,
    fv: &Mat,
    fl: &Mat,
    objects: &[bool],
    words: &[bool],
    variant: BlockVariant,
    sw: ModuleSwitches,
    eps: f64,
) -> BlockRef {
    let (f, lang) = if sw.self_attention {
        let (sv, _) = multi_head(store, &w.sa_vis, fv, fv, fv, objects);
        let (sl, _) = multi_head(store, &w.sa_lang, fl, fl, fl, words);
        (layer_norm(store, &w.sa_vis_norm, &add(&sv, fv), eps), layer_norm(store, &w.sa_lang_norm, &add(&sl, fl), eps))
    } else {
        (fv.clone(), fl.clone())
    };
    let mut ea_lang_to_vis = Vec::new();
    let g_e = if sw.ea_lang_to_vis {
        let (e, maps) = multi_head(store, &w.ea_lv, &f, &lang, &lang, words);
        ea_lang_to_vis = maps;
        layer_norm(store, &w.ea_lv_norm, &add(&e, &f), eps)
    } else {
        f.clone()
    };
    let mut relation = None;
    let g_r = if sw.relation {
        let input = match variant {
            BlockVariant::Parallel => &f,
            BlockVariant::Stacked => &g_e,
        };
        let (r, maps) = relation_attention(store, &w.ra, input, &lang, objects, words);
        relation = Some(maps);
        layer_norm(store, &w.ra_norm, &add(&r, &f), eps)
    } else {
        f.clone()
    };
    let joint = feed_forward(store, &w.fuse_ffn, &concat(&g_e, &g_r));
    let visual = layer_norm(store, &w.out_norm, &add(&joint, &g_e), eps);

    let mut ea_vis_to_lang = Vec::new();
    let l = if sw.ea_vis_to_lang {
        let (e, maps) = multi_head(store, &w.ea_vl, &lang, &f, &f, objects);
        ea_vis_to_lang = maps;
        layer_norm(store, &w.ea_vl_norm, &add(&e, &lang), eps)
    } else {
        lang
    };
    let h = feed_forward(store, &w.lang_ffn, &l);
    let linguistic = layer_norm(store, &w.lang_ffn_norm, &add(&h, &l), eps);
    BlockRef {
        visual,
        linguistic,
        ea_lang_to_vis,
        ea_vis_to_lang,
        relation,
    }
}

pub struct ModelRef {
    /// One entry per padded object slot, −∞ at padding.
    pub referent: Vec<f64>,
    pub objects: Mat,
    pub language: Vec<f64>,
}

/// Whole-model forward of one record, built from the record itself.
pub fn model(params: &ModelParams, record: &DatasetRecord) -> ModelRef {
    let cfg = &params.config;
    let s = &params.store;
    let l = &params.layout;
    let (n, m) = (cfg.max_objects, cfg.max_tokens);
    let objects: Vec<bool> = (0..n).map(|i| i < record.objects.len()).collect();
    let words: Vec<bool> = (0..m).map(|i| i < record.tokens.len()).collect();
    let per_object = record.objects[0].points.len();

    let mut visual = Vec::new();
    for i in 0..n {
        let (pts, bbox): (Mat, Vec<f64>) = match record.objects.get(i) {
            Some(o) => (
                o.points
                    .iter()
                    .map(|p| vec![p[0] - o.center[0], p[1] - o.center[1], p[2] - o.center[2], p[3], p[4], p[5]])
                    .collect(),
                o.center.iter().chain(&o.size).copied().collect(),
            ),
            None => (vec![vec![0.0; 6]; per_object], vec![0.0; 6]),
        };
        let h = dense(s, &l.point_out, &relu(&dense(s, &l.point_in, &pts)));
        let mut feat = vec![f64::NEG_INFINITY; cfg.d];
        for row in &h {
            for (f, v) in feat.iter_mut().zip(row) {
                *f = f.max(*v);
            }
        }
        visual.push(feat.into_iter().chain(bbox).collect());
    }
    let mut fv = dense(s, &l.fuse_visual, &visual);

    let table = to_mat(s.get(l.tokens));
    let positions = to_mat(s.get(l.positions));
    let mut fl: Mat = (0..m)
        .map(|t| {
            let id = record.tokens.get(t).copied().unwrap_or(PAD);
            table[id].iter().zip(&positions[t]).map(|(a, b)| a + b).collect()
        })
        .collect();

    for w in &l.blocks {
        let out = block(s, w, &fv, &fl, &objects, &words, cfg.variant, cfg.switches, cfg.eps);
        fv = out.visual;
        fl = out.linguistic;
    }
    let scores = dense(s, &l.referent_head, &fv);
    let referent = (0..n).map(|i| if objects[i] { scores[i][0] } else { f64::NEG_INFINITY }).collect();
    let object_logits = dense(s, &l.object_head, &fv);
    let count = record.tokens.len() as f64;
    let pooled: Vec<f64> = (0..cfg.d).map(|c| (0..record.tokens.len()).map(|t| fl[t][c]).sum::<f64>() / count).collect();
    let language = dense(s, &l.lang_head, &vec![pooled]).pop().unwrap();
    ModelRef {
        referent,
        objects: object_logits,
        language,
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| if p == q { 0.0 } else { (p - q).abs() })
        })
        .fold(0.0, f64::max)
}

/// Cross-entropy of one logit row against `target`.
pub fn nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}
