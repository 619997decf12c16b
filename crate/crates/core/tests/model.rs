mod common;

use erground::attention::{BlockVariant, ModuleSwitches};
use erground::model::*;
use erground::rng;
use erground::scene::{generate_dataset, DatasetRecord, GeneratorConfig};
use erground::tensor::{read_checkpoint, OpKind, DEFAULT_STEP};
use erground::Tape;

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        d_ff: 16,
        point_hidden: 8,
        ..ModelConfig::default()
    }
}

fn perturbed(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::new(cfg, seed).unwrap();
    let mut r = rng::seeded(seed + 1);
    for t in params.store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    params
}

fn records(count: usize, stream: u64) -> Vec<DatasetRecord> {
    let gen = GeneratorConfig {
        points_per_object: 6,
        ..GeneratorConfig::default()
    };
    generate_dataset(&gen, stream, count).unwrap()
}

fn check_against_reference(cfg: ModelConfig) {
    let params = perturbed(cfg, 3);
    let data = records(3, 4);
    let refs: Vec<&DatasetRecord> = data.iter().collect();
    let batch = SceneBatch::from_records(&refs, &params.config).unwrap();
    let out = params.infer(&batch, false).unwrap();
    let n = params.config.max_objects;
    let k = params.config.num_classes;
    for (s, r) in data.iter().enumerate() {
        let want = common::model(&params, r);
        let got = &out.referent_logits.data()[s * n..(s + 1) * n];
        for (g, w) in got.iter().zip(&want.referent) {
            assert!(g == w || (g - w).abs() < 1e-9, "referent {g} vs {w}");
        }
        let objects = common::scene_rows(&out.object_logits, s, n);
        assert!(common::max_abs_diff(&objects, &want.objects) < 1e-9);
        let lang = &out.lang_logits.data()[s * k..(s + 1) * k];
        assert!(common::max_abs_diff(&vec![lang.to_vec()], &vec![want.language]) < 1e-9);
    }
}

#[test]
fn forward_matches_reference_model() {
    check_against_reference(small_config());
}

#[test]
fn stacked_and_ablated_forward_match_reference_model() {
    check_against_reference(ModelConfig {
        variant: BlockVariant::Stacked,
        ..small_config()
    });
    check_against_reference(ModelConfig {
        switches: ModuleSwitches {
            self_attention: false,
            relation: false,
            ..ModuleSwitches::default()
        },
        layers: 1,
        ..small_config()
    });
}

#[test]
fn loss_is_the_weighted_sum_of_three_cross_entropies() {
    let params = perturbed(small_config(), 5);
    let data = records(4, 6);
    let refs: Vec<&DatasetRecord> = data.iter().collect();
    let batch = SceneBatch::from_records(&refs, &params.config).unwrap();
    let mut tape = Tape::new();
    let p = params.store.bind_frozen(&mut tape);
    let out = forward(&mut tape, &params, &p, &batch, false).unwrap();
    let terms = total_loss(&mut tape, &out, &batch, 0.5, 0.5).unwrap();

    let n = params.config.max_objects;
    let rl = common::to_mat(tape.value(out.referent_logits));
    let ol = common::to_mat(tape.value(out.object_logits));
    let ll = common::to_mat(tape.value(out.lang_logits));
    let main = data.iter().enumerate().map(|(s, r)| common::nll(&rl[s], r.referent)).sum::<f64>() / 4.0;
    let mut obj = 0.0;
    let mut count = 0;
    for (s, r) in data.iter().enumerate() {
        for (i, o) in r.objects.iter().enumerate() {
            obj += common::nll(&ol[s * n + i], o.class_id);
            count += 1;
        }
    }
    let obj = obj / count as f64;
    let lang = data.iter().enumerate().map(|(s, r)| common::nll(&ll[s], r.objects[r.referent].class_id)).sum::<f64>() / 4.0;
    let total = main + 0.5 * obj + 0.5 * lang;
    assert!((tape.value(terms.main).item() - main).abs() < 1e-12);
    assert!((tape.value(terms.object).item() - obj).abs() < 1e-12);
    assert!((tape.value(terms.language).item() - lang).abs() < 1e-12);
    assert!((tape.value(terms.total).item() - total).abs() < 1e-12);
}

#[test]
fn referent_logits_follow_object_order() {
    let params = perturbed(small_config(), 7);
    let data = records(5, 8);
    for r in &data {
        let k = r.objects.len();
        let perm: Vec<usize> = (0..k).rev().collect();
        let mut shuffled = r.clone();
        shuffled.objects = perm.iter().map(|&i| r.objects[i].clone()).collect();
        shuffled.referent = perm.iter().position(|&i| i == r.referent).unwrap();
        let a = params.infer(&SceneBatch::from_records(&[r], &params.config).unwrap(), false).unwrap();
        let b = params.infer(&SceneBatch::from_records(&[&shuffled], &params.config).unwrap(), false).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let (x, y) = (b.referent_logits.data()[new], a.referent_logits.data()[old]);
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn whole_model_gradient_check_passes() {
    let err = model_gradcheck(0, DEFAULT_STEP, None).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn corrupted_gradient_rule_is_detected() {
    let err = model_gradcheck(0, DEFAULT_STEP, Some(OpKind::Linear)).unwrap();
    assert!(err > 1e-2, "corruption went unnoticed: {err}");
}

#[test]
fn disabled_modules_receive_no_gradient() {
    let cfg = ModelConfig {
        switches: ModuleSwitches {
            ea_vis_to_lang: false,
            relation: false,
            ..ModuleSwitches::default()
        },
        ..small_config()
    };
    let params = perturbed(cfg, 9);
    let data = records(2, 10);
    let refs: Vec<&DatasetRecord> = data.iter().collect();
    let batch = SceneBatch::from_records(&refs, &params.config).unwrap();
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let out = forward(&mut tape, &params, &p, &batch, false).unwrap();
    let loss = total_loss(&mut tape, &out, &batch, 0.5, 0.5).unwrap();
    tape.backward(loss.total).unwrap();
    let disabled = params.disabled_params();
    assert!(!disabled.is_empty());
    for id in disabled {
        assert!(tape.grad(p.var(id)).is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", params.store.name(id));
    }
}

#[test]
fn trace_has_one_layer_per_block_with_normalized_maps() {
    let params = perturbed(small_config(), 11);
    let data = records(1, 12);
    let batch = SceneBatch::from_records(&[&data[0]], &params.config).unwrap();
    let out = params.infer(&batch, true).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.layers.len(), 2);
    let words = data[0].tokens.len();
    for layer in &trace.layers {
        assert_eq!(layer.ea_lang_to_vis.len(), 2);
        for map in &layer.ea_lang_to_vis {
            for row in common::to_mat(map) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[words..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ergt");
    let params = perturbed(small_config(), 13);
    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    assert_eq!(loaded.config, params.config);
    assert_eq!(loaded.store.tensors(), params.store.tensors());
    let again = dir.path().join("again.ergt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    let named = read_checkpoint(std::io::Cursor::new(bytes)).unwrap();
    assert_eq!(named.len(), params.store.len());
    assert_eq!(named[0].0, params.store.name(params.store.ids().next().unwrap()));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ergt");
    perturbed(small_config(), 14).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(ModelParams::load(&path).is_err());
}

#[test]
fn oversized_scene_is_a_data_error() {
    let data = records(1, 15);
    let cfg = ModelConfig {
        max_objects: data[0].objects.len() - 1,
        ..small_config()
    };
    assert!(matches!(SceneBatch::from_records(&[&data[0]], &cfg), Err(erground::Error::Data(_))));
}
