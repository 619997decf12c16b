use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::oracle::width;
use super::{
    relation_oracle, satisfies, tokenize, Difficulty, DatasetRecord, GeneratorConfig, ReferringExpression, RelationThresholds,
    RelationType, Side, SyntheticObject, SyntheticScene, ViewDependency, CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, seeded, uniform, Rng};

struct ClassPrior {
    size: [f64; 3],
    color: [f64; 3],
    /// Flat top that can hold small objects.
    surface: bool,
    /// Small enough to rest on a surface.
    small: bool,
}

const fn prior(size: [f64; 3], color: [f64; 3], surface: bool, small: bool) -> ClassPrior {
    ClassPrior {
        size,
        color,
        surface,
        small,
    }
}

const PRIORS: [ClassPrior; 16] = [
    prior([0.50, 0.50, 0.90], [0.55, 0.30, 0.10], false, false), // chair
    prior([1.20, 0.80, 0.75], [0.45, 0.35, 0.25], true, false),  // table
    prior([0.30, 0.30, 0.50], [0.95, 0.90, 0.45], false, true),  // lamp
    prior([0.45, 0.35, 0.30], [0.75, 0.60, 0.40], false, true),  // box
    prior([1.80, 0.90, 0.80], [0.20, 0.30, 0.65], true, false),  // sofa
    prior([0.35, 0.35, 0.70], [0.10, 0.60, 0.20], false, true),  // plant
    prior([1.00, 0.55, 1.00], [0.40, 0.40, 0.45], true, false),  // cabinet
    prior([0.20, 0.20, 0.35], [0.80, 0.20, 0.30], false, true),  // vase
    prior([1.40, 0.70, 0.75], [0.65, 0.50, 0.30], true, false),  // desk
    prior([0.55, 0.20, 0.40], [0.10, 0.10, 0.10], false, true),  // monitor
    prior([0.90, 0.40, 1.40], [0.60, 0.45, 0.20], true, false),  // shelf
    prior([0.45, 0.30, 0.15], [0.90, 0.80, 0.85], false, true),  // pillow
    prior([2.00, 1.50, 0.50], [0.85, 0.85, 0.95], true, false),  // bed
    prior([0.35, 0.35, 0.45], [0.30, 0.55, 0.55], false, true),  // bin
    prior([0.40, 0.40, 0.50], [0.75, 0.25, 0.60], false, false), // stool
    prior([0.45, 0.40, 0.30], [0.90, 0.90, 0.90], false, true),  // printer
];

const SIZE_JITTER: f64 = 0.1;
const COLOR_JITTER: f64 = 0.05;
const COLOR_NOISE: f64 = 0.02;
/// Minimum free gap around objects standing on the floor.
const CLEARANCE: f64 = 0.05;
const CEILING: f64 = 3.0;
/// Extra distance by which distractors must miss each predicate.
const MARGIN: f64 = 0.4;
const PLACEMENT_TRIES: usize = 200;
const RECORD_ATTEMPTS: usize = 1000;

const TEMPLATES: [(RelationType, Option<Side>, &str); 22] = [
    (RelationType::HorizontalProximity, None, "the {T} closest to the {A}"),
    (RelationType::HorizontalProximity, None, "the {T} that is nearest to the {A}"),
    (RelationType::HorizontalProximity, None, "find the {T} next to the {A}"),
    (RelationType::HorizontalProximity, None, "the {T} that is close to the {A}"),
    (RelationType::VerticalProximity, Some(Side::Above), "the {T} above the {A}"),
    (RelationType::VerticalProximity, Some(Side::Above), "the {T} that is over the {A}"),
    (RelationType::VerticalProximity, Some(Side::Above), "the {T} hanging above the {A}"),
    (RelationType::VerticalProximity, Some(Side::Below), "the {T} below the {A}"),
    (RelationType::VerticalProximity, Some(Side::Below), "the {T} that is under the {A}"),
    (RelationType::VerticalProximity, Some(Side::Below), "the {T} beneath the {A}"),
    (RelationType::Between, None, "the {T} between the {A} and the {B}"),
    (RelationType::Between, None, "the {T} that is in the middle of the {A} and the {B}"),
    (RelationType::Between, None, "find the {T} located between the {A} and the {B}"),
    (RelationType::Allocentric, None, "the {T} {S} the {A}"),
    (RelationType::Allocentric, None, "the {T} that is {S} the {A}"),
    (RelationType::Allocentric, None, "the {T} located {S} the {A}"),
    (RelationType::Support, None, "the {T} on top of the {A}"),
    (RelationType::Support, None, "the {T} that is resting on the {A}"),
    (RelationType::Support, None, "the {T} supported by the {A}"),
    (RelationType::Support, None, "the {T} sitting on the {A}"),
    (RelationType::Support, None, "the {T} placed on top of the {A}"),
    (RelationType::Support, None, "the {T} standing on the {A}"),
];

fn side_phrase(side: Side) -> &'static str {
    match side {
        Side::Front => "in front of",
        Side::Back => "behind",
        Side::Left => "to the left of",
        Side::Right => "to the right of",
        Side::Above => "above",
        Side::Below => "below",
    }
}

/// Fills a random surface template for the relation. `side` is required for
/// allocentric (a horizontal side) and vertical (above or below) relations.
pub fn render_expression(
    rng: &mut Rng,
    relation: RelationType,
    side: Option<Side>,
    target_class: usize,
    anchor_classes: &[usize],
) -> Result<ReferringExpression> {
    if anchor_classes.len() != relation.anchor_count() {
        return Err(Error::Generation(format!("{} takes {} anchor(s)", relation.name(), relation.anchor_count())));
    }
    let side = match relation {
        RelationType::Allocentric => Some(side.filter(|s| !s.is_vertical()).ok_or_else(|| Error::Generation("allocentric needs a horizontal side".into()))?),
        RelationType::VerticalProximity => Some(side.filter(|s| s.is_vertical()).ok_or_else(|| Error::Generation("vertical relation needs above or below".into()))?),
        _ => None,
    };
    let choices: Vec<usize> = TEMPLATES
        .iter()
        .enumerate()
        .filter(|(_, (r, s, _))| *r == relation && (s.is_none() || *s == side))
        .map(|(i, _)| i)
        .collect();
    let template = *choices.choose(rng).expect("every relation has templates");
    let mut text = TEMPLATES[template]
        .2
        .replace("{T}", CLASS_NAMES[target_class])
        .replace("{A}", CLASS_NAMES[anchor_classes[0]]);
    if let Some(&b) = anchor_classes.get(1) {
        text = text.replace("{B}", CLASS_NAMES[b]);
    }
    if let Some(s) = side {
        text = text.replace("{S}", side_phrase(s));
    }
    Ok(ReferringExpression {
        tokens: tokenize(&text)?,
        template,
        relation,
        target_class,
        anchor_classes: anchor_classes.to_vec(),
        side,
    })
}

/// Attaches split labels; records without a same-class distractor are rejected.
pub fn label_record(scene: SyntheticScene, expression: &ReferringExpression, referent: usize) -> Result<DatasetRecord> {
    let class = scene
        .objects
        .get(referent)
        .ok_or_else(|| Error::Generation(format!("referent {referent} outside scene")))?
        .class_id;
    let distractors = scene.objects.iter().enumerate().filter(|&(i, o)| i != referent && o.class_id == class).count();
    let difficulty = match distractors {
        0 => return Err(Error::Generation("referent has no same-class distractor".into())),
        1 => Difficulty::Easy,
        _ => Difficulty::Hard,
    };
    let view_dep = if expression.relation == RelationType::Allocentric {
        ViewDependency::Dependent
    } else {
        ViewDependency::Independent
    };
    Ok(DatasetRecord {
        objects: scene.objects,
        tokens: expression.tokens.clone(),
        relation_type: expression.relation,
        referent,
        difficulty,
        view_dep,
    })
}

fn sample_size(rng: &mut Rng, class: usize) -> [f64; 3] {
    PRIORS[class].size.map(|s| s * uniform(rng, 1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER))
}

fn boxed(rng: &mut Rng, class: usize, center: [f64; 3], size: [f64; 3]) -> SyntheticObject {
    let color = PRIORS[class].color.map(|c| (c + uniform(rng, -COLOR_JITTER, COLOR_JITTER)).clamp(0.0, 1.0));
    SyntheticObject {
        class_id: class,
        center,
        size,
        color,
        points: Vec::new(),
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn fill_points(rng: &mut Rng, o: &mut SyntheticObject, count: usize, noise: f64) {
    o.points = (0..count)
        .map(|_| {
            let mut p = [0.0; 6];
            for a in 0..3 {
                p[a] = round4(o.center[a] + (rng.random::<f64>() - 0.5) * o.size[a] + noise * normal(rng));
                p[a + 3] = round4((o.color[a] + COLOR_NOISE * normal(rng)).clamp(0.0, 1.0));
            }
            p
        })
        .collect();
}

fn footprint_radius(size: [f64; 3]) -> f64 {
    0.5 * size[0].hypot(size[1])
}

fn fits_room(o: &SyntheticObject, extent: f64) -> bool {
    (0..2).all(|a| o.min(a) >= 0.0 && o.max(a) <= extent) && o.bottom() >= -1e-12 && o.top() <= CEILING
}

/// Overlap test with the floor-plane extents padded by the clearance, so
/// touching stacks are allowed but side-by-side boxes keep a gap.
fn collides(objects: &[SyntheticObject], cand: &SyntheticObject) -> bool {
    let mut padded = cand.clone();
    padded.size[0] += CLEARANCE;
    padded.size[1] += CLEARANCE;
    objects.iter().any(|o| padded.overlap_volume(o) > 1e-12)
}

fn on_floor(rng: &mut Rng, objects: &[SyntheticObject], class: usize, size: [f64; 3], extent: f64) -> Option<SyntheticObject> {
    for _ in 0..PLACEMENT_TRIES {
        let x = uniform(rng, 0.5 * size[0], extent - 0.5 * size[0]);
        let y = uniform(rng, 0.5 * size[1], extent - 0.5 * size[1]);
        let o = boxed(rng, class, [x, y, 0.5 * size[2]], size);
        if !collides(objects, &o) {
            return Some(o);
        }
    }
    None
}

fn accept(objects: &[SyntheticObject], o: SyntheticObject, extent: f64) -> Option<SyntheticObject> {
    (fits_room(&o, extent) && !collides(objects, &o)).then_some(o)
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// Floor-plane offset along `side` and its absolute perpendicular part.
fn side_components(d: [f64; 2], side: Side) -> (f64, f64) {
    let dir = side.direction();
    (d[0] * dir[0] + d[1] * dir[1], (d[0] * dir[1] - d[1] * dir[0]).abs())
}

/// A box beside `anchor` on `side`, separated by a random gap.
fn beside(rng: &mut Rng, anchor: &SyntheticObject, class: usize, side: Side) -> SyntheticObject {
    let size = sample_size(rng, class);
    let axis = if side.direction()[0] != 0.0 { 0 } else { 1 };
    let along = 0.5 * (anchor.size[axis] + size[axis]) + CLEARANCE + uniform(rng, 0.05, 0.45);
    let lateral = uniform(rng, -0.2, 0.2);
    let dir = side.direction();
    let perp = [dir[1], -dir[0]];
    let c = [
        anchor.center[0] + along * dir[0] + lateral * perp[0],
        anchor.center[1] + along * dir[1] + lateral * perp[1],
    ];
    boxed(rng, class, [c[0], c[1], 0.5 * size[2]], size)
}

/// Adds one object of `target_class` so that it satisfies the relation to
/// the already placed `anchors` with a safety margin. Returns its index.
pub fn place_with_relation(
    rng: &mut Rng,
    scene: &mut SyntheticScene,
    relation: RelationType,
    side: Option<Side>,
    target_class: usize,
    anchors: &[usize],
    cfg: &GeneratorConfig,
) -> Result<usize> {
    if anchors.len() != relation.anchor_count() || anchors.iter().any(|&a| a >= scene.objects.len()) {
        return Err(Error::Generation(format!("{} needs {} placed anchor(s)", relation.name(), relation.anchor_count())));
    }
    let th = cfg.thresholds;
    let extent = cfg.room_extent;
    let objects = &scene.objects;
    let a = &objects[anchors[0]];
    for _ in 0..PLACEMENT_TRIES {
        let candidate = match relation {
            RelationType::HorizontalProximity => {
                let size = sample_size(rng, target_class);
                let r = footprint_radius(a.size) + footprint_radius(size) + CLEARANCE + uniform(rng, 0.0, 1.0);
                let t = uniform(rng, 0.0, std::f64::consts::TAU);
                let c = [a.center[0] + r * t.cos(), a.center[1] + r * t.sin(), 0.5 * size[2]];
                Some(boxed(rng, target_class, c, size))
            }
            RelationType::VerticalProximity => {
                let size = sample_size(rng, target_class);
                let r = uniform(rng, 0.0, 0.4 * th.vertical_offset * width(a));
                let t = uniform(rng, 0.0, std::f64::consts::TAU);
                let (x, y) = (a.center[0] + r * t.cos(), a.center[1] + r * t.sin());
                match side {
                    Some(Side::Above) => {
                        let bottom = a.top() + th.support + uniform(rng, 0.25, 0.7);
                        Some(boxed(rng, target_class, [x, y, bottom + 0.5 * size[2]], size))
                    }
                    Some(Side::Below) => {
                        (size[2] + th.support + 0.2 < a.bottom()).then(|| boxed(rng, target_class, [x, y, 0.5 * size[2]], size))
                    }
                    _ => return Err(Error::Generation("vertical relation needs above or below".into())),
                }
            }
            RelationType::Between => {
                let b = &objects[anchors[1]];
                let ab = unit([b.center[0] - a.center[0], b.center[1] - a.center[1]]);
                let along = uniform(rng, -0.1, 0.1);
                let across = uniform(rng, -0.1, 0.1);
                let size = sample_size(rng, target_class);
                let c = [
                    0.5 * (a.center[0] + b.center[0]) + along * ab[0] - across * ab[1],
                    0.5 * (a.center[1] + b.center[1]) + along * ab[1] + across * ab[0],
                    0.5 * size[2],
                ];
                Some(boxed(rng, target_class, c, size))
            }
            RelationType::Allocentric => {
                let s = side
                    .filter(|s| !s.is_vertical())
                    .ok_or_else(|| Error::Generation("allocentric needs a horizontal side".into()))?;
                let o = beside(rng, a, target_class, s);
                let d = [o.center[0] - a.center[0], o.center[1] - a.center[1]];
                let (along, across) = side_components(d, s);
                (along >= 1.5 * across && d[0].hypot(d[1]) <= th.allocentric_radius - 0.3).then_some(o)
            }
            RelationType::Support => {
                let size = sample_size(rng, target_class);
                let m = 0.02;
                if (0..2).any(|ax| size[ax] + 2.0 * m > a.size[ax]) {
                    None
                } else {
                    let x = a.min(0) + m + 0.5 * size[0] + rng.random::<f64>() * (a.size[0] - size[0] - 2.0 * m);
                    let y = a.min(1) + m + 0.5 * size[1] + rng.random::<f64>() * (a.size[1] - size[1] - 2.0 * m);
                    Some(boxed(rng, target_class, [x, y, a.top() + 0.5 * size[2]], size))
                }
            }
        };
        if let Some(o) = candidate.and_then(|o| accept(objects, o, extent)) {
            scene.objects.push(o);
            return Ok(scene.objects.len() - 1);
        }
    }
    Err(Error::Generation(format!("could not place a {} target", relation.name())))
}

/// True when `cand` misses the predicate by at least the generator margin,
/// so that small perturbations cannot make it a second satisfier.
fn clearly_fails(objects: &[SyntheticObject], expr: &ReferringExpression, anchors: &[usize], target: usize, cand: &SyntheticObject, th: &RelationThresholds) -> bool {
    let a = &objects[anchors[0]];
    match expr.relation {
        RelationType::HorizontalProximity => cand.horizontal_distance(a) >= objects[target].horizontal_distance(a) + MARGIN,
        RelationType::VerticalProximity => {
            let far = cand.horizontal_distance(a) >= th.vertical_offset * width(a) + MARGIN;
            let wrong_level = match expr.side {
                Some(Side::Above) => cand.bottom() < a.top() - 0.1,
                _ => cand.top() > a.bottom() + 0.1,
            };
            far || wrong_level
        }
        RelationType::Between => {
            let mut probe = objects.to_vec();
            probe.push(cand.clone());
            let loose = RelationThresholds {
                between: th.between + MARGIN,
                ..*th
            };
            !satisfies(&probe, expr, probe.len() - 1, &loose)
        }
        RelationType::Allocentric => {
            let side = expr.side.unwrap_or(Side::Front);
            let d = [cand.center[0] - a.center[0], cand.center[1] - a.center[1]];
            let (along, across) = side_components(d, side);
            let loosely_on_side = along > 0.0 && 1.3 * along > across && d[0].hypot(d[1]) <= th.allocentric_radius + MARGIN;
            !loosely_on_side
        }
        RelationType::Support => (cand.bottom() - a.top()).abs() > th.support + 0.1,
    }
}

fn propose_distractor(
    rng: &mut Rng,
    objects: &[SyntheticObject],
    expr: &ReferringExpression,
    anchors: &[usize],
    fillers: &[usize],
    extent: f64,
) -> Option<SyntheticObject> {
    let class = expr.target_class;
    let a = &objects[anchors[0]];
    let mut size = sample_size(rng, class);
    match expr.relation {
        RelationType::VerticalProximity if expr.side == Some(Side::Above) && rng.random_bool(0.5) => {
            let x = uniform(rng, 0.5 * size[0], extent - 0.5 * size[0]);
            let y = uniform(rng, 0.5 * size[1], extent - 0.5 * size[1]);
            let bottom = uniform(rng, 0.9, 1.8);
            Some(boxed(rng, class, [x, y, bottom + 0.5 * size[2]], size))
        }
        RelationType::Between if rng.random_bool(0.5) => {
            let (near, far) = if rng.random_bool(0.5) { (a, &objects[anchors[1]]) } else { (&objects[anchors[1]], a) };
            let out = unit([near.center[0] - far.center[0], near.center[1] - far.center[1]]);
            let r = footprint_radius(near.size) + footprint_radius(size) + CLEARANCE + uniform(rng, 0.0, 0.6);
            let jitter = uniform(rng, -0.5, 0.5);
            let c = [
                near.center[0] + r * out[0] - jitter * out[1],
                near.center[1] + r * out[1] + jitter * out[0],
                0.5 * size[2],
            ];
            Some(boxed(rng, class, c, size))
        }
        RelationType::Allocentric if rng.random_bool(0.6) => {
            let others: Vec<Side> = Side::HORIZONTAL.into_iter().filter(|&s| Some(s) != expr.side).collect();
            let s = *others.choose(rng).expect("three other sides");
            Some(beside(rng, a, class, s))
        }
        RelationType::Support if !fillers.is_empty() && rng.random_bool(0.5) => {
            let f = &objects[*fillers.choose(rng).expect("non-empty")];
            let m = 0.02;
            for ax in 0..2 {
                size[ax] = size[ax].min(f.size[ax] - 2.0 * m);
            }
            if size[0] <= 0.05 || size[1] <= 0.05 {
                return None;
            }
            let x = f.min(0) + m + 0.5 * size[0] + rng.random::<f64>() * (f.size[0] - size[0] - 2.0 * m);
            let y = f.min(1) + m + 0.5 * size[1] + rng.random::<f64>() * (f.size[1] - size[1] - 2.0 * m);
            Some(boxed(rng, class, [x, y, f.top() + 0.5 * size[2]], size))
        }
        _ => {
            let x = uniform(rng, 0.5 * size[0], extent - 0.5 * size[0]);
            let y = uniform(rng, 0.5 * size[1], extent - 0.5 * size[1]);
            Some(boxed(rng, class, [x, y, 0.5 * size[2]], size))
        }
    }
}

fn pick_classes(rng: &mut Rng, relation: RelationType, k: usize) -> Option<(usize, Vec<usize>)> {
    let mut pool: Vec<usize> = (0..k).collect();
    pool.shuffle(rng);
    if relation == RelationType::Support {
        let target = *pool.iter().find(|&&c| PRIORS[c].small)?;
        let anchor = *pool.iter().find(|&&c| PRIORS[c].surface)?;
        return Some((target, vec![anchor]));
    }
    Some((pool[0], pool[1..=relation.anchor_count()].to_vec()))
}

fn place_anchors(rng: &mut Rng, relation: RelationType, side: Option<Side>, target_class: usize, anchors: &[usize], extent: f64) -> Option<Vec<SyntheticObject>> {
    let mut placed = Vec::new();
    let size = sample_size(rng, anchors[0]);
    let first = if relation == RelationType::VerticalProximity && side == Some(Side::Below) {
        let bottom = uniform(rng, 1.3, 1.9);
        let x = uniform(rng, 0.5 * size[0], extent - 0.5 * size[0]);
        let y = uniform(rng, 0.5 * size[1], extent - 0.5 * size[1]);
        boxed(rng, anchors[0], [x, y, bottom + 0.5 * size[2]], size)
    } else {
        on_floor(rng, &placed, anchors[0], size, extent)?
    };
    placed.push(first);
    if relation == RelationType::Between {
        let size = sample_size(rng, anchors[1]);
        let a = &placed[0];
        let target_span = 2.0 * footprint_radius(PRIORS[target_class].size) * (1.0 + SIZE_JITTER);
        for _ in 0..PLACEMENT_TRIES {
            let sep = footprint_radius(a.size) + footprint_radius(size) + target_span + 2.0 * CLEARANCE + uniform(rng, 0.0, 0.8);
            let t = uniform(rng, 0.0, std::f64::consts::TAU);
            let c = [a.center[0] + sep * t.cos(), a.center[1] + sep * t.sin(), 0.5 * size[2]];
            let b = boxed(rng, anchors[1], c, size);
            if let Some(b) = accept(&placed, b, extent) {
                placed.push(b);
                return Some(placed);
            }
        }
        return None;
    }
    Some(placed)
}

fn try_record(rng: &mut Rng, cfg: &GeneratorConfig, relation: RelationType) -> Result<Option<DatasetRecord>> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let n_anchor = relation.anchor_count();
    let max_d = cfg.max_distractors.min(n - 1 - n_anchor);
    let d = rng.random_range(1..=max_d);
    let Some((target_class, anchor_classes)) = pick_classes(rng, relation, cfg.num_classes) else {
        return Ok(None);
    };
    let side = match relation {
        RelationType::Allocentric => Some(*Side::HORIZONTAL.choose(rng).expect("four sides")),
        RelationType::VerticalProximity => Some(*Side::VERTICAL.choose(rng).expect("two sides")),
        _ => None,
    };
    let expr = render_expression(rng, relation, side, target_class, &anchor_classes)?;
    let Some(objects) = place_anchors(rng, relation, side, target_class, &anchor_classes, cfg.room_extent) else {
        return Ok(None);
    };
    let mut scene = SyntheticScene { objects };
    let anchors: Vec<usize> = (0..n_anchor).collect();
    let Ok(target) = place_with_relation(rng, &mut scene, relation, side, target_class, &anchors, cfg) else {
        return Ok(None);
    };

    let filler_classes: Vec<usize> = (0..cfg.num_classes).filter(|c| *c != target_class && !anchor_classes.contains(c)).collect();
    let mut fillers = Vec::new();
    for _ in 0..n - 1 - d - n_anchor {
        let class = *filler_classes.choose(rng).expect("at least three free classes");
        let size = sample_size(rng, class);
        let Some(o) = on_floor(rng, &scene.objects, class, size, cfg.room_extent) else {
            return Ok(None);
        };
        scene.objects.push(o);
        fillers.push(scene.objects.len() - 1);
    }

    for _ in 0..d {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let Some(o) = propose_distractor(rng, &scene.objects, &expr, &anchors, &fillers, cfg.room_extent) else {
                continue;
            };
            if !clearly_fails(&scene.objects, &expr, &anchors, target, &o, &cfg.thresholds) {
                continue;
            }
            if let Some(o) = accept(&scene.objects, o, cfg.room_extent) {
                scene.objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }

    if !relation_oracle(&scene, &expr, target, &cfg.thresholds) {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.shuffle(rng);
    let mut objects: Vec<SyntheticObject> = order.iter().map(|&i| scene.objects[i].clone()).collect();
    for o in &mut objects {
        fill_points(rng, o, cfg.points_per_object, cfg.point_noise);
    }
    let referent = order.iter().position(|&i| i == target).expect("target is in the scene");
    label_record(SyntheticScene { objects }, &expr, referent).map(Some)
}

/// One record with a uniformly drawn relation type. Placement failures are
/// retried with fresh draws for the same relation, keeping the relation mix
/// uniform.
pub fn generate_record(rng: &mut Rng, cfg: &GeneratorConfig) -> Result<DatasetRecord> {
    cfg.validate()?;
    if cfg.min_objects < 4 {
        return Err(Error::Config("records need min_objects >= 4 (target, distractor, two anchors)".into()));
    }
    let relation = *RelationType::ALL.choose(rng).expect("five relations");
    for _ in 0..RECORD_ATTEMPTS {
        if let Some(r) = try_record(rng, cfg, relation)? {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!("no valid {} record after {RECORD_ATTEMPTS} attempts", relation.name())))
}

/// `count` records; record `i` draws from its own seed derived from the
/// config seed, `stream` and `i`.
pub fn generate_dataset(cfg: &GeneratorConfig, stream: u64, count: usize) -> Result<Vec<DatasetRecord>> {
    let base = derive_seed(cfg.seed, stream);
    (0..count)
        .map(|i| generate_record(&mut seeded(derive_seed(base, i as u64)), cfg))
        .collect()
}

/// Unconstrained scene: objects of random classes standing on the floor.
pub fn sample_scene(rng: &mut Rng, cfg: &GeneratorConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    'attempt: for _ in 0..RECORD_ATTEMPTS {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..cfg.num_classes);
            let size = sample_size(rng, class);
            match on_floor(rng, &objects, class, size, cfg.room_extent) {
                Some(o) => objects.push(o),
                None => continue 'attempt,
            }
        }
        for o in &mut objects {
            fill_points(rng, o, cfg.points_per_object, cfg.point_noise);
        }
        return Ok(SyntheticScene { objects });
    }
    Err(Error::Generation("could not place a scene".into()))
}

/// Relation and split counts of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub total: usize,
    pub per_relation: [usize; 5],
    pub easy: usize,
    pub hard: usize,
    pub view_dep: usize,
    pub view_indep: usize,
}

impl DatasetStats {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let mut s = Self {
            total: records.len(),
            ..Self::default()
        };
        for r in records {
            let k = RelationType::ALL.iter().position(|&t| t == r.relation_type).expect("known relation");
            s.per_relation[k] += 1;
            match r.difficulty {
                Difficulty::Easy => s.easy += 1,
                Difficulty::Hard => s.hard += 1,
            }
            match r.view_dep {
                ViewDependency::Dependent => s.view_dep += 1,
                ViewDependency::Independent => s.view_indep += 1,
            }
        }
        s
    }

    /// `key = value` summary, one line per count.
    pub fn summary(&self) -> String {
        let mut out = format!("records = {}\n", self.total);
        for (t, c) in RelationType::ALL.iter().zip(self.per_relation) {
            let _ = writeln!(out, "relation.{} = {c}", t.name());
        }
        let _ = write!(
            out,
            "easy = {}\nhard = {}\nview_dep = {}\nview_indep = {}\n",
            self.easy, self.hard, self.view_dep, self.view_indep
        );
        out
    }
}
