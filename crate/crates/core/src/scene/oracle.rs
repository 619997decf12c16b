use super::{ReferringExpression, RelationThresholds, RelationType, Side, SyntheticObject, SyntheticScene};

/// Index of the only object of `class`, if exactly one exists.
fn unique_of_class(objects: &[SyntheticObject], class: usize) -> Option<usize> {
    let mut found = None;
    for (i, o) in objects.iter().enumerate() {
        if o.class_id == class {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}

fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

fn xy(o: &SyntheticObject) -> [f64; 2] {
    [o.center[0], o.center[1]]
}

/// Larger floor-plane extent of a box.
pub(crate) fn width(o: &SyntheticObject) -> f64 {
    o.size[0].max(o.size[1])
}

/// Whether `cand` meets the expression's geometric predicate, ignoring
/// uniqueness. Anchors are the unique objects of the anchor classes; if an
/// anchor class is missing or repeated the predicate is false.
pub fn satisfies(objects: &[SyntheticObject], expr: &ReferringExpression, cand: usize, th: &RelationThresholds) -> bool {
    let Some(c) = objects.get(cand) else {
        return false;
    };
    if c.class_id != expr.target_class {
        return false;
    }
    let anchors: Option<Vec<usize>> = expr.anchor_classes.iter().map(|&k| unique_of_class(objects, k)).collect();
    let Some(anchors) = anchors else {
        return false;
    };
    if anchors.len() != expr.relation.anchor_count() || anchors.contains(&cand) {
        return false;
    }
    let a = &objects[anchors[0]];
    match expr.relation {
        RelationType::HorizontalProximity => {
            let d = c.horizontal_distance(a);
            objects
                .iter()
                .enumerate()
                .filter(|&(i, o)| i != cand && o.class_id == c.class_id)
                .all(|(_, o)| o.horizontal_distance(a) > d)
        }
        RelationType::VerticalProximity => {
            let aligned = c.horizontal_distance(a) < th.vertical_offset * width(a);
            let separated = match expr.side {
                Some(Side::Above) => c.bottom() > a.top() + th.support,
                Some(Side::Below) => c.top() < a.bottom() - th.support,
                _ => false,
            };
            aligned && separated
        }
        RelationType::Between => {
            let b = &objects[anchors[1]];
            distance_to_segment(xy(c), xy(a), xy(b)) <= th.between
        }
        RelationType::Allocentric => {
            let Some(side) = expr.side.filter(|s| !s.is_vertical()) else {
                return false;
            };
            let d = [c.center[0] - a.center[0], c.center[1] - a.center[1]];
            let dir = side.direction();
            let along = d[0] * dir[0] + d[1] * dir[1];
            let across = (d[0] * dir[1] - d[1] * dir[0]).abs();
            along > 0.0 && along > across && d[0].hypot(d[1]) <= th.allocentric_radius
        }
        RelationType::Support => {
            let resting = (c.bottom() - a.top()).abs() <= th.support;
            let inside = (0..2).all(|ax| c.min(ax) >= a.min(ax) - 1e-9 && c.max(ax) <= a.max(ax) + 1e-9);
            resting && inside
        }
    }
}

/// True iff `candidate` satisfies the expression and no other object of the
/// target class does.
pub fn relation_oracle(scene: &SyntheticScene, expr: &ReferringExpression, candidate: usize, th: &RelationThresholds) -> bool {
    let objects = &scene.objects;
    if !satisfies(objects, expr, candidate, th) {
        return false;
    }
    objects
        .iter()
        .enumerate()
        .filter(|&(i, o)| i != candidate && o.class_id == expr.target_class)
        .all(|(i, _)| !satisfies(objects, expr, i, th))
}
