//! Synthetic spatial-reference scenes.
//!
//! Each record is a handful of labelled boxes sampled as point sets, one
//! templated referring expression and the index of the object it refers to.
//! Every record carries at least one same-class distractor, and the
//! geometric [`relation_oracle`] confirms the referent is the only
//! same-class object matching the expression.

mod generate;
mod io;
mod oracle;
mod vocab;

use serde::{Deserialize, Serialize};

pub use generate::{generate_dataset, generate_record, label_record, place_with_relation, render_expression, sample_scene, DatasetStats};
pub use io::{read_dataset, write_dataset};
pub use oracle::{relation_oracle, satisfies};
pub use vocab::{class_name, class_word, token_id, token_str, tokenize, CLASS_NAMES, PAD, VOCAB};

use crate::config::Kv;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    HorizontalProximity,
    VerticalProximity,
    Between,
    Allocentric,
    Support,
}

impl RelationType {
    pub const ALL: [RelationType; 5] = [
        RelationType::HorizontalProximity,
        RelationType::VerticalProximity,
        RelationType::Between,
        RelationType::Allocentric,
        RelationType::Support,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationType::HorizontalProximity => "horizontal_proximity",
            RelationType::VerticalProximity => "vertical_proximity",
            RelationType::Between => "between",
            RelationType::Allocentric => "allocentric",
            RelationType::Support => "support",
        }
    }

    pub fn anchor_count(self) -> usize {
        if self == RelationType::Between {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewDependency {
    Dependent,
    Independent,
}

/// Side of an anchor in the fixed room frame: front is +y, right is +x,
/// above is +z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Front,
    Back,
    Left,
    Right,
    Above,
    Below,
}

impl Side {
    pub const HORIZONTAL: [Side; 4] = [Side::Front, Side::Back, Side::Left, Side::Right];
    pub const VERTICAL: [Side; 2] = [Side::Above, Side::Below];

    /// Unit direction in the floor plane (zero for vertical sides).
    pub fn direction(self) -> [f64; 2] {
        match self {
            Side::Front => [0.0, 1.0],
            Side::Back => [0.0, -1.0],
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Above | Side::Below => [0.0, 0.0],
        }
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Side::Above | Side::Below)
    }

    fn from_word(word: &str) -> Option<Side> {
        match word {
            "front" => Some(Side::Front),
            "behind" => Some(Side::Back),
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            "above" | "over" => Some(Side::Above),
            "below" | "under" | "beneath" => Some(Side::Below),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: [f64; 3],
    /// `x y z r g b` samples.
    pub points: Vec<[f64; 6]>,
}

impl SyntheticObject {
    pub fn min(&self, axis: usize) -> f64 {
        self.center[axis] - 0.5 * self.size[axis]
    }

    pub fn max(&self, axis: usize) -> f64 {
        self.center[axis] + 0.5 * self.size[axis]
    }

    pub fn bottom(&self) -> f64 {
        self.min(2)
    }

    pub fn top(&self) -> f64 {
        self.max(2)
    }

    /// Interior intersection volume with `other` (touching faces give 0).
    pub fn overlap_volume(&self, other: &SyntheticObject) -> f64 {
        (0..3)
            .map(|a| (self.max(a).min(other.max(a)) - self.min(a).max(other.min(a))).max(0.0))
            .product()
    }

    pub fn horizontal_distance(&self, other: &SyntheticObject) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        dx.hypot(dy)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<SyntheticObject>,
}

/// A templated utterance and the roles its words refer to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferringExpression {
    pub tokens: Vec<usize>,
    pub template: usize,
    pub relation: RelationType,
    pub target_class: usize,
    pub anchor_classes: Vec<usize>,
    pub side: Option<Side>,
}

impl ReferringExpression {
    /// Recovers roles from token ids: the first class word names the target,
    /// later class words name anchors, and the first side word of the kind
    /// the relation needs gives the side. The template id is not recoverable
    /// and is reported as 0.
    pub fn parse(tokens: &[usize], relation: RelationType) -> Result<Self> {
        let mut classes = Vec::new();
        let mut side = None;
        for &t in tokens {
            let word = token_str(t).ok_or_else(|| Error::Data(format!("token id {t} outside vocabulary")))?;
            if let Some(c) = class_word(word) {
                classes.push(c);
            }
            let wanted = match relation {
                RelationType::Allocentric => Side::from_word(word).filter(|s| !s.is_vertical()),
                RelationType::VerticalProximity => Side::from_word(word).filter(|s| s.is_vertical()),
                _ => None,
            };
            side = side.or(wanted);
        }
        let (&target_class, anchors) = classes
            .split_first()
            .ok_or_else(|| Error::Data("expression names no object class".into()))?;
        if anchors.len() != relation.anchor_count() {
            return Err(Error::Data(format!(
                "{} expression needs {} anchor(s), found {}",
                relation.name(),
                relation.anchor_count(),
                anchors.len()
            )));
        }
        let sided = matches!(relation, RelationType::Allocentric | RelationType::VerticalProximity);
        if sided && side.is_none() {
            return Err(Error::Data(format!("{} expression names no side", relation.name())));
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            template: 0,
            relation,
            target_class,
            anchor_classes: anchors.to_vec(),
            side,
        })
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub objects: Vec<SyntheticObject>,
    pub tokens: Vec<usize>,
    pub relation_type: RelationType,
    pub referent: usize,
    pub difficulty: Difficulty,
    pub view_dep: ViewDependency,
}

impl DatasetRecord {
    pub fn expression(&self) -> Result<ReferringExpression> {
        ReferringExpression::parse(&self.tokens, self.relation_type)
    }

    pub fn scene(&self) -> SyntheticScene {
        SyntheticScene {
            objects: self.objects.clone(),
        }
    }

    /// Same-class objects other than the referent.
    pub fn distractors(&self) -> Vec<usize> {
        let class = self.objects[self.referent].class_id;
        (0..self.objects.len())
            .filter(|&i| i != self.referent && self.objects[i].class_id == class)
            .collect()
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.tokens.iter().map(|&t| token_str(t).unwrap_or("<unk>")).collect()
    }
}

/// Geometric tolerances of the relation predicates (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelationThresholds {
    /// Max floor-plane distance from the target center to the anchor segment.
    pub between: f64,
    /// Max gap between target bottom and anchor top.
    pub support: f64,
    /// Max floor-plane center offset as a fraction of the anchor's width.
    pub vertical_offset: f64,
    /// Max floor-plane distance for a side relation.
    pub allocentric_radius: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        Self {
            between: 0.3,
            support: 0.02,
            vertical_offset: 0.25,
            allocentric_radius: 2.0,
        }
    }
}

/// Generator settings, serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_distractors: usize,
    pub points_per_object: usize,
    pub room_extent: f64,
    pub point_noise: f64,
    pub thresholds: RelationThresholds,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 12,
            min_objects: 8,
            max_objects: 10,
            max_distractors: 3,
            points_per_object: 24,
            room_extent: 6.0,
            point_noise: 0.01,
            thresholds: RelationThresholds::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 3 || self.max_objects < self.min_objects {
            return Err(Error::Config("object range must satisfy 3 <= min_objects <= max_objects".into()));
        }
        if self.num_classes < 6 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("num_classes must be in 6..={}", CLASS_NAMES.len())));
        }
        if self.max_distractors == 0 {
            return Err(Error::Config("max_distractors must be at least 1".into()));
        }
        if self.points_per_object == 0 {
            return Err(Error::Config("points_per_object must be at least 1".into()));
        }
        if !(self.room_extent >= 3.0) {
            return Err(Error::Config("room_extent must be at least 3 m".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let t = &self.thresholds;
        format!(
            "seed = {}\nnum_classes = {}\nmin_objects = {}\nmax_objects = {}\nmax_distractors = {}\npoints_per_object = {}\nroom_extent = {}\npoint_noise = {}\nbetween_tolerance = {}\nsupport_tolerance = {}\nvertical_offset_factor = {}\nallocentric_radius = {}\n",
            self.seed,
            self.num_classes,
            self.min_objects,
            self.max_objects,
            self.max_distractors,
            self.points_per_object,
            self.room_extent,
            self.point_noise,
            t.between,
            t.support,
            t.vertical_offset,
            t.allocentric_radius
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in Kv::parse(text)?.entries() {
            match key.as_str() {
                "seed" => c.seed = Kv::value(key, value)?,
                "num_classes" => c.num_classes = Kv::value(key, value)?,
                "min_objects" => c.min_objects = Kv::value(key, value)?,
                "max_objects" => c.max_objects = Kv::value(key, value)?,
                "max_distractors" => c.max_distractors = Kv::value(key, value)?,
                "points_per_object" => c.points_per_object = Kv::value(key, value)?,
                "room_extent" => c.room_extent = Kv::value(key, value)?,
                "point_noise" => c.point_noise = Kv::value(key, value)?,
                "between_tolerance" => c.thresholds.between = Kv::value(key, value)?,
                "support_tolerance" => c.thresholds.support = Kv::value(key, value)?,
                "vertical_offset_factor" => c.thresholds.vertical_offset = Kv::value(key, value)?,
                "allocentric_radius" => c.thresholds.allocentric_radius = Kv::value(key, value)?,
                other => return Err(Error::Config(format!("unknown generator key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_kv() {
        let c = GeneratorConfig {
            seed: 42,
            min_objects: 5,
            ..GeneratorConfig::default()
        };
        assert_eq!(GeneratorConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(GeneratorConfig::from_kv("bogus = 1\n").is_err());
        assert!(GeneratorConfig::from_kv("min_objects = 2\n").is_err());
    }

    #[test]
    fn parse_recovers_roles() {
        let toks = tokenize("the lamp between the table and the sofa").unwrap();
        let e = ReferringExpression::parse(&toks, RelationType::Between).unwrap();
        assert_eq!(e.target_class, class_word("lamp").unwrap());
        assert_eq!(e.anchor_classes.len(), 2);
        assert!(ReferringExpression::parse(&toks, RelationType::Support).is_err());

        let toks = tokenize("the box to the left of the table").unwrap();
        let e = ReferringExpression::parse(&toks, RelationType::Allocentric).unwrap();
        assert_eq!(e.side, Some(Side::Left));

        let toks = tokenize("the lamp hanging above the table").unwrap();
        let e = ReferringExpression::parse(&toks, RelationType::VerticalProximity).unwrap();
        assert_eq!(e.side, Some(Side::Above));
        assert!(ReferringExpression::parse(&tokenize("the lamp near the table").unwrap(), RelationType::VerticalProximity).is_err());
    }
}
