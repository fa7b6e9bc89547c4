//! The fixed three-level gesture taxonomy.
//!
//! Level 1 splits on hand, level 2 on the finger state and level 3 on the
//! thumb state. Every leaf is a [`GestureClass`]; its index is derived from
//! the triple and never stored.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{HcspError, Result};

/// Side of a binary split. `Neg` is category `-1`, `Pos` is category `+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Neg,
    Pos,
}

impl Side {
    pub fn sign(self) -> i8 {
        match self {
            Side::Neg => -1,
            Side::Pos => 1,
        }
    }

    pub fn bit(self) -> usize {
        match self {
            Side::Neg => 0,
            Side::Pos => 1,
        }
    }

    pub fn from_bit(bit: usize) -> Self {
        if bit == 0 {
            Side::Neg
        } else {
            Side::Pos
        }
    }

    pub const BOTH: [Side; 2] = [Side::Neg, Side::Pos];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fingers {
    Extension,
    Flexion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Thumb {
    Abduction,
    Adduction,
}

impl Hand {
    pub fn side(self) -> Side {
        match self {
            Hand::Left => Side::Neg,
            Hand::Right => Side::Pos,
        }
    }
    pub fn from_side(s: Side) -> Self {
        match s {
            Side::Neg => Hand::Left,
            Side::Pos => Hand::Right,
        }
    }
}

impl Fingers {
    pub fn side(self) -> Side {
        match self {
            Fingers::Extension => Side::Neg,
            Fingers::Flexion => Side::Pos,
        }
    }
    pub fn from_side(s: Side) -> Self {
        match s {
            Side::Neg => Fingers::Extension,
            Side::Pos => Fingers::Flexion,
        }
    }
}

impl Thumb {
    pub fn side(self) -> Side {
        match self {
            Thumb::Abduction => Side::Neg,
            Thumb::Adduction => Side::Pos,
        }
    }
    pub fn from_side(s: Side) -> Self {
        match s {
            Side::Neg => Thumb::Abduction,
            Side::Pos => Thumb::Adduction,
        }
    }
}

/// One of the eight leaf gestures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GestureClass {
    pub hand: Hand,
    pub fingers: Fingers,
    pub thumb: Thumb,
}

pub const NUM_GESTURES: usize = 8;

impl GestureClass {
    pub fn new(hand: Hand, fingers: Fingers, thumb: Thumb) -> Self {
        Self {
            hand,
            fingers,
            thumb,
        }
    }

    /// `4·hand + 2·fingers + thumb` with each axis mapped to its bit.
    pub fn leaf_index(self) -> usize {
        4 * self.hand.side().bit() + 2 * self.fingers.side().bit() + self.thumb.side().bit()
    }

    pub fn from_leaf_index(index: usize) -> Option<Self> {
        if index >= NUM_GESTURES {
            return None;
        }
        Some(Self::from_sides(
            Side::from_bit((index >> 2) & 1),
            Side::from_bit((index >> 1) & 1),
            Side::from_bit(index & 1),
        ))
    }

    pub fn from_sides(hand: Side, fingers: Side, thumb: Side) -> Self {
        Self::new(
            Hand::from_side(hand),
            Fingers::from_side(fingers),
            Thumb::from_side(thumb),
        )
    }

    /// All leaves in `leaf_index` order.
    pub fn all() -> [GestureClass; NUM_GESTURES] {
        std::array::from_fn(|i| GestureClass::from_leaf_index(i).unwrap())
    }

    pub fn side_at(self, level: LevelId) -> Side {
        match level {
            LevelId::Hand => self.hand.side(),
            LevelId::Fingers => self.fingers.side(),
            LevelId::Thumb => self.thumb.side(),
        }
    }
}

impl fmt::Display for GestureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hand = match self.hand {
            Hand::Left => "left",
            Hand::Right => "right",
        };
        let fingers = match self.fingers {
            Fingers::Extension => "extension",
            Fingers::Flexion => "flexion",
        };
        let thumb = match self.thumb {
            Thumb::Abduction => "abduction",
            Thumb::Adduction => "adduction",
        };
        write!(f, "{hand}/{fingers}/{thumb}")
    }
}

/// Hierarchy level. Serialized as its number (1, 2 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LevelId {
    Hand,
    Fingers,
    Thumb,
}

impl LevelId {
    pub const ALL: [LevelId; 3] = [LevelId::Hand, LevelId::Fingers, LevelId::Thumb];

    pub fn number(self) -> u8 {
        match self {
            LevelId::Hand => 1,
            LevelId::Fingers => 2,
            LevelId::Thumb => 3,
        }
    }

    pub fn index(self) -> usize {
        self.number() as usize - 1
    }
}

impl TryFrom<u8> for LevelId {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(LevelId::Hand),
            2 => Ok(LevelId::Fingers),
            3 => Ok(LevelId::Thumb),
            other => Err(format!("level must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<LevelId> for u8 {
    fn from(l: LevelId) -> u8 {
        l.number()
    }
}

impl fmt::Display for LevelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CategoryLabel {
    pub level: LevelId,
    pub side: Side,
}

impl CategoryLabel {
    /// The `±1` label.
    pub fn l(self) -> i8 {
        self.side.sign()
    }
}

pub fn category_of(g: GestureClass, level: LevelId) -> CategoryLabel {
    CategoryLabel {
        level,
        side: g.side_at(level),
    }
}

/// Which trials a level classifier is trained on.
///
/// `Branch` fixes the sides of all levels above the classifier's level, e.g.
/// a level-3 classifier for (left, extension) holds `[Neg, Neg]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryScope {
    Pooled,
    Branch(Vec<BranchSide>),
}

/// Serializable mirror of [`Side`] used in branch paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchSide {
    #[serde(rename = "-1")]
    Neg,
    #[serde(rename = "+1")]
    Pos,
}

impl From<Side> for BranchSide {
    fn from(s: Side) -> Self {
        match s {
            Side::Neg => BranchSide::Neg,
            Side::Pos => BranchSide::Pos,
        }
    }
}

impl From<BranchSide> for Side {
    fn from(s: BranchSide) -> Self {
        match s {
            BranchSide::Neg => Side::Neg,
            BranchSide::Pos => Side::Pos,
        }
    }
}

impl CategoryScope {
    pub fn branch(path: &[Side]) -> Self {
        CategoryScope::Branch(path.iter().map(|&s| s.into()).collect())
    }

    /// Whether a gesture belongs to this scope. `Pooled` admits everything.
    pub fn admits(&self, g: GestureClass) -> bool {
        match self {
            CategoryScope::Pooled => true,
            CategoryScope::Branch(path) => path
                .iter()
                .zip(LevelId::ALL)
                .all(|(&s, level)| g.side_at(level) == Side::from(s)),
        }
    }

    fn validate(&self, level: LevelId) -> Result<()> {
        if let CategoryScope::Branch(path) = self {
            if path.len() != level.index() {
                return Err(HcspError::param(
                    "scope",
                    format!(
                        "branch scope for {level} needs {} fixed levels, got {}",
                        level.index(),
                        path.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Split a collection of labels into the two categories of `level`, keeping
/// only items admitted by `scope`. Returns positions into `labels`.
pub fn partition_labels(
    labels: &[GestureClass],
    level: LevelId,
    scope: &CategoryScope,
) -> Result<(Vec<usize>, Vec<usize>)> {
    scope.validate(level)?;
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (i, &g) in labels.iter().enumerate() {
        if !scope.admits(g) {
            continue;
        }
        match g.side_at(level) {
            Side::Neg => neg.push(i),
            Side::Pos => pos.push(i),
        }
    }
    for (side, set) in [(Side::Neg, &neg), (Side::Pos, &pos)] {
        if set.is_empty() {
            return Err(HcspError::Training(format!(
                "category l={:+} at {level} ({scope:?}) has no trials",
                side.sign()
            )));
        }
    }
    Ok((neg, pos))
}

/// Trial indices of `ds` on each side of `level`, restricted to `scope`.
pub fn partition(
    ds: &Dataset,
    level: LevelId,
    scope: &CategoryScope,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels: Vec<_> = ds.trials.iter().map(|t| t.meta.gesture).collect();
    partition_labels(&labels, level, scope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_index_is_bijective() {
        for i in 0..NUM_GESTURES {
            let g = GestureClass::from_leaf_index(i).unwrap();
            assert_eq!(g.leaf_index(), i);
        }
        assert!(GestureClass::from_leaf_index(8).is_none());
    }

    #[test]
    fn left_hand_is_negative_at_level_one() {
        let g = GestureClass::new(Hand::Left, Fingers::Extension, Thumb::Abduction);
        assert_eq!(category_of(g, LevelId::Hand).l(), -1);
        assert_eq!(g.leaf_index(), 0);
    }

    #[test]
    fn thumb_projection() {
        let g = GestureClass::new(Hand::Right, Fingers::Flexion, Thumb::Adduction);
        assert_eq!(category_of(g, LevelId::Thumb).l(), 1);
        assert_eq!(g.leaf_index(), 7);
    }

    #[test]
    fn each_level_splits_leaves_evenly() {
        for level in LevelId::ALL {
            let pos = GestureClass::all()
                .iter()
                .filter(|g| category_of(**g, level).l() == 1)
                .count();
            assert_eq!(pos, 4);
        }
    }

    fn balanced_labels() -> Vec<GestureClass> {
        GestureClass::all()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g, 20))
            .collect()
    }

    #[test]
    fn pooled_hand_split_is_80_80() {
        let labels = balanced_labels();
        let (neg, pos) = partition_labels(&labels, LevelId::Hand, &CategoryScope::Pooled).unwrap();
        assert_eq!((neg.len(), pos.len()), (80, 80));
    }

    #[test]
    fn branch_thumb_split_is_20_20() {
        let labels = balanced_labels();
        let scope = CategoryScope::branch(&[Side::Neg, Side::Neg]);
        let (neg, pos) = partition_labels(&labels, LevelId::Thumb, &scope).unwrap();
        assert_eq!((neg.len(), pos.len()), (20, 20));
        for i in neg.iter().chain(&pos) {
            assert_eq!(labels[*i].hand, Hand::Left);
            assert_eq!(labels[*i].fingers, Fingers::Extension);
        }
    }

    #[test]
    fn empty_partition_is_an_error() {
        assert!(matches!(
            partition_labels(&[], LevelId::Hand, &CategoryScope::Pooled),
            Err(HcspError::Training(_))
        ));
    }

    #[test]
    fn missing_gesture_empties_a_branch() {
        // Drop (left, extension, adduction): the level-3 branch (left, extension)
        // loses its +1 side but pooled training still works.
        let labels: Vec<_> = balanced_labels()
            .into_iter()
            .filter(|g| g.leaf_index() != 1)
            .collect();
        assert!(partition_labels(&labels, LevelId::Thumb, &CategoryScope::Pooled).is_ok());
        let scope = CategoryScope::branch(&[Side::Neg, Side::Neg]);
        assert!(partition_labels(&labels, LevelId::Thumb, &scope).is_err());
    }

    #[test]
    fn branch_length_must_match_level() {
        let scope = CategoryScope::branch(&[Side::Neg]);
        assert!(matches!(
            partition_labels(&balanced_labels(), LevelId::Thumb, &scope),
            Err(HcspError::Parameter { .. })
        ));
    }

    #[test]
    fn level_serializes_as_number() {
        assert_eq!(serde_json::to_string(&LevelId::Fingers).unwrap(), "2");
        let l: LevelId = serde_json::from_str("3").unwrap();
        assert_eq!(l, LevelId::Thumb);
        assert!(serde_json::from_str::<LevelId>("4").is_err());
    }
}
