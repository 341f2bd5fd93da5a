//! Domain types shared across the engine: features, domain labels, image
//! records, and the miner/pyramid configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keypoint position normalized by image width and height (x right, y down).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn is_normalized(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

/// One local feature: keypoint plus appearance descriptor.
///
/// Scale and orientation are carried through ingestion so files round-trip,
/// but matching only looks at `pos` and `desc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub pos: Point,
    pub scale: f32,
    pub orientation: f32,
    pub desc: Vec<f32>,
}

impl Feature {
    pub fn new(pos: Point, desc: Vec<f32>) -> Self {
        Self {
            pos,
            scale: 1.0,
            orientation: 0.0,
            desc,
        }
    }

    pub fn dim(&self) -> usize {
        self.desc.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Season {
    Sp,
    Su,
    Au,
    Wi,
    Other,
}

impl Season {
    pub const ALL: [Season; 5] = [Season::Sp, Season::Su, Season::Au, Season::Wi, Season::Other];
    /// The four calendar seasons, in the order used by generated worlds.
    pub const CALENDAR: [Season; 4] = [Season::Sp, Season::Su, Season::Au, Season::Wi];

    pub fn token(&self) -> &'static str {
        match self {
            Season::Sp => "SP",
            Season::Su => "SU",
            Season::Au => "AU",
            Season::Wi => "WI",
            Season::Other => "OTHER",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Season::Sp => 0,
            Season::Su => 1,
            Season::Au => 2,
            Season::Wi => 3,
            Season::Other => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Season> {
        Season::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SP" => Ok(Season::Sp),
            "SU" => Ok(Season::Su),
            "AU" => Ok(Season::Au),
            "WI" => Ok(Season::Wi),
            "OTHER" => Ok(Season::Other),
            _ => Err(Error::UnknownSeason(s.to_string())),
        }
    }
}

impl TryFrom<String> for Season {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Season> for String {
    fn from(s: Season) -> String {
        s.token().to_string()
    }
}

/// Acquisition domain of an image: season plus route identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub season: Season,
    pub route: u32,
}

impl DomainLabel {
    pub fn new(season: Season, route: u32) -> Self {
        Self { season, route }
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.season, self.route)
    }
}

/// An image reduced to its local features. Feature ordinals are the positions
/// in `features` and stay stable for the life of the record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub features: Vec<Feature>,
    pub domain: DomainLabel,
    pub place_id: Option<u64>,
}

impl ImageRecord {
    pub fn new(image_id: u64, domain: DomainLabel, features: Vec<Feature>) -> Self {
        Self {
            image_id,
            features,
            domain,
            place_id: None,
        }
    }

    pub fn with_place(mut self, place_id: u64) -> Self {
        self.place_id = Some(place_id);
        self
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Nearest-neighbour mining parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    /// Neighbours mined per query feature.
    pub k: usize,
    /// Neighbours mined per database feature.
    pub k_prime: usize,
    /// Truncation distance of the similarity, in descriptor units.
    pub d0: f64,
    /// Never return library features whose source image has the same id as
    /// the image being described.
    pub exclude_same_source: bool,
}

impl MinerConfig {
    pub const DEFAULT_K: usize = 10;
    pub const DEFAULT_K_PRIME: usize = 3;
    pub const DEFAULT_D0: f64 = 200.0;

    pub fn validate(&self) -> Result<()> {
        if self.k_prime < 1 {
            return Err(Error::InvalidConfig("k' must be at least 1".into()));
        }
        if self.k < self.k_prime {
            return Err(Error::InvalidConfig(format!(
                "k ({}) must be >= k' ({})",
                self.k, self.k_prime
            )));
        }
        if !(self.d0.is_finite() && self.d0 > 0.0) {
            return Err(Error::InvalidConfig(format!("D0 must be positive, got {}", self.d0)));
        }
        Ok(())
    }

    pub fn d0_squared(&self) -> f64 {
        self.d0 * self.d0
    }
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            k: Self::DEFAULT_K,
            k_prime: Self::DEFAULT_K_PRIME,
            d0: Self::DEFAULT_D0,
            exclude_same_source: false,
        }
    }
}

/// Spatial pyramid depth. Level `l` splits the image into a `2^l x 2^l` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: u8,
}

impl PyramidConfig {
    pub const DEFAULT_LEVELS: u8 = 2;
    /// Finest cells must fit in a `u16`.
    pub const MAX_LEVELS: u8 = 7;

    pub fn new(levels: u8) -> Result<Self> {
        let cfg = Self { levels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels > Self::MAX_LEVELS {
            return Err(Error::InvalidConfig(format!(
                "pyramid depth {} exceeds maximum {}",
                self.levels,
                Self::MAX_LEVELS
            )));
        }
        Ok(())
    }

    pub fn cells_at(level: u8) -> usize {
        1usize << (2 * level as usize)
    }

    pub fn finest_cells(&self) -> usize {
        Self::cells_at(self.levels)
    }

    /// Cells over all levels, `sum_{l=0}^{L} 4^l`.
    pub fn total_cells(&self) -> usize {
        (0..=self.levels).map(Self::cells_at).sum()
    }

    /// Kernel weight of level `l`: `1/2^L` for the whole image, `1/2^(L-l+1)`
    /// otherwise.
    pub fn level_weight(&self, level: u8) -> f64 {
        debug_assert!(level <= self.levels);
        let exp = if level == 0 {
            self.levels as i32
        } else {
            (self.levels - level) as i32 + 1
        };
        0.5f64.powi(exp)
    }
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: Self::DEFAULT_LEVELS,
        }
    }
}

/// Grid coordinates of `pos` at `level`, with 1.0 clamped into the last cell.
pub fn grid_of(pos: Point, level: u8) -> (u32, u32) {
    let side = 1u32 << level;
    let scale = side as f64;
    let clamp = |v: f32| -> u32 {
        let g = (v as f64 * scale).floor();
        if g <= 0.0 {
            0
        } else {
            (g as u32).min(side - 1)
        }
    };
    (clamp(pos.x), clamp(pos.y))
}

/// Row-major cell index of `pos` at `level`, in `[0, 4^level)`.
pub fn cell_of(pos: Point, level: u8) -> u32 {
    let (gx, gy) = grid_of(pos, level);
    (gy << level) | gx
}

/// Maps a cell index at `from` to the enclosing cell at the coarser level `to`.
pub fn ancestor(cell: u32, from: u8, to: u8) -> u32 {
    debug_assert!(to <= from);
    let side = 1u32 << from;
    let (gx, gy) = (cell % side, cell / side);
    let shift = from - to;
    let (ax, ay) = (gx >> shift, gy >> shift);
    (ay << to) | ax
}

/// Normalized bounding box `[x0, y0, x1, y1]` of a cell.
pub fn cell_bounds(cell: u32, level: u8) -> [f64; 4] {
    let side = 1u32 << level;
    let (gx, gy) = (cell % side, cell / side);
    let w = 1.0 / side as f64;
    [
        gx as f64 * w,
        gy as f64 * w,
        (gx + 1) as f64 * w,
        (gy + 1) as f64 * w,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cell_of_examples() {
        assert_eq!(grid_of(Point::new(0.6, 0.3), 2), (2, 1));
        assert_eq!(cell_of(Point::new(0.6, 0.3), 2), 6);
        assert_eq!(cell_of(Point::new(1.0, 1.0), 1), 3);
        assert_eq!(cell_of(Point::new(0.0, 0.0), 0), 0);
        assert_eq!(cell_of(Point::new(1.0, 0.25), 0), 0);
    }

    #[test]
    fn pyramid_counts_and_weights() {
        let pyr = PyramidConfig::default();
        assert_eq!(pyr.total_cells(), 21);
        assert_eq!(pyr.finest_cells(), 16);
        assert_eq!(pyr.level_weight(0), 0.25);
        assert_eq!(pyr.level_weight(1), 0.25);
        assert_eq!(pyr.level_weight(2), 0.5);
        assert_eq!(PyramidConfig { levels: 0 }.level_weight(0), 1.0);
        assert!(PyramidConfig::new(8).is_err());
    }

    #[test]
    fn miner_config_validation() {
        assert!(MinerConfig::default().validate().is_ok());
        let bad_d0 = MinerConfig { d0: 0.0, ..Default::default() };
        assert!(bad_d0.validate().is_err());
        let bad_k = MinerConfig { k: 2, k_prime: 3, ..Default::default() };
        assert!(bad_k.validate().is_err());
    }

    #[test]
    fn season_tokens() {
        for s in Season::ALL {
            assert_eq!(s.token().parse::<Season>().unwrap(), s);
            assert_eq!(Season::from_code(s.code()), Some(s));
        }
        assert!(matches!("XX".parse::<Season>(), Err(Error::UnknownSeason(_))));
    }

    #[test]
    fn cell_bounds_cover_the_grid() {
        assert_eq!(cell_bounds(0, 0), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(cell_bounds(6, 2), [0.5, 0.25, 0.75, 0.5]);
    }

    proptest! {
        #[test]
        fn cells_nest(x in 0.0f32..=1.0, y in 0.0f32..=1.0, level in 1u8..=7) {
            let p = Point::new(x, y);
            let fine = cell_of(p, level);
            prop_assert!((fine as usize) < PyramidConfig::cells_at(level));
            let (gx, gy) = grid_of(p, level);
            prop_assert_eq!(grid_of(p, level - 1), (gx / 2, gy / 2));
            for to in 0..=level {
                prop_assert_eq!(ancestor(fine, level, to), cell_of(p, to));
            }
        }
    }
}
