//! Geometry of the hydrogen-passivated Si(100)-2x1 surface.
//!
//! Sites are addressed by dimer column, dimer row and the atom within the
//! dimer pair. Columns run along x, dimer rows along y, and the two atoms of
//! a dimer are separated along y by `d_dimer`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A surface site. Ordering is `(row, col, sub)`, used for canonical layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(i32, i32, u8)", into = "(i32, i32, u8)")]
pub struct LatticeSite {
    pub col: i32,
    pub row: i32,
    pub sub: u8,
}

impl LatticeSite {
    /// Panics if `sub` is not 0 or 1.
    pub fn new(col: i32, row: i32, sub: u8) -> Self {
        assert!(sub <= 1, "sub index must be 0 or 1, got {sub}");
        Self { col, row, sub }
    }

    /// Reflection `col -> axis2 - col`, where `axis2` is twice the mirror column.
    pub fn mirrored(self, axis2: i32) -> Self {
        Self {
            col: axis2 - self.col,
            ..self
        }
    }
}

impl TryFrom<(i32, i32, u8)> for LatticeSite {
    type Error = String;

    fn try_from((col, row, sub): (i32, i32, u8)) -> std::result::Result<Self, String> {
        if sub > 1 {
            return Err(format!("sub index must be 0 or 1, got {sub}"));
        }
        Ok(Self { col, row, sub })
    }
}

impl From<LatticeSite> for (i32, i32, u8) {
    fn from(s: LatticeSite) -> Self {
        (s.col, s.row, s.sub)
    }
}

impl Ord for LatticeSite {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.row, self.col, self.sub).cmp(&(other.row, other.col, other.sub))
    }
}

impl PartialOrd for LatticeSite {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for LatticeSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.col, self.row, self.sub)
    }
}

/// Lattice constants in Angstrom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeGeometry {
    pub a_col: f64,
    pub a_row: f64,
    pub d_dimer: f64,
    pub adjacency_cutoff: f64,
}

impl Default for LatticeGeometry {
    fn default() -> Self {
        Self {
            a_col: 3.84,
            a_row: 7.68,
            d_dimer: 2.25,
            adjacency_cutoff: 4.0,
        }
    }
}

impl LatticeGeometry {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a_col, self.a_row, self.d_dimer, self.adjacency_cutoff];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Geometry("lattice lengths must be positive".into()));
        }
        if !(self.d_dimer < self.a_col && self.a_col < self.a_row) {
            return Err(Error::Geometry(
                "expected d_dimer < a_col < a_row".into(),
            ));
        }
        if self.adjacency_cutoff <= self.d_dimer {
            return Err(Error::Geometry(
                "adjacency cutoff must exceed the intra-dimer spacing".into(),
            ));
        }
        Ok(())
    }

    /// Physical position `(x, y)` of a site in Angstrom.
    pub fn to_physical(&self, site: LatticeSite) -> (f64, f64) {
        (
            site.col as f64 * self.a_col,
            site.row as f64 * self.a_row + site.sub as f64 * self.d_dimer,
        )
    }

    /// Euclidean distance in Angstrom.
    ///
    /// Computed from integer index differences so that the result depends
    /// only on the relative placement of the two sites (mirror images give
    /// bit-identical distances).
    pub fn distance(&self, a: LatticeSite, b: LatticeSite) -> f64 {
        let dx = (a.col - b.col).abs() as f64 * self.a_col;
        let dy = (a.row - b.row) as f64 * self.a_row
            + (a.sub as i32 - b.sub as i32) as f64 * self.d_dimer;
        dx.hypot(dy.abs())
    }

    pub fn is_adjacent(&self, a: LatticeSite, b: LatticeSite) -> bool {
        debug_assert_ne!(a, b, "adjacency is undefined for a site and itself");
        a != b && self.distance(a, b) < self.adjacency_cutoff
    }
}

/// A set of occupied sites held in canonical `(row, col, sub)` order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<LatticeSite>", into = "Vec<LatticeSite>")]
pub struct DbLayout {
    sites: Vec<LatticeSite>,
}

impl DbLayout {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a layout, rejecting duplicates and adjacent pairs.
    pub fn new(sites: impl IntoIterator<Item = LatticeSite>, geom: &LatticeGeometry) -> Result<Self> {
        let layout = Self::raw(sites)?;
        layout.check_adjacency(geom)?;
        Ok(layout)
    }

    /// Builds a layout that may contain adjacent sites (raw simulation input).
    pub fn raw(sites: impl IntoIterator<Item = LatticeSite>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for s in sites {
            if !set.insert(s) {
                return Err(Error::DuplicateSite(s));
            }
        }
        Ok(Self {
            sites: set.into_iter().collect(),
        })
    }

    pub fn check_adjacency(&self, geom: &LatticeGeometry) -> Result<()> {
        for (i, &a) in self.sites.iter().enumerate() {
            for &b in &self.sites[i + 1..] {
                if geom.is_adjacent(a, b) {
                    return Err(Error::Adjacent(a, b));
                }
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> &[LatticeSite] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, site: LatticeSite) -> bool {
        self.sites.binary_search(&site).is_ok()
    }

    /// Position of `site` in canonical order.
    pub fn index_of(&self, site: LatticeSite) -> Option<usize> {
        self.sites.binary_search(&site).ok()
    }

    /// Inserts a site, keeping canonical order. Returns false if present.
    pub fn insert(&mut self, site: LatticeSite) -> bool {
        match self.sites.binary_search(&site) {
            Ok(_) => false,
            Err(pos) => {
                self.sites.insert(pos, site);
                true
            }
        }
    }

    pub fn union(&self, other: &DbLayout) -> DbLayout {
        let set: BTreeSet<_> = self.sites.iter().chain(other.sites.iter()).copied().collect();
        DbLayout {
            sites: set.into_iter().collect(),
        }
    }

    pub fn mirrored(&self, axis2: i32) -> DbLayout {
        let mut sites: Vec<_> = self.sites.iter().map(|s| s.mirrored(axis2)).collect();
        sites.sort();
        DbLayout { sites }
    }
}

impl TryFrom<Vec<LatticeSite>> for DbLayout {
    type Error = String;

    fn try_from(sites: Vec<LatticeSite>) -> std::result::Result<Self, String> {
        DbLayout::raw(sites).map_err(|e| e.to_string())
    }
}

impl From<DbLayout> for Vec<LatticeSite> {
    fn from(layout: DbLayout) -> Self {
        layout.sites
    }
}

impl FromIterator<LatticeSite> for DbLayout {
    /// Collects sites, silently dropping duplicates.
    fn from_iter<T: IntoIterator<Item = LatticeSite>>(iter: T) -> Self {
        let set: BTreeSet<_> = iter.into_iter().collect();
        DbLayout {
            sites: set.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(col: i32, row: i32, sub: u8) -> LatticeSite {
        LatticeSite::new(col, row, sub)
    }

    #[test]
    fn physical_positions() {
        let g = LatticeGeometry::default();
        assert_eq!(g.to_physical(s(0, 0, 0)), (0.0, 0.0));
        assert_eq!(g.to_physical(s(1, 0, 0)), (3.84, 0.0));
        let (x, y) = g.to_physical(s(0, 1, 1));
        assert_eq!(x, 0.0);
        assert!((y - 9.93).abs() < 1e-12);
    }

    #[test]
    fn distances() {
        let g = LatticeGeometry::default();
        assert_eq!(g.distance(s(2, 3, 1), s(2, 3, 1)), 0.0);
        assert!((g.distance(s(0, 0, 0), s(0, 0, 1)) - 2.25).abs() < 1e-12);
        let diag = g.distance(s(0, 0, 0), s(1, 0, 1));
        assert_eq!(diag, (3.84f64 * 3.84 + 2.25 * 2.25).sqrt());
        assert!((diag - 4.4506).abs() < 1e-4);
    }

    #[test]
    fn adjacency_cutoff() {
        let g = LatticeGeometry::default();
        assert!(g.is_adjacent(s(0, 0, 0), s(0, 0, 1)));
        assert!(g.is_adjacent(s(0, 0, 0), s(1, 0, 0)));
        assert!(!g.is_adjacent(s(0, 0, 0), s(1, 0, 1)));
        // across the dimer-row gap: 7.68 - 2.25 = 5.43
        assert!(!g.is_adjacent(s(0, 0, 1), s(0, 1, 0)));

        let wide = LatticeGeometry {
            adjacency_cutoff: 4.5,
            ..g
        };
        assert!(wide.is_adjacent(s(0, 0, 0), s(1, 0, 1)));
    }

    #[test]
    fn geometry_validation() {
        assert!(LatticeGeometry::default().validate().is_ok());
        let bad = LatticeGeometry {
            a_col: 8.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LatticeGeometry {
            adjacency_cutoff: 2.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layout_rejects_duplicates_and_adjacency() {
        let g = LatticeGeometry::default();
        assert!(matches!(
            DbLayout::raw([s(0, 0, 0), s(0, 0, 0)]),
            Err(Error::DuplicateSite(_))
        ));
        assert!(matches!(
            DbLayout::new([s(0, 0, 0), s(1, 0, 0)], &g),
            Err(Error::Adjacent(..))
        ));
        assert!(DbLayout::raw([s(0, 0, 0), s(1, 0, 0)]).is_ok());
        let l = DbLayout::new([s(3, 1, 0), s(0, 0, 0), s(0, 1, 1)], &g).unwrap();
        assert_eq!(l.sites(), &[s(0, 0, 0), s(0, 1, 1), s(3, 1, 0)]);
        assert_eq!(l.index_of(s(3, 1, 0)), Some(2));
    }

    #[test]
    fn site_serde_rejects_bad_sub() {
        assert!(serde_json::from_str::<LatticeSite>("[1,2,2]").is_err());
        let site: LatticeSite = serde_json::from_str("[-1,2,1]").unwrap();
        assert_eq!(site, s(-1, 2, 1));
    }

    fn site_strategy() -> impl Strategy<Value = LatticeSite> {
        (-20i32..20, -20i32..20, 0u8..2).prop_map(|(c, r, u)| LatticeSite::new(c, r, u))
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in site_strategy(), b in site_strategy(), c in site_strategy()) {
            let g = LatticeGeometry::default();
            prop_assert_eq!(g.distance(a, b), g.distance(b, a));
            prop_assert_eq!(g.distance(a, b) == 0.0, a == b);
            prop_assert!(g.distance(a, c) <= g.distance(a, b) + g.distance(b, c) + 1e-9);
        }

        #[test]
        fn adjacency_symmetric(a in site_strategy(), b in site_strategy()) {
            prop_assume!(a != b);
            let g = LatticeGeometry::default();
            prop_assert_eq!(g.is_adjacent(a, b), g.is_adjacent(b, a));
        }

        #[test]
        fn canonical_order_survives_serialization(sites in proptest::collection::vec(site_strategy(), 0..20)) {
            let layout: DbLayout = sites.into_iter().collect();
            let text = serde_json::to_string(&layout).unwrap();
            let back: DbLayout = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(layout.sites(), back.sites());
        }
    }
}
