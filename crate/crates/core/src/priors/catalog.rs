use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Facial half an AU's primary muscles act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Upper,
    Lower,
}

/// One AU group: the AUs it yields and the ROIs it reads, split into the
/// primary muscle area and the secondary (coordinated) area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuGroup {
    pub aus: Vec<u32>,
    pub region: Region,
    pub primary: Vec<usize>,
    #[serde(default)]
    pub secondary: Vec<usize>,
}

impl AuGroup {
    /// ROI indices in network order: primary, then secondary.
    pub fn rois(&self) -> Vec<usize> {
        self.primary.iter().chain(&self.secondary).copied().collect()
    }
}

/// Ordered AU catalog with its ROI grouping.
///
/// Node order everywhere downstream is the catalog order, which is the
/// concatenation of the groups' AU lists. Upper groups must precede lower
/// groups so that the upper half of the node list is contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuCatalog {
    pub roi_count: usize,
    pub groups: Vec<AuGroup>,
}

/// The 12 AUs modelled by default.
pub const STANDARD_AUS: [u32; 12] = [1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17];

/// ROI counts of the four standard groups.
pub const STANDARD_GROUP_SIZES: [usize; 4] = [23, 48, 38, 52];

impl AuCatalog {
    /// The standard 12-AU, 4-group, 65-ROI catalog. ROI membership is
    /// derived from [`RoiLayout::standard`](crate::data::RoiLayout::standard).
    pub fn standard() -> Self {
        crate::data::RoiLayout::standard().standard_catalog()
    }

    /// Checks internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("catalog.groups", "at least one group required"));
        }
        if self.au_count() > 64 {
            return Err(Error::config("catalog.groups", "at most 64 AUs are supported"));
        }
        let mut seen = Vec::new();
        let mut lower_started = false;
        for (g, group) in self.groups.iter().enumerate() {
            let path = format!("catalog.groups[{g}]");
            if group.aus.is_empty() {
                return Err(Error::config(format!("{path}.aus"), "group yields no AU"));
            }
            if group.primary.is_empty() {
                return Err(Error::config(format!("{path}.primary"), "group has no primary ROI"));
            }
            let rois = group.rois();
            if let Some(&bad) = rois.iter().find(|&&r| r >= self.roi_count) {
                return Err(Error::config(
                    format!("{path}.primary"),
                    format!("ROI {bad} outside 0..{}", self.roi_count),
                ));
            }
            let mut sorted = rois.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != rois.len() {
                return Err(Error::config(format!("{path}.secondary"), "ROI listed twice in one group"));
            }
            for &au in &group.aus {
                if seen.contains(&au) {
                    return Err(Error::config(format!("{path}.aus"), format!("AU{au} listed twice")));
                }
                seen.push(au);
            }
            match group.region {
                Region::Lower => lower_started = true,
                Region::Upper if lower_started => {
                    return Err(Error::config(
                        format!("{path}.region"),
                        "upper groups must precede lower groups",
                    ))
                }
                Region::Upper => {}
            }
        }
        Ok(())
    }

    pub fn au_ids(&self) -> Vec<u32> {
        self.groups.iter().flat_map(|g| g.aus.iter().copied()).collect()
    }

    pub fn au_count(&self) -> usize {
        self.groups.iter().map(|g| g.aus.len()).sum()
    }

    /// Catalog index of an AU id.
    pub fn index_of(&self, au: u32) -> Option<usize> {
        self.au_ids().iter().position(|&a| a == au)
    }

    /// Group index (0-based) of the AU at catalog index `node`.
    pub fn group_of(&self, node: usize) -> usize {
        let mut start = 0;
        for (g, group) in self.groups.iter().enumerate() {
            if node < start + group.aus.len() {
                return g;
            }
            start += group.aus.len();
        }
        panic!("node {node} outside catalog of {} AUs", self.au_count());
    }

    /// Region of the AU at catalog index `node`.
    pub fn region_of(&self, node: usize) -> Region {
        self.groups[self.group_of(node)].region
    }

    pub fn regions(&self) -> Vec<Region> {
        (0..self.au_count()).map(|i| self.region_of(i)).collect()
    }

    /// Catalog indices of the nodes in `region`, in order.
    pub fn nodes_in(&self, region: Region) -> Vec<usize> {
        (0..self.au_count()).filter(|&i| self.region_of(i) == region).collect()
    }

    /// `N_{g_AU}` for every group.
    pub fn au_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.aus.len()).collect()
    }

    /// `N_g` for every group.
    pub fn roi_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.primary.len() + g.secondary.len()).collect()
    }
}
