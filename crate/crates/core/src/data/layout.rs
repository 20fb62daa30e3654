use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::priors::{AuCatalog, AuGroup, Region};

/// Anatomical part a landmark belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Eyebrows,
    Eyes,
    Nose,
    Cheeks,
    Mouth,
    Chin,
    /// Landmarks of generated test layouts.
    Grid,
}

impl Part {
    pub fn region(self) -> Region {
        match self {
            Part::Eyebrows | Part::Eyes => Region::Upper,
            _ => Region::Lower,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    /// `(x, y)` on the unit face plane, y pointing down.
    pub pos: [f64; 2],
    pub part: Part,
}

/// ROI centres `p_k` on a unit face plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiLayout {
    pub landmarks: Vec<Landmark>,
}

fn arc(n: usize, from: [f64; 2], to: [f64; 2], bulge: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let x = from[0] + t * (to[0] - from[0]);
            let y = from[1] + t * (to[1] - from[1]) - bulge * (PI * t).sin();
            [x, y]
        })
        .collect()
}

fn ellipse(n: usize, centre: [f64; 2], rx: f64, ry: f64, start: f64, dir: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let a = start + dir * 2.0 * PI * i as f64 / n as f64;
            [centre[0] + rx * a.cos(), centre[1] - ry * a.sin()]
        })
        .collect()
}

impl RoiLayout {
    /// The 65-landmark layout: 13 eyebrow, 12 eye, 9 nose, 4 cheek, 20 mouth
    /// and 7 chin points, in that index order.
    pub fn standard() -> Self {
        let mut lm = Vec::with_capacity(65);
        let mut put = |pts: Vec<[f64; 2]>, part| {
            lm.extend(pts.into_iter().map(|pos| Landmark { pos, part }));
        };
        // Brows: right outer→inner, left inner→outer, two forehead points, glabella.
        let mut brows = arc(5, [0.18, 0.30], [0.43, 0.28], 0.04);
        brows.extend(arc(5, [0.57, 0.28], [0.82, 0.30], 0.04));
        brows.extend([[0.30, 0.20], [0.70, 0.20], [0.50, 0.29]]);
        put(brows, Part::Eyebrows);
        // Eyes: each starts at its corner nearest x = 0, runs over the upper lid
        // to the far corner and back along the lower lid.
        let mut eyes = ellipse(6, [0.33, 0.38], 0.075, 0.03, PI, -1.0);
        eyes.extend(ellipse(6, [0.67, 0.38], 0.075, 0.03, PI, -1.0));
        put(eyes, Part::Eyes);
        // Nose: bridge top→tip, then nostrils left→right.
        let mut nose = arc(4, [0.50, 0.40], [0.50, 0.55], 0.0);
        nose.extend(arc(5, [0.43, 0.60], [0.57, 0.60], -0.02));
        put(nose, Part::Nose);
        put(vec![[0.22, 0.55], [0.78, 0.55], [0.30, 0.66], [0.70, 0.66]], Part::Cheeks);
        // Mouth: 12 outer lip points from the right corner, then 8 inner.
        let mut mouth = ellipse(12, [0.50, 0.77], 0.14, 0.06, PI, -1.0);
        mouth.extend(ellipse(8, [0.50, 0.77], 0.08, 0.02, PI, -1.0));
        put(mouth, Part::Mouth);
        put(arc(7, [0.26, 0.84], [0.74, 0.84], -0.12), Part::Chin);
        Self { landmarks: lm }
    }

    /// `n` landmarks on a square grid, all tagged [`Part::Grid`].
    pub fn grid(n: usize) -> Self {
        let side = (n as f64).sqrt().ceil().max(1.0) as usize;
        let landmarks = (0..n)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                Landmark {
                    pos: [(c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64],
                    part: Part::Grid,
                }
            })
            .collect();
        Self { landmarks }
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn indices_of(&self, part: Part) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.landmarks[i].part == part).collect()
    }

    /// The standard four-group catalog over this layout.
    ///
    /// Where a group takes only part of a secondary area: group 1 skips the
    /// two outer lower-lid points, group 2 skips the last inner-lip point,
    /// group 3 keeps the five central chin points and group 4 skips the two
    /// upper nose-bridge points.
    pub fn standard_catalog(&self) -> AuCatalog {
        let part = |p| self.indices_of(p);
        let (brows, eyes, nose, cheeks, mouth, chin) = (
            part(Part::Eyebrows),
            part(Part::Eyes),
            part(Part::Nose),
            part(Part::Cheeks),
            part(Part::Mouth),
            part(Part::Chin),
        );
        let cat = |lists: &[&[usize]]| lists.concat();
        let eyes_no_outer_lower: Vec<usize> = eyes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 5 && i != 10)
            .map(|(_, &k)| k)
            .collect();
        let groups = vec![
            AuGroup {
                aus: vec![1, 2, 4],
                region: Region::Upper,
                primary: brows.clone(),
                secondary: eyes_no_outer_lower,
            },
            AuGroup {
                aus: vec![5, 6, 7],
                region: Region::Upper,
                primary: eyes.clone(),
                secondary: cat(&[&brows, &cheeks, &mouth[..19]]),
            },
            AuGroup {
                aus: vec![9, 10],
                region: Region::Lower,
                primary: cat(&[&nose, &cheeks]),
                secondary: cat(&[&mouth, &chin[1..6]]),
            },
            AuGroup {
                aus: vec![12, 14, 15, 17],
                region: Region::Lower,
                primary: mouth.clone(),
                secondary: cat(&[&eyes, &brows, &nose[2..]]),
            },
        ];
        AuCatalog {
            roi_count: self.len(),
            groups,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::catalog::STANDARD_GROUP_SIZES;

    #[test]
    fn standard_layout_shape() {
        let l = RoiLayout::standard();
        assert_eq!(l.len(), 65);
        let counts: Vec<usize> = [Part::Eyebrows, Part::Eyes, Part::Nose, Part::Cheeks, Part::Mouth, Part::Chin]
            .iter()
            .map(|&p| l.indices_of(p).len())
            .collect();
        assert_eq!(counts, [13, 12, 9, 4, 20, 7]);
        for m in &l.landmarks {
            assert!(m.pos.iter().all(|v| (0.0..=1.0).contains(v)), "{m:?}");
        }
        // Eyes sit above the mouth.
        let max_eye = l.indices_of(Part::Eyes).iter().map(|&i| l.landmarks[i].pos[1]).fold(0.0, f64::max);
        let min_mouth = l.indices_of(Part::Mouth).iter().map(|&i| l.landmarks[i].pos[1]).fold(1.0, f64::min);
        assert!(max_eye < min_mouth);
    }

    #[test]
    fn group_sizes_follow_table() {
        let c = RoiLayout::standard().standard_catalog();
        assert_eq!(c.roi_counts(), STANDARD_GROUP_SIZES);
    }

    #[test]
    fn grid_layout() {
        let l = RoiLayout::grid(8);
        assert_eq!(l.len(), 8);
        assert!(l.landmarks.iter().all(|m| m.pos.iter().all(|v| (0.0..1.0).contains(v))));
    }
}
