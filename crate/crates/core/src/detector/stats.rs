//! Where object centers fall within the image.

use std::collections::BTreeMap;

use crate::detector::data::SceneSpec;

/// Per-class counts in `[upper-left, upper-right, lower-left, lower-right]` order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuadrantStats {
    pub per_class: BTreeMap<usize, [usize; 4]>,
}

pub const UPPER_LEFT: usize = 0;
pub const UPPER_RIGHT: usize = 1;
pub const LOWER_LEFT: usize = 2;
pub const LOWER_RIGHT: usize = 3;

/// Quadrant of a center; points on a dividing line count as left / upper.
pub fn quadrant_of(cx: f64, cy: f64, size: usize) -> usize {
    let mid = size as f64 / 2.0;
    match (cx <= mid, cy <= mid) {
        (true, true) => UPPER_LEFT,
        (false, true) => UPPER_RIGHT,
        (true, false) => LOWER_LEFT,
        (false, false) => LOWER_RIGHT,
    }
}

pub fn quadrant_stats<'a>(scenes: impl IntoIterator<Item = &'a SceneSpec>) -> QuadrantStats {
    let mut stats = QuadrantStats::default();
    for scene in scenes {
        for o in &scene.objects {
            let (cx, cy) = o.bbox.center();
            stats.per_class.entry(o.class).or_default()[quadrant_of(cx, cy, scene.size)] += 1;
        }
    }
    stats
}

impl QuadrantStats {
    pub fn total(&self, class: usize) -> usize {
        self.per_class.get(&class).map_or(0, |c| c.iter().sum())
    }

    /// `class,ul,ur,ll,lr,total` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ul,ur,ll,lr,total\n");
        for (class, c) in &self.per_class {
            s.push_str(&format!(
                "{class},{},{},{},{},{}\n",
                c[0],
                c[1],
                c[2],
                c[3],
                c.iter().sum::<usize>()
            ));
        }
        s
    }
}
