//! Joint annotations in continuous pixel coordinates (origin top-left).

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Evaluated joints, in map order.
pub const JOINT_NAMES: [&str; 6] = [
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const NUM_JOINTS: usize = JOINT_NAMES.len();

/// Index of the mirrored joint.
pub const FLIP_PERMUTATION: [usize; NUM_JOINTS] = [3, 4, 5, 0, 1, 2];

pub const NECK: &str = "neck";
pub const HIP: &str = "hip";

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|&n| n == name)
}

/// Joints of one person plus the two torso anchors. A `None` joint is
/// occluded or outside the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub joints: [Option<Point>; NUM_JOINTS],
    pub neck: Point,
    pub hip: Point,
}

impl Annotation {
    pub fn torso_length(&self) -> f64 {
        (self.neck[0] - self.hip[0]).hypot(self.neck[1] - self.hip[1])
    }

    /// Torso reference point for the spatial model: the anchor midpoint.
    pub fn torso_center(&self) -> Point {
        [
            0.5 * (self.neck[0] + self.hip[0]),
            0.5 * (self.neck[1] + self.hip[1]),
        ]
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            joints: self.joints.map(|j| j.map(&f)),
            neck: f(self.neck),
            hip: f(self.hip),
        }
    }

    /// Mirror across the vertical axis of a `width`-pixel image, swapping
    /// left and right labels.
    pub fn flip_horizontal(&self, width: usize) -> Self {
        let w = width as f64;
        let m = self.map_points(|[x, y]| [w - x, y]);
        Self {
            joints: std::array::from_fn(|i| m.joints[FLIP_PERMUTATION[i]]),
            ..m
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        self.map_points(|[x, y]| [x * sx, y * sy])
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        self.map_points(|[x, y]| [x + dx, y + dy])
    }

    pub fn to_map(&self) -> BTreeMap<String, Point> {
        let mut m: BTreeMap<String, Point> = JOINT_NAMES
            .iter()
            .zip(&self.joints)
            .filter_map(|(n, j)| j.map(|p| (n.to_string(), p)))
            .collect();
        m.insert(NECK.into(), self.neck);
        m.insert(HIP.into(), self.hip);
        m
    }

    pub fn from_map(m: &BTreeMap<String, Point>) -> Result<Self> {
        for k in m.keys() {
            if k != NECK && k != HIP && joint_index(k).is_none() {
                return Err(Error::invalid(format!("unknown joint {k:?}")));
            }
        }
        let anchor = |name: &str| {
            m.get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("annotation lacks torso anchor {name:?}")))
        };
        if m.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite annotation coordinate"));
        }
        Ok(Self {
            joints: std::array::from_fn(|i| m.get(JOINT_NAMES[i]).copied()),
            neck: anchor(NECK)?,
            hip: anchor(HIP)?,
        })
    }
}

impl Serialize for Annotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<String, Point>::deserialize(d)?;
        Annotation::from_map(&m).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Annotation {
        Annotation {
            joints: [
                Some([10.0, 20.0]),
                Some([12.5, 30.0]),
                None,
                Some([40.0, 20.0]),
                Some([44.0, 31.0]),
                Some([47.0, 41.0]),
            ],
            neck: [25.0, 15.0],
            hip: [25.0, 60.0],
        }
    }

    #[test]
    fn json_round_trip_and_missing_joint() {
        let a = sample();
        let s = serde_json::to_string(&a).unwrap();
        assert!(!s.contains("l_wrist"));
        let b: Annotation = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<Annotation>(r#"{"neck":[1,2]}"#).is_err());
        assert!(
            serde_json::from_str::<Annotation>(r#"{"neck":[1,2],"hip":[1,3],"nose":[0,0]}"#)
                .is_err()
        );
    }

    #[test]
    fn flip_is_an_involution_and_swaps_sides() {
        let a = sample();
        let f = a.flip_horizontal(64);
        assert_eq!(f.joints[0], Some([24.0, 20.0]));
        assert_eq!(f.joints[5], None);
        assert_eq!(f.flip_horizontal(64), a);
    }

    #[test]
    fn torso_measures() {
        let a = sample();
        assert_eq!(a.torso_length(), 45.0);
        assert_eq!(a.torso_center(), [25.0, 37.5]);
        assert_eq!(a.scale(2.0, 2.0).torso_length(), 90.0);
    }
}
