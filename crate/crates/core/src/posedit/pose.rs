use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSE_DIM: usize = 6;
pub const ROLES: usize = 2;
pub const DIM_NAMES: [&str; POSE_DIM] = ["x", "y", "z", "roll", "pitch", "yaw"];

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6D {
    /// Planar pose with zero roll and pitch.
    pub fn se2(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose6D {
            x,
            y,
            z,
            roll: 0.0,
            pitch: 0.0,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn to_array(&self) -> [f64; POSE_DIM] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(a: [f64; POSE_DIM]) -> Self {
        Pose6D {
            x: a[0],
            y: a[1],
            z: a[2],
            roll: a[3],
            pitch: a[4],
            yaw: a[5],
        }
    }

    pub fn dist_xy(&self, other: &Pose6D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_xyz(&self, other: &Pose6D) -> f64 {
        let dz = self.z - other.z;
        (self.dist_xy(other).powi(2) + dz * dz).sqrt()
    }
}

/// One (pick, place) pair per plan step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrajectory {
    pub steps: Vec<[Pose6D; ROLES]>,
}

impl PoseTrajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn pick(&self, k: usize) -> &Pose6D {
        &self.steps[k][0]
    }

    pub fn place(&self, k: usize) -> &Pose6D {
        &self.steps[k][1]
    }

    /// `[T][2][6]` nested arrays.
    pub fn to_nested(&self) -> Vec<[[f64; POSE_DIM]; ROLES]> {
        self.steps
            .iter()
            .map(|s| [s[0].to_array(), s[1].to_array()])
            .collect()
    }

    pub fn truncate(&self, horizon: usize) -> PoseTrajectory {
        PoseTrajectory {
            steps: self.steps[..horizon.min(self.steps.len())].to_vec(),
        }
    }
}

/// Per-dimension bounds used to map poses affinely onto `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub lo: [f64; POSE_DIM],
    pub hi: [f64; POSE_DIM],
}

impl Default for Workspace {
    /// A 1 m × 1 m table with `x ∈ [0, 1]`, `y ∈ [−0.5, 0.5]`, up to 0.3 m
    /// above it; angles span `[−π, π]` so they normalize as `angle / π`.
    fn default() -> Self {
        Workspace {
            lo: [0.0, -0.5, 0.0, -PI, -PI, -PI],
            hi: [1.0, 0.5, 0.3, PI, PI, PI],
        }
    }
}

impl Workspace {
    pub fn center(&self) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| 0.5 * (self.lo[i] + self.hi[i]))
    }

    pub fn normalize_pose(&self, p: &Pose6D) -> Result<[f64; POSE_DIM]> {
        let mut a = p.to_array();
        for ang in 3..POSE_DIM {
            a[ang] = wrap_angle(a[ang]);
        }
        let mut out = [0.0; POSE_DIM];
        for i in 0..POSE_DIM {
            let v = a[i];
            if !v.is_finite() || v < self.lo[i] || v > self.hi[i] {
                return Err(Error::OutsideWorkspace {
                    dim: DIM_NAMES[i],
                    value: v,
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
            out[i] = 2.0 * (v - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0;
        }
        Ok(out)
    }

    pub fn denormalize_pose(&self, n: &[f64; POSE_DIM]) -> Pose6D {
        let a: [f64; POSE_DIM] =
            std::array::from_fn(|i| self.lo[i] + 0.5 * (n[i] + 1.0) * (self.hi[i] - self.lo[i]));
        Pose6D::from_array(a)
    }

    /// Flat `[T, 2, 6]` normalized values.
    pub fn normalize(&self, traj: &PoseTrajectory) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(traj.horizon() * ROLES * POSE_DIM);
        for step in &traj.steps {
            for p in step {
                out.extend(self.normalize_pose(p)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Workspace::normalize`]. Values outside `[−1, 1]` are
    /// clamped first; the flag reports whether that happened.
    pub fn denormalize(&self, flat: &[f64]) -> Result<(PoseTrajectory, bool)> {
        if flat.len() % (ROLES * POSE_DIM) != 0 {
            return Err(Error::invalid(
                "denormalize",
                format!("{} values do not form [T, 2, 6]", flat.len()),
            ));
        }
        let mut clamped = false;
        let steps = flat
            .chunks_exact(ROLES * POSE_DIM)
            .map(|s| {
                let mut pose = |r: usize| {
                    let n: [f64; POSE_DIM] = std::array::from_fn(|i| {
                        let v = s[r * POSE_DIM + i];
                        let c = v.clamp(-1.0, 1.0);
                        clamped |= c != v;
                        c
                    });
                    let mut p = self.denormalize_pose(&n);
                    p.roll = wrap_angle(p.roll);
                    p.pitch = wrap_angle(p.pitch);
                    p.yaw = wrap_angle(p.yaw);
                    p
                };
                [pose(0), pose(1)]
            })
            .collect();
        Ok((PoseTrajectory { steps }, clamped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_maps_to_zero_and_corner_to_minus_one() {
        let w = Workspace::default();
        let c = w.center();
        assert_eq!(w.normalize_pose(&Pose6D::from_array(c)).unwrap(), [0.0; 6]);
        let lo = w
            .normalize_pose(&Pose6D::from_array([0.0, -0.5, 0.0, 0.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(&lo[..3], &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn outside_names_dimension() {
        let w = Workspace::default();
        let e = w
            .normalize_pose(&Pose6D::se2(0.5, 0.7, 0.05, 0.0))
            .unwrap_err();
        assert!(matches!(e, Error::OutsideWorkspace { dim: "y", .. }), "{e}");
    }

    #[test]
    fn yaw_normalizes_over_pi() {
        let w = Workspace::default();
        let n = w
            .normalize_pose(&Pose6D::se2(0.5, 0.0, 0.1, PI / 2.0))
            .unwrap();
        assert!((n[5] - 0.5).abs() < 1e-15);
        let n = w
            .normalize_pose(&Pose6D::se2(0.5, 0.0, 0.1, 3.0 * PI / 2.0))
            .unwrap();
        assert!((n[5] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.1 - 2.0 * PI) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clamping_flagged() {
        let w = Workspace::default();
        let mut flat = vec![0.0; 12];
        assert!(!w.denormalize(&flat).unwrap().1);
        flat[0] = 1.5;
        let (t, c) = w.denormalize(&flat).unwrap();
        assert!(c);
        assert_eq!(t.pick(0).x, 1.0);
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec((0.0f64..1.0, -0.5f64..0.5, 0.0f64..0.3, -3.1f64..3.1, -3.1f64..3.1, -3.1f64..3.1), 2..8)) {
            let w = Workspace::default();
            let poses: Vec<Pose6D> = vals.iter().map(|&(x, y, z, r, p, yaw)| Pose6D { x, y, z, roll: r, pitch: p, yaw }).collect();
            let traj = PoseTrajectory { steps: poses.chunks_exact(2).map(|c| [c[0], c[1]]).collect() };
            let (back, clamped) = w.denormalize(&w.normalize(&traj).unwrap()).unwrap();
            prop_assert!(!clamped);
            for (a, b) in traj.steps.iter().flatten().zip(back.steps.iter().flatten()) {
                for (u, v) in a.to_array().iter().zip(b.to_array()) {
                    prop_assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }
}
