//! Discrete grasp space: bucket indices relative to an object's bounding box.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::geometry::{Aabb, P3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraspError {
    #[error("grasp dimensionality must be 4 or 6, got {0}")]
    BadDimension(usize),
    #[error("buckets per dimension must be in [2, 256], got {0}")]
    BadBuckets(usize),
    #[error("grasp has {got} dimensions, spec expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bucket {bucket} out of range in dimension {dim}")]
    BucketOutOfRange { dim: usize, bucket: u8 },
    #[error("{axis} = {value} lies outside [{lo}, {hi}]")]
    OutOfBounds {
        axis: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// Semantic meaning of one grasp dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraspDim {
    X,
    Y,
    Z,
    Yaw,
    Pitch,
    Roll,
}

impl GraspDim {
    pub fn name(self) -> &'static str {
        match self {
            GraspDim::X => "x",
            GraspDim::Y => "y",
            GraspDim::Z => "z",
            GraspDim::Yaw => "yaw",
            GraspDim::Pitch => "pitch",
            GraspDim::Roll => "roll",
        }
    }

    /// Fixed range for angular dimensions.
    pub fn angular_range(self) -> Option<(f64, f64)> {
        match self {
            GraspDim::Yaw => Some((0.0, PI)),
            GraspDim::Pitch | GraspDim::Roll => Some((-FRAC_PI_2, FRAC_PI_2)),
            _ => None,
        }
    }
}

const DIMS6: [GraspDim; 6] = [
    GraspDim::X,
    GraspDim::Y,
    GraspDim::Z,
    GraspDim::Yaw,
    GraspDim::Pitch,
    GraspDim::Roll,
];

pub const DEFAULT_BUCKETS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraspSpec {
    n: usize,
    buckets: usize,
}

impl Default for GraspSpec {
    fn default() -> Self {
        Self {
            n: 4,
            buckets: DEFAULT_BUCKETS,
        }
    }
}

impl GraspSpec {
    pub fn new(n: usize, buckets: usize) -> Result<Self, GraspError> {
        if n != 4 && n != 6 {
            return Err(GraspError::BadDimension(n));
        }
        if !(2..=256).contains(&buckets) {
            return Err(GraspError::BadBuckets(buckets));
        }
        Ok(Self { n, buckets })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn dims(&self) -> &'static [GraspDim] {
        &DIMS6[..self.n]
    }

    /// Size of the discrete grasp space, `buckets^n`.
    pub fn grasp_count(&self) -> u64 {
        (self.buckets as u64).pow(self.n as u32)
    }

    pub fn validate(&self, g: &Grasp) -> Result<(), GraspError> {
        if g.0.len() != self.n {
            return Err(GraspError::LengthMismatch {
                expected: self.n,
                got: g.0.len(),
            });
        }
        for (dim, &b) in g.0.iter().enumerate() {
            if b as usize >= self.buckets {
                return Err(GraspError::BucketOutOfRange { dim, bucket: b });
            }
        }
        Ok(())
    }

    /// Mixed-radix index with the first dimension most significant.
    pub fn index_of(&self, g: &Grasp) -> u64 {
        g.0.iter()
            .fold(0u64, |acc, &b| acc * self.buckets as u64 + b as u64)
    }

    pub fn grasp_at(&self, mut index: u64) -> Grasp {
        let mut dims = vec![0u8; self.n];
        for d in dims.iter_mut().rev() {
            *d = (index % self.buckets as u64) as u8;
            index /= self.buckets as u64;
        }
        Grasp(dims)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Grasp {
        Grasp(
            (0..self.n)
                .map(|_| rng.random_range(0..self.buckets) as u8)
                .collect(),
        )
    }

    /// Bucket index of `value` within `[lo, hi]`; the upper boundary clamps into the last bucket.
    pub fn bucket_of(&self, value: f64, lo: f64, hi: f64) -> u8 {
        if hi <= lo {
            return 0;
        }
        let b = (self.buckets as f64 * (value - lo) / (hi - lo)).floor();
        b.clamp(0.0, (self.buckets - 1) as f64) as u8
    }

    pub fn bucket_center(&self, bucket: u8, lo: f64, hi: f64) -> f64 {
        lo + (bucket as f64 + 0.5) * (hi - lo) / self.buckets as f64
    }
}

/// A discrete grasp: one bucket index per dimension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Grasp(pub Vec<u8>);

impl Grasp {
    pub fn dims(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Display for Grasp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Gripper center in the world frame and its orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousPose {
    pub position: P3,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl ContinuousPose {
    pub fn upright(position: P3, yaw: f64) -> Self {
        Self {
            position,
            yaw,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    fn angle(&self, dim: GraspDim) -> f64 {
        match dim {
            GraspDim::Yaw => self.yaw,
            GraspDim::Pitch => self.pitch,
            GraspDim::Roll => self.roll,
            _ => unreachable!(),
        }
    }
}

const BOUNDS_TOL: f64 = 1e-9;

pub fn bucketize(pose: &ContinuousPose, bbox: &Aabb, spec: &GraspSpec) -> Result<Grasp, GraspError> {
    let mut dims = Vec::with_capacity(spec.n);
    for &dim in spec.dims() {
        let (value, lo, hi) = match dim {
            GraspDim::X | GraspDim::Y | GraspDim::Z => {
                let k = dim as usize;
                (pose.position[k], bbox.min[k], bbox.max[k])
            }
            GraspDim::Yaw => {
                // Parallel-jaw symmetry: yaw and yaw + π are the same grasp.
                (pose.yaw.rem_euclid(PI), 0.0, PI)
            }
            _ => {
                let (lo, hi) = dim.angular_range().unwrap();
                (pose.angle(dim), lo, hi)
            }
        };
        if value < lo - BOUNDS_TOL || value > hi + BOUNDS_TOL || value.is_nan() {
            return Err(GraspError::OutOfBounds {
                axis: dim.name(),
                value,
                lo,
                hi,
            });
        }
        dims.push(spec.bucket_of(value, lo, hi));
    }
    Ok(Grasp(dims))
}

/// Bucket-center pose of a grasp.
pub fn debucketize(g: &Grasp, bbox: &Aabb, spec: &GraspSpec) -> ContinuousPose {
    debug_assert!(spec.validate(g).is_ok());
    let mut pose = ContinuousPose::upright(bbox.center(), 0.0);
    for (&dim, &b) in spec.dims().iter().zip(&g.0) {
        match dim {
            GraspDim::X | GraspDim::Y | GraspDim::Z => {
                let k = dim as usize;
                pose.position[k] = spec.bucket_center(b, bbox.min[k], bbox.max[k]);
            }
            _ => {
                let (lo, hi) = dim.angular_range().unwrap();
                let v = spec.bucket_center(b, lo, hi);
                match dim {
                    GraspDim::Yaw => pose.yaw = v,
                    GraspDim::Pitch => pose.pitch = v,
                    _ => pose.roll = v,
                }
            }
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn box10() -> Aabb {
        Aabb::new(P3::new(0.0, -0.02, 0.0), P3::new(0.10, 0.03, 0.07))
    }

    fn at_x(x: f64) -> u8 {
        let pose = ContinuousPose::upright(P3::new(x, 0.0, 0.01), 0.3);
        bucketize(&pose, &box10(), &GraspSpec::default()).unwrap().0[0]
    }

    #[test]
    fn x_bucket_examples() {
        assert_eq!(at_x(0.0), 0);
        assert_eq!(at_x(0.10), 19);
        assert_eq!(at_x(0.051), 10);
    }

    #[test]
    fn bucket_centers() {
        let spec = GraspSpec::default();
        assert!((spec.bucket_center(0, 0.0, 0.10) - 0.0025).abs() < 1e-15);
        assert!((spec.bucket_center(19, 0.0, 0.10) - 0.0975).abs() < 1e-15);
    }

    #[test]
    fn grasp_counts() {
        assert_eq!(GraspSpec::new(4, 20).unwrap().grasp_count(), 160_000);
        assert_eq!(GraspSpec::new(6, 20).unwrap().grasp_count(), 64_000_000);
        assert_eq!(GraspSpec::new(4, 5).unwrap().grasp_count(), 625);
        assert!(GraspSpec::new(5, 20).is_err());
        assert!(GraspSpec::new(4, 1).is_err());
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let pose = ContinuousPose::upright(P3::new(0.1 + 1e-6, 0.0, 0.01), 0.0);
        assert!(matches!(
            bucketize(&pose, &box10(), &GraspSpec::default()),
            Err(GraspError::OutOfBounds { axis: "x", .. })
        ));
        let pose = ContinuousPose::upright(P3::new(0.1 + 1e-10, 0.0, 0.01), 0.0);
        assert!(bucketize(&pose, &box10(), &GraspSpec::default()).is_ok());
    }

    #[test]
    fn exhaustive_round_trip_n4() {
        let spec = GraspSpec::default();
        let bbox = box10();
        for idx in 0..spec.grasp_count() {
            let g = spec.grasp_at(idx);
            assert_eq!(spec.index_of(&g), idx);
            let back = bucketize(&debucketize(&g, &bbox, &spec), &bbox, &spec).unwrap();
            assert_eq!(back, g);
        }
    }

    proptest! {
        #[test]
        fn round_trip_n6(idx in 0u64..64_000_000) {
            let spec = GraspSpec::new(6, 20).unwrap();
            let g = spec.grasp_at(idx);
            let back = bucketize(&debucketize(&g, &box10(), &spec), &box10(), &spec).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn monotone_per_dimension(a in 0.0f64..=0.10, b in 0.0f64..=0.10) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(at_x(lo) <= at_x(hi));
        }

        #[test]
        fn translation_invariant(idx in 0u64..160_000, dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in 0.0f64..1.0) {
            let spec = GraspSpec::default();
            let g = spec.grasp_at(idx);
            let bbox = box10();
            let pose = debucketize(&g, &bbox, &spec);
            let shift = crate::geometry::V3::new(dx, dy, dz);
            let moved_box = Aabb::new(bbox.min + shift, bbox.max + shift);
            let moved_pose = ContinuousPose { position: pose.position + shift, ..pose };
            prop_assert_eq!(bucketize(&moved_pose, &moved_box, &spec).unwrap(), g);
        }
    }
}
