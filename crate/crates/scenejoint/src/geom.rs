//! Planar rigid-pose math and relative positional embeddings.
//!
//! Every agent and lane carries its own local coordinate frame; the
//! relationship between two frames is summarized by a five-dimensional
//! embedding [sin α, cos α, sin β, cos β, ‖d‖] where α is the heading
//! difference, β the azimuth of the displacement relative to the target
//! frame's heading, and ‖d‖ the distance between frame origins.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Headings shorter than this are rejected at construction.
pub const MIN_HEADING_NORM: f64 = 1e-9;

/// Displacements shorter than this use the degenerate azimuth (sin 0, cos 1).
pub const MIN_AZIMUTH_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("heading vector norm {0} is below {MIN_HEADING_NORM}")]
    DegenerateHeading(f64),
}

/// A 2D vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// 2D cross product a×b = a.x·b.y − a.y·b.x.
    #[inline]
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Rotate by the rotation that maps (1,0) onto the unit vector `r`.
    #[inline]
    pub fn rotate_by(self, r: Vec2) -> Vec2 {
        Vec2::new(r.x * self.x - r.y * self.y, r.y * self.x + r.x * self.y)
    }

    /// Inverse of [`Vec2::rotate_by`].
    #[inline]
    pub fn rotate_back(self, r: Vec2) -> Vec2 {
        Vec2::new(r.x * self.x + r.y * self.y, -r.y * self.x + r.x * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A planar rigid pose: a position plus a unit heading vector.
///
/// Headings are stored as unit vectors rather than angles so that frame
/// composition never has to branch on angle wraparound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    position: Vec2,
    heading: Vec2,
}

impl Pose2 {
    /// Builds a pose, normalizing the heading. Rejects near-zero headings.
    pub fn new(position: Vec2, heading: Vec2) -> Result<Self, GeomError> {
        let norm = heading.norm();
        if norm < MIN_HEADING_NORM {
            return Err(GeomError::DegenerateHeading(norm));
        }
        Ok(Self {
            position,
            heading: Vec2::new(heading.x / norm, heading.y / norm),
        })
    }

    /// Origin pose with heading along +x.
    pub fn identity() -> Self {
        Self {
            position: Vec2::ZERO,
            heading: Vec2::new(1.0, 0.0),
        }
    }

    #[inline]
    pub fn position(&self) -> Vec2 {
        self.position
    }

    #[inline]
    pub fn heading(&self) -> Vec2 {
        self.heading
    }

    /// Maps a global point into this pose's local frame.
    #[inline]
    pub fn to_local(&self, point: Vec2) -> Vec2 {
        (point - self.position).rotate_back(self.heading)
    }

    /// Maps a local point back into the global frame.
    #[inline]
    pub fn to_global(&self, point: Vec2) -> Vec2 {
        point.rotate_by(self.heading) + self.position
    }

    /// Rotates a free vector (e.g. a heading) into this pose's local frame.
    #[inline]
    pub fn vector_to_local(&self, v: Vec2) -> Vec2 {
        v.rotate_back(self.heading)
    }
}

/// A global rigid transform (rotation followed by translation).
#[derive(Debug, Clone, Copy)]
pub struct Rigid2 {
    rotation: Vec2,
    translation: Vec2,
}

impl Rigid2 {
    /// Builds a rigid transform from a rotation angle in radians and a translation.
    pub fn from_angle(angle: f64, translation: Vec2) -> Self {
        Self {
            rotation: Vec2::new(angle.cos(), angle.sin()),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::from_angle(0.0, Vec2::ZERO)
    }

    #[inline]
    pub fn apply_point(&self, p: Vec2) -> Vec2 {
        p.rotate_by(self.rotation) + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: Vec2) -> Vec2 {
        v.rotate_by(self.rotation)
    }

    pub fn apply_pose(&self, pose: &Pose2) -> Pose2 {
        Pose2 {
            position: self.apply_point(pose.position),
            heading: self.apply_vector(pose.heading),
        }
    }
}

/// The five-dimensional embedding relating two instance frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePoseEmbedding {
    pub sin_alpha: f64,
    pub cos_alpha: f64,
    pub sin_beta: f64,
    pub cos_beta: f64,
    pub distance: f64,
}

impl RelativePoseEmbedding {
    /// The self-relation: zero heading difference, degenerate azimuth, zero distance.
    pub fn identity() -> Self {
        Self {
            sin_alpha: 0.0,
            cos_alpha: 1.0,
            sin_beta: 0.0,
            cos_beta: 1.0,
            distance: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.sin_alpha,
            self.cos_alpha,
            self.sin_beta,
            self.cos_beta,
            self.distance,
        ]
    }
}

/// Expresses `points` (global frame) in the local frame of `frame`.
///
/// The frame origin maps to (0,0) and the frame heading to (1,0); lengths
/// are preserved.
pub fn transform_to_frame(points: &[Vec2], frame: &Pose2) -> Vec<Vec2> {
    points.iter().map(|&p| frame.to_local(p)).collect()
}

/// Computes the relative pose embedding from frame `i` to frame `j`.
///
/// The displacement runs from i to j. The heading pair compares v_i against
/// v_j; the azimuth pair is the bearing of the displacement measured against
/// v_j. When the frames share an origin the azimuth degenerates to (0, 1).
pub fn relative_pose_embedding(frame_i: &Pose2, frame_j: &Pose2) -> RelativePoseEmbedding {
    let vi = frame_i.heading;
    let vj = frame_j.heading;
    let d = frame_j.position - frame_i.position;
    let dist = d.norm();

    let (sin_beta, cos_beta) = if dist < MIN_AZIMUTH_DISTANCE {
        (0.0, 1.0)
    } else {
        (d.cross(vj) / dist, d.dot(vj) / dist)
    };

    RelativePoseEmbedding {
        sin_alpha: vi.cross(vj),
        cos_alpha: vi.dot(vj),
        sin_beta,
        cos_beta,
        distance: dist,
    }
}

/// The dense pairwise embedding matrix for a set of instance frames.
#[derive(Debug, Clone)]
pub struct RpeMatrix {
    n: usize,
    entries: Vec<RelativePoseEmbedding>,
}

impl RpeMatrix {
    /// Builds the full N×N matrix; entry (i,j) relates frame i to frame j.
    pub fn from_poses(poses: &[Pose2]) -> Self {
        let n = poses.len();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    entries.push(RelativePoseEmbedding::identity());
                } else {
                    entries.push(relative_pose_embedding(&poses[i], &poses[j]));
                }
            }
        }
        Self { n, entries }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &RelativePoseEmbedding {
        &self.entries[i * self.n + j]
    }

    /// Row-major [N·N, 5] feature buffer for the fusion network.
    pub fn feature_rows(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n * self.n * 5);
        for e in &self.entries {
            for v in e.as_array() {
                out.push(v as f32);
            }
        }
        out
    }
}
