//! Articulated stick-figure bodies with index-aligned correspondences.
//!
//! Every body is sampled with the same surface parameterization: point `i`
//! always lies on the same part at the same surface coordinates, whatever the
//! subject or pose. Subjects (the seed) vary limb proportions; poses vary ten
//! joint angles. The template is deliberately chiral: right-side limbs are
//! thicker and sampled more densely than left-side limbs, so left and right
//! are distinguishable by rotation- and reflection-invariant features.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PointCloud, Split};
use crate::error::{Error, Result};
use crate::rng;

pub const N_BODY_PARTS: usize = 15;

/// Part names, indexed by `label - 1`.
pub const BODY_PARTS: [&str; N_BODY_PARTS] = [
    "head",
    "thorax",
    "abdomen",
    "left hand",
    "left lower arm",
    "left upper arm",
    "left foot",
    "left lower leg",
    "left upper leg",
    "right hand",
    "right lower arm",
    "right upper arm",
    "right foot",
    "right lower leg",
    "right upper leg",
];

const HEAD: u32 = 1;
const THORAX: u32 = 2;
const ABDOMEN: u32 = 3;
const LEFT_HAND: u32 = 4;
const LEFT_FOOT: u32 = 7;
const RIGHT_HAND: u32 = 10;
const RIGHT_FOOT: u32 = 13;

const RIGHT_RADIUS_FACTOR: f64 = 1.15;
const RIGHT_DENSITY_FACTOR: f64 = 1.3;
const REST_ABDUCTION: f64 = 0.18;

/// Joint angles in radians:
/// `[l_shoulder_abd, l_shoulder_flex, l_elbow, r_shoulder_abd, r_shoulder_flex,
///   r_elbow, l_hip_flex, l_knee, r_hip_flex, r_knee]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [f64; 10]);

impl Pose {
    pub fn zero() -> Self {
        Pose([0.0; 10])
    }

    /// A random pose within comfortable joint ranges.
    pub fn sample(seed: u64) -> Self {
        let mut r = rng::stream(seed, "pose", 0, 0);
        let deg =
            |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| r.gen_range(lo..hi).to_radians();
        let mut a = [0.0; 10];
        for side in 0..2 {
            a[3 * side] = deg(&mut r, 0.0, 80.0);
            a[3 * side + 1] = deg(&mut r, -30.0, 70.0);
            a[3 * side + 2] = deg(&mut r, 0.0, 110.0);
            a[6 + 2 * side] = deg(&mut r, -20.0, 60.0);
            a[7 + 2 * side] = deg(&mut r, 0.0, 90.0);
        }
        Pose(a)
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    fn radius(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => RIGHT_RADIUS_FACTOR,
        }
    }

    fn density(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => RIGHT_DENSITY_FACTOR,
        }
    }
}

/// Per-subject proportions.
#[derive(Clone, Copy)]
struct Subject {
    scale: f64,
    arm: f64,
    leg: f64,
    torso_width: f64,
    limb_radius: f64,
    head: f64,
}

impl Subject {
    fn template() -> Self {
        Subject {
            scale: 1.0,
            arm: 1.0,
            leg: 1.0,
            torso_width: 1.0,
            limb_radius: 1.0,
            head: 1.0,
        }
    }

    fn sample(seed: u64) -> Self {
        let mut r = rng::stream(seed, "subject", 0, 0);
        Subject {
            scale: r.gen_range(0.96..1.04),
            arm: r.gen_range(0.93..1.07),
            leg: r.gen_range(0.94..1.06),
            torso_width: r.gen_range(0.9..1.1),
            limb_radius: r.gen_range(0.88..1.12),
            head: r.gen_range(0.93..1.07),
        }
    }
}

/// Rigid frame: maps rest-frame offsets to world coordinates.
#[derive(Clone, Copy)]
struct Frame {
    origin: Vector3<f64>,
    rot: Rotation3<f64>,
}

impl Frame {
    fn at(&self, local: Vector3<f64>) -> Vector3<f64> {
        self.origin + self.rot * local
    }
}

/// A sampled surface primitive in its rest frame.
#[derive(Clone, Copy)]
enum Surface {
    /// Side of an elliptic cylinder along -y from the origin.
    Tube { length: f64, rx: f64, rz: f64 },
    /// Ellipsoid centred at `center`.
    Blob {
        center: Vector3<f64>,
        radii: Vector3<f64>,
    },
    /// Horizontal elliptic disk at the origin.
    Disk { rx: f64, rz: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Tube { length, rx, rz } => length * PI * (rx + rz),
            Surface::Blob { radii, .. } => {
                // Knud Thomsen's approximation.
                let p = 1.6075;
                let (a, b, c) = (radii.x.powf(p), radii.y.powf(p), radii.z.powf(p));
                4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
            Surface::Disk { rx, rz } => PI * rx * rz,
        }
    }

    /// Map surface coordinates `(u, v) ∈ [0,1)²` to a rest-frame point.
    fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        let phi = 2.0 * PI * v;
        match *self {
            Surface::Tube { length, rx, rz } => {
                Vector3::new(rx * phi.cos(), -length * u, rz * phi.sin())
            }
            Surface::Blob { center, radii } => {
                let y = 1.0 - 2.0 * u;
                let r = (1.0 - y * y).max(0.0).sqrt();
                center
                    + Vector3::new(
                        radii.x * r * phi.cos(),
                        radii.y * y,
                        radii.z * r * phi.sin(),
                    )
            }
            Surface::Disk { rx, rz } => {
                let r = u.sqrt();
                Vector3::new(rx * r * phi.cos(), 0.0, rz * r * phi.sin())
            }
        }
    }
}

struct Patch {
    label: u32,
    density: f64,
    frame: Frame,
    surface: Surface,
}

fn rot(axis: Vector3<f64>, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}

fn build_patches(s: &Subject, pose: &Pose) -> Vec<Patch> {
    let x = Vector3::x();
    let z = Vector3::z();
    let ident = Rotation3::identity();
    let mut patches = Vec::with_capacity(19);

    let lr = 1.0 * s.limb_radius;
    let hip_y = 0.08 + 0.84 * s.leg;
    let abd_top = hip_y + 0.23;
    let torso_top = abd_top + 0.31;
    let tw = s.torso_width;

    // Torso and head.
    let torso = |y: f64| Frame {
        origin: Vector3::new(0.0, y, 0.0),
        rot: ident,
    };
    patches.push(Patch {
        label: THORAX,
        density: 1.0,
        frame: torso(torso_top),
        surface: Surface::Tube {
            length: 0.31,
            rx: 0.185 * tw,
            rz: 0.125 * tw,
        },
    });
    patches.push(Patch {
        label: THORAX,
        density: 1.0,
        frame: torso(torso_top),
        surface: Surface::Disk {
            rx: 0.185 * tw,
            rz: 0.125 * tw,
        },
    });
    patches.push(Patch {
        label: ABDOMEN,
        density: 1.0,
        frame: torso(abd_top),
        surface: Surface::Tube {
            length: 0.25,
            rx: 0.15 * tw,
            rz: 0.11 * tw,
        },
    });
    patches.push(Patch {
        label: ABDOMEN,
        density: 1.0,
        frame: torso(abd_top - 0.25),
        surface: Surface::Disk {
            rx: 0.15 * tw,
            rz: 0.11 * tw,
        },
    });
    patches.push(Patch {
        label: HEAD,
        density: 1.0,
        frame: torso(torso_top + 0.125 * s.head),
        surface: Surface::Blob {
            center: Vector3::zeros(),
            radii: Vector3::new(0.085, 0.115, 0.10) * s.head,
        },
    });

    for side in [Side::Left, Side::Right] {
        let sg = side.sign();
        let (hand, foot) = match side {
            Side::Left => (LEFT_HAND, LEFT_FOOT),
            Side::Right => (RIGHT_HAND, RIGHT_FOOT),
        };
        let base = match side {
            Side::Left => 0usize,
            Side::Right => 3usize,
        };
        let r = lr * side.radius();
        let d = side.density();

        // Arm chain: shoulder abduction about z, flexion about x, elbow about
        // the rotated lateral axis.
        let (abd, flex, elbow) = (pose.0[base], pose.0[base + 1], pose.0[base + 2]);
        let shoulder = Vector3::new(sg * 0.215 * tw, torso_top - 0.04, 0.0);
        let upper_rot = rot(x, -flex) * rot(z, sg * (REST_ABDUCTION + abd));
        let upper_len = 0.30 * s.arm;
        let elbow_pos = shoulder + upper_rot * Vector3::new(0.0, -upper_len, 0.0);
        let lower_rot = rot(upper_rot * x, -elbow) * upper_rot;
        let lower_len = 0.26 * s.arm;
        let wrist = elbow_pos + lower_rot * Vector3::new(0.0, -lower_len, 0.0);
        patches.push(Patch {
            label: hand + 2,
            density: d,
            frame: Frame {
                origin: shoulder,
                rot: upper_rot,
            },
            surface: Surface::Tube {
                length: upper_len,
                rx: 0.045 * r,
                rz: 0.045 * r,
            },
        });
        patches.push(Patch {
            label: hand + 1,
            density: d,
            frame: Frame {
                origin: elbow_pos,
                rot: lower_rot,
            },
            surface: Surface::Tube {
                length: lower_len,
                rx: 0.037 * r,
                rz: 0.037 * r,
            },
        });
        patches.push(Patch {
            label: hand,
            density: d,
            frame: Frame {
                origin: wrist,
                rot: lower_rot,
            },
            surface: Surface::Blob {
                center: Vector3::new(0.0, -0.085 * s.arm, 0.0),
                radii: Vector3::new(0.045 * r, 0.085 * s.arm, 0.022 * r),
            },
        });

        // Leg chain: hip flexion about x, knee about the rotated lateral axis.
        let li = match side {
            Side::Left => 6usize,
            Side::Right => 8usize,
        };
        let (hip_flex, knee) = (pose.0[li], pose.0[li + 1]);
        let hip = Vector3::new(sg * 0.095 * tw, hip_y, 0.0);
        let thigh_rot = rot(x, -hip_flex);
        let leg_len = 0.42 * s.leg;
        let knee_pos = hip + thigh_rot * Vector3::new(0.0, -leg_len, 0.0);
        let shin_rot = rot(thigh_rot * x, knee) * thigh_rot;
        let ankle = knee_pos + shin_rot * Vector3::new(0.0, -leg_len, 0.0);
        patches.push(Patch {
            label: foot + 2,
            density: d,
            frame: Frame {
                origin: hip,
                rot: thigh_rot,
            },
            surface: Surface::Tube {
                length: leg_len,
                rx: 0.07 * r,
                rz: 0.07 * r,
            },
        });
        patches.push(Patch {
            label: foot + 1,
            density: d,
            frame: Frame {
                origin: knee_pos,
                rot: shin_rot,
            },
            surface: Surface::Tube {
                length: leg_len,
                rx: 0.05 * r,
                rz: 0.05 * r,
            },
        });
        patches.push(Patch {
            label: foot,
            density: d,
            frame: Frame {
                origin: ankle,
                rot: shin_rot,
            },
            surface: Surface::Blob {
                center: Vector3::new(0.0, -0.03, 0.07),
                radii: Vector3::new(0.045 * r, 0.035, 0.12),
            },
        });
    }
    patches
}

/// Split `n` points over patches in proportion to `weights` (largest
/// remainder, ties to the lower index). Every patch receives at least one.
fn allocate(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let free = n - weights.len();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * free as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize + 1).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Fixed irregularity of the sampling layout, in lattice cells.
const TEMPLATE_JITTER: f64 = 0.5;
/// Per-scan displacement of each sample, in lattice cells.
const SCAN_JITTER: f64 = 1.0;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Generate one body. `seed` selects the subject (proportions); the surface
/// parameterization depends only on `n_points`, so bodies of equal size are
/// index-aligned across subjects and poses.
pub fn generate_synthetic_body(seed: u64, n_points: usize, pose: &Pose) -> Result<PointCloud> {
    if n_points < 100 {
        return Err(Error::InvalidArgument(format!(
            "synthetic bodies need at least 100 points, got {n_points}"
        )));
    }
    let template = build_patches(&Subject::template(), &Pose::zero());
    let weights: Vec<f64> = template
        .iter()
        .map(|p| p.surface.area() * p.density)
        .collect();
    let counts = allocate(&weights, n_points);

    let subject = Subject::sample(seed);
    let patches = build_patches(&subject, pose);

    let pose_bits = pose
        .0
        .iter()
        .fold(0u64, |h, a| h.rotate_left(7) ^ a.to_bits());
    let mut scan = rng::stream(seed, "scan", pose_bits, n_points as u64);
    let mut coords = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (pi, (patch, &m)) in patches.iter().zip(&counts).enumerate() {
        // Per-patch phase offset keeps lattices of neighbouring patches from
        // lining up.
        let phase = (pi as f64 * GOLDEN * 7.0).fract();
        let mut layout = rng::stream(0, "template-layout", n_points as u64, pi as u64);
        // Lattice spacing in either surface coordinate.
        let cell = 1.0 / (m as f64).sqrt();
        for j in 0..m {
            let (ju, jv) = (
                TEMPLATE_JITTER * layout.gen_range(-0.5..0.5)
                    + SCAN_JITTER * scan.gen_range(-0.5..0.5),
                TEMPLATE_JITTER * layout.gen_range(-0.5..0.5)
                    + SCAN_JITTER * scan.gen_range(-0.5..0.5),
            );
            let u = ((j as f64 + 0.5) / m as f64 + ju * cell).clamp(0.0, 1.0);
            let v = (j as f64 * GOLDEN + phase + jv * cell).rem_euclid(1.0);
            let p = patch.frame.at(patch.surface.point(u, v)) * subject.scale;
            coords.push([p.x, p.y, p.z]);
            labels.push(patch.label);
        }
    }
    let corr = (0..n_points as i64).collect();
    Ok(PointCloud {
        coords,
        features: None,
        labels: Some(labels),
        corr: Some(corr),
    })
}

/// Poses generated per subject by [`synthetic_dataset`].
pub const POSES_PER_SUBJECT: usize = 5;

/// One generated shape with its dataset bookkeeping.
#[derive(Debug, Clone)]
pub struct SyntheticShape {
    pub cloud: PointCloud,
    pub subject: u32,
    pub pose: u32,
    pub split: Split,
}

/// Subject-disjoint split: roughly 2/11 of the subjects for testing, 1/11
/// for validation, the rest for training. With 11 subjects this is 8/1/2.
pub fn subject_split(n_subjects: usize) -> Vec<Split> {
    let n_test = ((n_subjects as f64 * 2.0 / 11.0).round() as usize).max(1);
    let n_val = ((n_subjects as f64 / 11.0).round() as usize).max(1);
    (0..n_subjects)
        .map(|s| {
            if s + n_test >= n_subjects {
                Split::Test
            } else if s + n_test + n_val >= n_subjects {
                Split::Val
            } else {
                Split::Train
            }
        })
        .collect()
}

/// `n_shapes` bodies: consecutive groups of [`POSES_PER_SUBJECT`] poses per
/// subject, split by subject. Needs at least three subjects.
pub fn synthetic_dataset(
    n_shapes: usize,
    n_points: usize,
    seed: u64,
) -> Result<Vec<SyntheticShape>> {
    let n_subjects = n_shapes.div_ceil(POSES_PER_SUBJECT);
    if n_subjects < 3 {
        return Err(Error::InvalidArgument(format!(
            "{n_shapes} shapes cover fewer than three subjects"
        )));
    }
    let splits = subject_split(n_subjects);
    (0..n_shapes)
        .map(|i| {
            let (subject, pose) = (i / POSES_PER_SUBJECT, i % POSES_PER_SUBJECT);
            let subject_seed = rng::derive_seed(seed, "subject", subject as u64, 0);
            let pose_seed = rng::derive_seed(seed, "pose", subject as u64, pose as u64);
            Ok(SyntheticShape {
                cloud: generate_synthetic_body(subject_seed, n_points, &Pose::sample(pose_seed))?,
                subject: subject as u32,
                pose: pose as u32,
                split: splits[subject],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_one_zero_pose_covers_all_parts_at_human_height() {
        let c = generate_synthetic_body(1, 1024, &Pose::zero()).unwrap();
        assert_eq!(c.len(), 1024);
        let labels = c.labels.as_ref().unwrap();
        for l in 1..=15u32 {
            assert!(labels.contains(&l), "label {l} missing");
        }
        let (lo, hi) = c.bounding_box();
        let height = hi[1] - lo[1];
        assert!((1.6..=1.8).contains(&height), "height {height}");
    }

    #[test]
    fn deterministic_per_seed() {
        let pose = Pose::sample(3);
        let a = generate_synthetic_body(1, 500, &pose).unwrap();
        let b = generate_synthetic_body(1, 500, &pose).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poses_share_correspondence_and_labels() {
        let a = generate_synthetic_body(1, 700, &Pose::sample(1)).unwrap();
        let b = generate_synthetic_body(1, 700, &Pose::sample(2)).unwrap();
        let c = generate_synthetic_body(9, 700, &Pose::sample(2)).unwrap();
        assert_eq!(a.corr, b.corr);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels, c.labels);
        assert_ne!(a.coords, b.coords);
        assert_ne!(b.coords, c.coords);
    }

    #[test]
    fn right_side_is_denser() {
        let c = generate_synthetic_body(1, 2000, &Pose::zero()).unwrap();
        let labels = c.labels.unwrap();
        let count = |l: u32| labels.iter().filter(|&&x| x == l).count() as f64;
        for (left, right) in (4..=9).zip(10..=15) {
            assert!(count(right) > 1.2 * count(left), "{left} vs {right}");
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(generate_synthetic_body(1, 99, &Pose::zero()).is_err());
    }

    #[test]
    fn allocation_sums_exactly() {
        let counts = allocate(&[1.0, 2.0, 3.5, 0.01], 101);
        assert_eq!(counts.iter().sum::<usize>(), 101);
        assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn dataset_split_is_forty_five_ten() {
        let shapes = synthetic_dataset(55, 120, 7).unwrap();
        let count = |sp: Split| shapes.iter().filter(|s| s.split == sp).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (40, 5, 10)
        );
        let test_subjects: std::collections::BTreeSet<u32> = shapes
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.subject)
            .collect();
        assert!(shapes
            .iter()
            .filter(|s| s.split == Split::Train)
            .all(|s| !test_subjects.contains(&s.subject)));
        assert_eq!(shapes[3].cloud.corr, shapes[40].cloud.corr);
    }
}
