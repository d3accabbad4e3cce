//! Deterministic synthetic sequences with ground-truth motion.
//!
//! Each shape is a set of material points moved along an analytic
//! trajectory and re-voxelized per frame, so the generator knows exactly
//! which voxel every point occupies at every time step. The exported
//! ground truth is the mean displacement of the points inside each
//! occupied voxel, in grid units, aligned with the frame's vertex order —
//! precisely the quantity a dense motion field estimates.
//!
//! Colors are sampled from a smooth periodic texture in *material*
//! coordinates, so they ride with the surface; an optional per-frame noise
//! term (seeded, deterministic) roughens them the way sensor noise would.

use dpcc_core::voxel::{voxelize, RawPointCloud, VoxelError, VoxelFrame, VoxelGrid};
use std::collections::HashMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Errors from synthetic sequence generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

/// Shape of the animated point set, with its motion parameters.
#[derive(Clone, Copy, Debug)]
pub enum Shape {
    /// A hollow sphere under constant translation (rigid).
    SphereShell {
        /// Shell radius in voxels.
        radius: f64,
        /// Translation per frame in voxels (each component ≤ 3 for the
        /// desk-scale motion regime).
        velocity: [f64; 3],
    },
    /// Two articulated boxes: a translating torso and a limb swinging
    /// about a hinge on its top face (piecewise rigid, globally nonrigid).
    Body {
        /// Torso translation per frame in voxels.
        velocity: [f64; 3],
        /// Limb rotation per frame in radians.
        spin: f64,
    },
    /// An irregular union of spheres under constant translation (rigid).
    Blob {
        /// Number of spheres in the union.
        spheres: usize,
        /// Radius of the ball the sphere centers are drawn from.
        radius: f64,
        /// Translation per frame in voxels.
        velocity: [f64; 3],
    },
}

/// A full description of a synthetic sequence.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub shape: Shape,
    /// Number of frames to generate.
    pub frames: usize,
    /// Octree depth of the voxel grid (2^depth cells per axis).
    pub depth: u32,
    /// World size of one voxel.
    pub stepsize: f64,
    /// Seed for textures and randomized geometry.
    pub seed: u64,
    /// Texture period in voxels.
    pub color_period: f64,
    /// Amplitude of the per-frame color noise (0 = static texture).
    pub color_noise: f64,
}

impl SyntheticSpec {
    /// Named presets used by the CLI; programmatic callers can build any
    /// [`SyntheticSpec`] directly.
    pub fn preset(name: &str, frames: usize, depth: u32, stepsize: f64, seed: u64) -> Option<Self> {
        // Texture periods are matched to each shape's speed so that copying
        // colors across frames degrades gracefully rather than aliasing.
        let (shape, color_period) = match name {
            "sphere" => (Shape::SphereShell { radius: 9.0, velocity: [1.4, -0.9, 2.1] }, 12.0),
            "sphere-slow" => (Shape::SphereShell { radius: 9.0, velocity: [0.7, 0.5, -1.1] }, 8.0),
            "body" => (Shape::Body { velocity: [1.1, 0.5, 0.2], spin: 0.09 }, 8.0),
            "blob" => (Shape::Blob { spheres: 13, radius: 5.5, velocity: [2.0, 1.2, -1.6] }, 8.0),
            "blob-drift" => {
                (Shape::Blob { spheres: 13, radius: 5.5, velocity: [-1.8, 2.2, 1.0] }, 8.0)
            }
            _ => return None,
        };
        Some(Self {
            shape,
            frames,
            depth,
            stepsize,
            seed,
            color_period,
            color_noise: 4.0,
        })
    }

    /// The preset names accepted by [`SyntheticSpec::preset`].
    pub fn preset_names() -> &'static [&'static str] {
        &["sphere", "sphere-slow", "body", "blob", "blob-drift"]
    }
}

/// Generated frames plus the ground truth that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// The shared grid of every frame.
    pub grid: VoxelGrid,
    /// Voxelized frames, one per time step.
    pub frames: Vec<VoxelFrame>,
    /// `truth[t][v]`: mean displacement (grid units) between frames `t`
    /// and `t+1` of the material points inside vertex `v` of frame `t`.
    pub truth: Vec<Vec<[f64; 3]>>,
}

fn lcg(state: &mut u64) -> u64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    *state
}

/// Uniform draw in [0, 1) from the high bits of the generator.
fn unit(state: &mut u64) -> f64 {
    (lcg(state) >> 11) as f64 / (1u64 << 53) as f64
}

/// Material points of a shape at time zero, in local coordinates, together
/// with a closure evaluating each point's position at any frame index.
struct Animation {
    base: Vec<[f64; 3]>,
    /// `position(point_index, frame) -> local position`.
    position: Box<dyn Fn(usize, usize) -> [f64; 3]>,
}

fn translate(p: [f64; 3], d: [f64; 3]) -> [f64; 3] {
    [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Evenly distributed points on a sphere (Fibonacci lattice).
fn fibonacci_shell(radius: f64, count: usize) -> Vec<[f64; 3]> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..count)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * (k as f64 / golden).fract();
            [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
        })
        .collect()
}

/// Integer lattice points on the surface of an axis-aligned box with the
/// given (inclusive) extents.
fn box_surface(extent: [u32; 3]) -> Vec<[f64; 3]> {
    let mut points = Vec::new();
    for x in 0..=extent[0] {
        for y in 0..=extent[1] {
            for z in 0..=extent[2] {
                let on_face = x == 0
                    || x == extent[0]
                    || y == 0
                    || y == extent[1]
                    || z == 0
                    || z == extent[2];
                if on_face {
                    points.push([f64::from(x), f64::from(y), f64::from(z)]);
                }
            }
        }
    }
    points
}

fn sphere_animation(radius: f64, velocity: [f64; 3]) -> Animation {
    // Oversample so every surface cell catches at least one point.
    let count = ((4.0 * PI * radius * radius) * 2.8).ceil() as usize;
    let base = fibonacci_shell(radius, count);
    let points = base.clone();
    Animation {
        base,
        position: Box::new(move |i, t| translate(points[i], scale(velocity, t as f64))),
    }
}

fn body_animation(velocity: [f64; 3], spin: f64) -> Animation {
    const TORSO: [u32; 3] = [13, 17, 8];
    // Hinge on the torso's top face; the limb lattice is relative to it.
    const HINGE: [f64; 3] = [10.0, 17.0, 4.0];
    let torso = box_surface(TORSO);
    let torso_len = torso.len();
    let limb: Vec<[f64; 3]> = box_surface([4, 11, 4])
        .into_iter()
        .map(|p| [p[0] - 2.0, p[1], p[2] - 2.0])
        .collect();

    let mut base = torso.clone();
    base.extend(limb.iter().map(|&l| translate(HINGE, l)));
    let (torso_pts, limb_pts) = (torso, limb);
    Animation {
        base,
        position: Box::new(move |i, t| {
            let drift = scale(velocity, t as f64);
            if i < torso_len {
                translate(torso_pts[i], drift)
            } else {
                let l = limb_pts[i - torso_len];
                let theta = spin * t as f64;
                let (sin, cos) = theta.sin_cos();
                let swung = [l[0] * cos - l[1] * sin, l[0] * sin + l[1] * cos, l[2]];
                translate(translate(HINGE, swung), drift)
            }
        }),
    }
}

fn blob_animation(spheres: usize, radius: f64, velocity: [f64; 3], seed: u64) -> Animation {
    let mut state = seed ^ 0xB10B_B10B_B10B_B10B;
    let mut balls = Vec::with_capacity(spheres);
    for _ in 0..spheres {
        // Rejection-sample a center inside the cluster ball.
        let center = loop {
            let c = [
                (unit(&mut state) * 2.0 - 1.0) * radius,
                (unit(&mut state) * 2.0 - 1.0) * radius,
                (unit(&mut state) * 2.0 - 1.0) * radius,
            ];
            if c.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                break c;
            }
        };
        let r = 2.4 + unit(&mut state) * 1.8;
        balls.push((center, r));
    }
    // Material points are the centers of every lattice cell inside the union.
    let reach = (radius + 4.2).ceil() as i64;
    let mut base = Vec::new();
    for x in -reach..=reach {
        for y in -reach..=reach {
            for z in -reach..=reach {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let inside = balls.iter().any(|(c, r)| {
                    (0..3).map(|a| (p[a] - c[a]) * (p[a] - c[a])).sum::<f64>() <= r * r
                });
                if inside {
                    base.push(p);
                }
            }
        }
    }
    let points = base.clone();
    Animation {
        base,
        position: Box::new(move |i, t| translate(points[i], scale(velocity, t as f64))),
    }
}

/// Smooth periodic texture in material coordinates: three seeded plane
/// waves, one per channel, full [0, 255] swing.
struct Texture {
    directions: [[f64; 3]; 3],
    phases: [f64; 3],
    period: f64,
}

impl Texture {
    fn new(seed: u64, period: f64) -> Self {
        let mut state = seed ^ 0x7E87_0CA1_7E87_0CA1;
        let mut directions = [[0.0; 3]; 3];
        let mut phases = [0.0; 3];
        for c in 0..3 {
            let d = loop {
                let d = [
                    unit(&mut state) * 2.0 - 1.0,
                    unit(&mut state) * 2.0 - 1.0,
                    unit(&mut state) * 2.0 - 1.0,
                ];
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.2 {
                    break scale(d, 1.0 / norm);
                }
            };
            directions[c] = d;
            phases[c] = unit(&mut state) * 2.0 * PI;
        }
        Self { directions, phases, period }
    }

    fn sample(&self, p: [f64; 3], channel: usize) -> f64 {
        let d = self.directions[channel];
        let x = (p[0] * d[0] + p[1] * d[1] + p[2] * d[2]) / self.period;
        127.5 + 127.5 * (2.0 * PI * x + self.phases[channel]).sin()
    }
}

/// Generates a deterministic sequence and its per-pair ground-truth motion.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSequence, SynthError> {
    if spec.frames == 0 {
        return Err(SynthError::InvalidSpec("frame count must be positive".into()));
    }
    if !(spec.color_period.is_finite() && spec.color_period > 0.0) {
        return Err(SynthError::InvalidSpec("color period must be positive".into()));
    }
    if !(spec.color_noise.is_finite() && spec.color_noise >= 0.0) {
        return Err(SynthError::InvalidSpec("color noise must be non-negative".into()));
    }
    let animation = match spec.shape {
        Shape::SphereShell { radius, velocity } => {
            if !(radius.is_finite() && radius > 1.0) {
                return Err(SynthError::InvalidSpec("sphere radius must exceed 1".into()));
            }
            sphere_animation(radius, velocity)
        }
        Shape::Body { velocity, spin } => body_animation(velocity, spin),
        Shape::Blob { spheres, radius, velocity } => {
            if spheres == 0 {
                return Err(SynthError::InvalidSpec("blob needs at least one sphere".into()));
            }
            blob_animation(spheres, radius, velocity, spec.seed)
        }
    };

    let grid = VoxelGrid::new([0.0; 3], spec.stepsize, spec.depth)?;
    let n = animation.base.len();

    // All positions over all frames, in local coordinates.
    let positions: Vec<Vec<[f64; 3]>> = (0..spec.frames)
        .map(|t| (0..n).map(|i| (animation.position)(i, t)).collect())
        .collect();

    // Center the whole animation in the grid (half-voxel margin).
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for frame in &positions {
        for p in frame {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let cells = f64::from(grid.cells_per_axis());
    let mut shift = [0.0; 3];
    for a in 0..3 {
        let span = hi[a] - lo[a];
        if span >= cells - 1.0 {
            return Err(SynthError::InvalidSpec(format!(
                "animation spans {span:.1} voxels on axis {a}, grid has {cells}"
            )));
        }
        shift[a] = (cells - span) / 2.0 - lo[a];
    }

    let texture = Texture::new(spec.seed, spec.color_period);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames.saturating_sub(1));
    for t in 0..spec.frames {
        let points: Vec<[f64; 3]> = positions[t]
            .iter()
            .map(|&p| scale(translate(p, shift), spec.stepsize))
            .collect();
        // Texture in material coordinates + per-frame seeded noise.
        let mut noise_state = spec.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let colors: Vec<[u8; 3]> = animation
            .base
            .iter()
            .map(|&p0| {
                let mut c = [0u8; 3];
                for (channel, out) in c.iter_mut().enumerate() {
                    let noise = (unit(&mut noise_state) * 2.0 - 1.0) * spec.color_noise;
                    *out = (texture.sample(p0, channel) + noise).clamp(0.0, 255.0).round() as u8;
                }
                c
            })
            .collect();
        let cloud = RawPointCloud::new(points, colors)
            .map_err(|e| SynthError::InvalidSpec(format!("degenerate shape: {e}")))?;
        frames.push(voxelize(&cloud, &grid)?);
    }

    for t in 0..spec.frames.saturating_sub(1) {
        // Mean displacement of the points inside each voxel of frame t.
        let mut sums: HashMap<[u32; 3], ([f64; 3], usize)> = HashMap::new();
        for i in 0..n {
            let here = translate(positions[t][i], shift);
            let next = translate(positions[t + 1][i], shift);
            let world = scale(here, spec.stepsize);
            let cell = grid.cell_of(world).expect("centered animation stays in grid");
            let entry = sums.entry(cell).or_insert(([0.0; 3], 0));
            for a in 0..3 {
                entry.0[a] += next[a] - here[a];
            }
            entry.1 += 1;
        }
        let frame = &frames[t];
        let mut field = Vec::with_capacity(frame.len());
        for v in 0..frame.len() {
            let (sum, count) = sums[&frame.voxels()[v]];
            field.push(scale(sum, 1.0 / count as f64));
        }
        truth.push(field);
    }

    Ok(SyntheticSequence { grid, frames, truth })
}
