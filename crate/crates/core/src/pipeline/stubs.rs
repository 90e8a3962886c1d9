//! Offline stand-ins for the external segmentation and hand-skinning
//! systems. Both are deterministic, so full pipeline runs reproduce
//! byte-for-byte under a fixed seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::diffusion::GraspParams;
use crate::geometry::{rotation_from_axis_angle, PartSegment, PointCloud};
use crate::nn::normal_sample;
use crate::util::stable_hash64;

use super::{HandModel, PipelineError, Segmenter};

/// Geometric segmentation heuristic: seeded k-means over coordinates into
/// one region per requested label. Labels are assigned to regions by
/// sorting both — labels lexicographically, regions by centroid — so the
/// outcome ignores input order.
pub struct KMeansSegmenter {
    pub seed: u64,
    pub max_iters: usize,
}

impl KMeansSegmenter {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            max_iters: 100,
        }
    }
}

impl Segmenter for KMeansSegmenter {
    fn segment(
        &self,
        object_cloud: &PointCloud,
        part_labels: &[(String, u32)],
    ) -> Result<Vec<PartSegment>, PipelineError> {
        if part_labels.is_empty() {
            return Err(PipelineError::Segmentation("no labels requested".into()));
        }
        let k = part_labels.len();
        let n = object_cloud.len();
        if k > n {
            return Err(PipelineError::TooManyLabels {
                labels: k,
                points: n,
            });
        }
        let pts = object_cloud.points();

        // k-means++ style seeding
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
        centers.push(pts[rng.gen_range(0..n)]);
        while centers.len() < k {
            let d2: Vec<f64> = pts
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| dist2(p, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                // all remaining points coincide with a center
                centers.push(pts[rng.gen_range(0..n)]);
                continue;
            }
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            centers.push(pts[pick]);
        }

        let mut assign = vec![0usize; n];
        for _ in 0..self.max_iters {
            let mut changed = false;
            for (i, p) in pts.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (ci, c) in centers.iter().enumerate() {
                    let d = dist2(p, c);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                if assign[i] != best {
                    assign[i] = best;
                    changed = true;
                }
            }
            let mut sums = vec![[0.0f64; 3]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in pts.iter().enumerate() {
                let a = assign[i];
                counts[a] += 1;
                for d in 0..3 {
                    sums[a][d] += p[d];
                }
            }
            for ci in 0..k {
                if counts[ci] > 0 {
                    for d in 0..3 {
                        centers[ci][d] = sums[ci][d] / counts[ci] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        // order regions by centroid, labels lexicographically
        let mut region_order: Vec<usize> = (0..k).collect();
        region_order.sort_by(|&a, &b| {
            centers[a]
                .partial_cmp(&centers[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut label_order: Vec<usize> = (0..k).collect();
        label_order.sort_by(|&a, &b| part_labels[a].0.cmp(&part_labels[b].0));

        let mut segments: Vec<Option<PartSegment>> = (0..k).map(|_| None).collect();
        for (rank, (&region, &label_idx)) in
            region_order.iter().zip(label_order.iter()).enumerate()
        {
            let _ = rank;
            let indices: Vec<usize> = assign
                .iter()
                .enumerate()
                .filter_map(|(i, &a)| (a == region).then_some(i))
                .collect();
            let (label, scale) = &part_labels[label_idx];
            let seg = PartSegment::new(label.clone(), *scale, indices, n)
                .map_err(|e| PipelineError::Segmentation(e.to_string()))?;
            segments[label_idx] = Some(seg);
        }
        Ok(segments.into_iter().map(|s| s.expect("filled")).collect())
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Segmenter that returns stored ground-truth segments verbatim, ignoring
/// the requested labels.
pub struct GroundTruthSegmenter {
    segments: Vec<PartSegment>,
}

impl GroundTruthSegmenter {
    pub fn new(segments: Vec<PartSegment>) -> Self {
        Self { segments }
    }

    /// Loads every `<stem>.part*.json` file next to an object cloud.
    pub fn from_files(dir: &Path, stem: &str) -> Result<Self, PipelineError> {
        let mut segments = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|source| PipelineError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with(&format!("{stem}.part")) && n.ends_with(".json"))
                    .unwrap_or(false)
            })
            .collect();
        entries.sort();
        for path in entries {
            let data = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let seg: PartSegment = serde_json::from_str(&data)
                .map_err(|e| PipelineError::Dataset(format!("{}: {e}", path.display())))?;
            segments.push(seg);
        }
        if segments.is_empty() {
            return Err(PipelineError::Dataset(format!(
                "no segment files for '{stem}' in {}",
                dir.display()
            )));
        }
        Ok(Self { segments })
    }
}

impl Segmenter for GroundTruthSegmenter {
    fn segment(
        &self,
        _object_cloud: &PointCloud,
        _part_labels: &[(String, u32)],
    ) -> Result<Vec<PartSegment>, PipelineError> {
        Ok(self.segments.clone())
    }
}

/// Number of template points; matches the vertex count of the common
/// parametric hand surface so a real skinning backend can slot in without
/// contract changes.
pub const HAND_TEMPLATE_POINTS: usize = 778;

/// Deformable-template hand: a fixed seeded point blob, rigidly moved by
/// the global-rotation and palm-translation blocks, then displaced by a
/// fixed linear basis applied to the pose and shape blocks.
pub struct TemplateHandModel {
    template: Vec<[f64; 3]>,
    /// (778*3) x 45 pose basis entries, row-major by (point, axis).
    pose_basis: Vec<f64>,
    /// (778*3) x 10 shape basis entries.
    shape_basis: Vec<f64>,
}

impl TemplateHandModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        // palm-sized blob: ellipsoid with hand-like extents in meters
        let semi = [0.09, 0.05, 0.02];
        let mut template = Vec::with_capacity(HAND_TEMPLATE_POINTS);
        while template.len() < HAND_TEMPLATE_POINTS {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r2: f64 = p.iter().map(|v| v * v).sum();
            if r2 <= 1.0 {
                template.push([p[0] * semi[0], p[1] * semi[1], p[2] * semi[2]]);
            }
        }
        let n3 = HAND_TEMPLATE_POINTS * 3;
        // millimeter-scale displacement per unit parameter
        let scale = 0.002;
        let pose_basis = (0..n3 * 45).map(|_| normal_sample(&mut rng) * scale).collect();
        let shape_basis = (0..n3 * 10).map(|_| normal_sample(&mut rng) * scale).collect();
        Self {
            template,
            pose_basis,
            shape_basis,
        }
    }
}

impl Default for TemplateHandModel {
    fn default() -> Self {
        Self::new(0x4a4d)
    }
}

impl HandModel for TemplateHandModel {
    fn surface(&self, g: &GraspParams) -> PointCloud {
        let rot = rotation_from_axis_angle(&[
            g.global_rotation()[0],
            g.global_rotation()[1],
            g.global_rotation()[2],
        ]);
        let t = g.palm_translation();
        let pose = g.joint_rotations();
        let shape = g.shape_coeffs();
        let mut points = Vec::with_capacity(self.template.len());
        for (i, p) in self.template.iter().enumerate() {
            let mut q = [0.0f64; 3];
            for (r, row) in rot.iter().enumerate() {
                q[r] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + t[r];
            }
            for axis in 0..3 {
                let row = (i * 3 + axis) * 45;
                let mut d = 0.0;
                for (j, theta) in pose.iter().enumerate() {
                    d += self.pose_basis[row + j] * theta;
                }
                let row = (i * 3 + axis) * 10;
                for (j, beta) in shape.iter().enumerate() {
                    d += self.shape_basis[row + j] * beta;
                }
                q[axis] += d;
            }
            points.push(q);
        }
        PointCloud::new(points).expect("hand surface is finite")
    }

    fn surface_size(&self) -> usize {
        self.template.len()
    }
}

/// Hand model pinned to one fixed cloud, whatever the grasp says. Useful
/// for tests that need full control over what the hand can touch.
pub struct FixedHandModel {
    cloud: PointCloud,
}

impl FixedHandModel {
    pub fn new(cloud: PointCloud) -> Self {
        Self { cloud }
    }
}

impl HandModel for FixedHandModel {
    fn surface(&self, _g: &GraspParams) -> PointCloud {
        self.cloud.clone()
    }

    fn surface_size(&self) -> usize {
        self.cloud.len()
    }
}

/// Derives the per-part sampling seed from the master seed and the part's
/// label, so part order cannot change any output.
pub fn part_seed(master_seed: u64, label: &str, sample_index: usize) -> u64 {
    master_seed
        ^ stable_hash64(label.as_bytes())
        ^ (sample_index as u64).wrapping_mul(0x9e3779b97f4a7c15)
}
