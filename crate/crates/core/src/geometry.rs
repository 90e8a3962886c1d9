//! Point-cloud containers, exact nearest-distance queries, part filtering,
//! and the contact-based consistency score used to rank generated grasps.
//!
//! Distances are Euclidean and expressed in meters. Nothing in this module
//! normalizes or rescales its inputs; callers that need normalized clouds
//! (e.g. the feature encoders) do so themselves.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::GraspParams;

/// Errors from geometric queries and point-cloud I/O.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty but the operation requires points")]
    EmptyCloud,
    #[error("non-finite coordinate {value} at point index {index}")]
    NonFiniteCoordinate { index: usize, value: f64 },
    #[error("contact threshold lambda must be > 0, got {0}")]
    InvalidLambda(f64),
    #[error("no valid parts to select from")]
    NoValidParts,
    #[error("segment '{label}' has out-of-range index {index} (cloud has {cloud_len} points)")]
    IndexOutOfRange {
        label: String,
        index: usize,
        cloud_len: usize,
    },
    #[error("segment '{label}' repeats point index {index}")]
    DuplicateIndex { label: String, index: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A set of 3D points in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    /// Builds a cloud, rejecting any non-finite coordinate.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        for (index, p) in points.iter().enumerate() {
            for &value in p {
                if !value.is_finite() {
                    return Err(GeometryError::NonFiniteCoordinate { index, value });
                }
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Sub-cloud selected by index list. Indices must be in range.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        c
    }

    /// Applies `p -> rot * p + trans` to every point.
    pub fn rigid_transform(&self, rot: &[[f64; 3]; 3], trans: &[f64; 3]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for (r, row) in rot.iter().enumerate() {
                    q[r] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + trans[r];
                }
                q
            })
            .collect();
        Self { points }
    }

    pub fn translated(&self, t: &[f64; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    /// Axis-aligned bounds as (min, max) corners.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }

    /// Reads the plain-text `x y z` format: one triple per line, meters,
    /// `#` starts a comment, blank lines ignored. Rejects NaN/inf.
    pub fn load_xyz(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| GeometryError::Io {
            path: path_str.clone(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut points = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| GeometryError::Io {
                path: path_str.clone(),
                source,
            })?;
            let content = match line.find('#') {
                Some(pos) => &line[..pos],
                None => &line[..],
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 3 {
                return Err(GeometryError::Parse {
                    path: path_str,
                    line: lineno + 1,
                    message: format!("expected 3 coordinates, found {}", fields.len()),
                });
            }
            let mut p = [0.0; 3];
            for (k, field) in fields.iter().enumerate() {
                let value: f64 = field.parse().map_err(|_| GeometryError::Parse {
                    path: path_str.clone(),
                    line: lineno + 1,
                    message: format!("not a number: '{field}'"),
                })?;
                if !value.is_finite() {
                    return Err(GeometryError::Parse {
                        path: path_str,
                        line: lineno + 1,
                        message: format!("non-finite coordinate: '{field}'"),
                    });
                }
                p[k] = value;
            }
            points.push(p);
        }
        Ok(Self { points })
    }

    pub fn save_xyz(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let mut file = std::fs::File::create(path).map_err(|source| GeometryError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut buf = String::new();
        for p in &self.points {
            buf.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        file.write_all(buf.as_bytes())
            .map_err(|source| GeometryError::Io {
                path: path_str,
                source,
            })
    }
}

/// A labeled subset of an object cloud at one segmentation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSegment {
    pub label: String,
    /// 1-based granularity level; the pipeline uses two scales.
    pub scale_level: u32,
    pub point_indices: Vec<usize>,
    /// Set by [`filter_valid_parts`]: true iff the segment meets the
    /// minimum point count.
    #[serde(default)]
    pub valid: bool,
}

impl PartSegment {
    /// Builds a segment, checking that indices are unique and within the
    /// parent cloud. The valid flag starts false until filtering runs.
    pub fn new(
        label: impl Into<String>,
        scale_level: u32,
        point_indices: Vec<usize>,
        cloud_len: usize,
    ) -> Result<Self, GeometryError> {
        let label = label.into();
        let mut seen = vec![false; cloud_len];
        for &index in &point_indices {
            if index >= cloud_len {
                return Err(GeometryError::IndexOutOfRange {
                    label,
                    index,
                    cloud_len,
                });
            }
            if seen[index] {
                return Err(GeometryError::DuplicateIndex { label, index });
            }
            seen[index] = true;
        }
        Ok(Self {
            label,
            scale_level,
            point_indices,
            valid: false,
        })
    }

    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

impl fmt::Display for PartSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (scale {}, {} pts)",
            self.label,
            self.scale_level,
            self.point_indices.len()
        )
    }
}

/// One generated grasp attached to the part it was generated for, with its
/// contact score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub part: PartSegment,
    pub grasp: GraspParams,
    pub score: f64,
}

/// For each query point, the distance to its nearest target point.
///
/// Exhaustive exact scan; the contact score below is defined against this
/// result and any accelerated structure would have to reproduce it
/// bit-for-bit.
pub fn min_distances(query: &PointCloud, target: &PointCloud) -> Result<Vec<f64>, GeometryError> {
    if query.is_empty() || target.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let out = query
        .points
        .iter()
        .map(|q| {
            let mut best = f64::INFINITY;
            for t in &target.points {
                let dx = q[0] - t[0];
                let dy = q[1] - t[1];
                let dz = q[2] - t[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d < best {
                    best = d;
                }
            }
            best
        })
        .collect();
    Ok(out)
}

/// Fraction of part points lying strictly within `lambda` meters of the
/// hand surface cloud. Always in [0, 1].
pub fn contact_score(
    part: &PointCloud,
    hand: &PointCloud,
    lambda: f64,
) -> Result<f64, GeometryError> {
    if !(lambda > 0.0) {
        return Err(GeometryError::InvalidLambda(lambda));
    }
    let dists = min_distances(part, hand)?;
    let hits = dists.iter().filter(|&&d| d < lambda).count();
    Ok(hits as f64 / dists.len() as f64)
}

/// Marks every segment's valid flag against the threshold (inclusive) and
/// returns the valid ones in input order.
pub fn filter_valid_parts(
    segments: &mut [PartSegment],
    min_part_points: usize,
) -> Vec<PartSegment> {
    assert!(min_part_points >= 1, "min_part_points must be >= 1");
    for seg in segments.iter_mut() {
        seg.valid = seg.point_indices.len() >= min_part_points;
    }
    segments.iter().filter(|s| s.valid).cloned().collect()
}

/// Index of the best-scoring candidate; ties go to the earliest candidate.
pub fn select_best_index(candidates: &[GraspCandidate]) -> Result<usize, GeometryError> {
    if candidates.is_empty() {
        return Err(GeometryError::NoValidParts);
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.score > candidates[best].score {
            best = i;
        }
    }
    Ok(best)
}

/// The best-scoring candidate itself. See [`select_best_index`] for the
/// tie rule.
pub fn select_best(candidates: &[GraspCandidate]) -> Result<&GraspCandidate, GeometryError> {
    select_best_index(candidates).map(|i| &candidates[i])
}

/// Rotation matrix from an axis-angle vector (Rodrigues' formula).
/// A zero vector yields the identity.
pub fn rotation_from_axis_angle(aa: &[f64; 3]) -> [[f64; 3]; 3] {
    let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [aa[0] / theta, aa[1] / theta, aa[2] / theta];
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    [
        [
            c + k[0] * k[0] * v,
            k[0] * k[1] * v - k[2] * s,
            k[0] * k[2] * v + k[1] * s,
        ],
        [
            k[1] * k[0] * v + k[2] * s,
            c + k[1] * k[1] * v,
            k[1] * k[2] * v - k[0] * s,
        ],
        [
            k[2] * k[0] * v - k[1] * s,
            k[2] * k[1] * v + k[0] * s,
            c + k[2] * k[2] * v,
        ],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GraspParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> PointCloud {
        let points = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                ]
            })
            .collect();
        PointCloud::new(points).unwrap()
    }

    /// Independent O(N*M) reference for min_distances / contact_score.
    fn brute_min_distances(query: &PointCloud, target: &PointCloud) -> Vec<f64> {
        query
            .points()
            .iter()
            .map(|q| {
                target
                    .points()
                    .iter()
                    .map(|t| {
                        ((q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2) + (q[2] - t[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn min_distance_coincident_point() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let t = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(min_distances(&q, &t).unwrap(), vec![0.0]);
    }

    #[test]
    fn min_distance_3_4_5() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let t = cloud(&[[3.0, 4.0, 0.0]]);
        assert_eq!(min_distances(&q, &t).unwrap(), vec![5.0]);
    }

    #[test]
    fn min_distance_matches_brute_force_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let q = random_cloud(&mut rng, 100, 0.5);
        let t = random_cloud(&mut rng, 100, 0.5);
        assert_eq!(min_distances(&q, &t).unwrap(), brute_min_distances(&q, &t));
    }

    #[test]
    fn min_distance_rejects_empty() {
        let q = cloud(&[[0.0; 3]]);
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(matches!(
            min_distances(&q, &empty),
            Err(GeometryError::EmptyCloud)
        ));
        assert!(matches!(
            min_distances(&empty, &q),
            Err(GeometryError::EmptyCloud)
        ));
    }

    #[test]
    fn contact_identical_clouds_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 40, 0.1);
        assert_eq!(contact_score(&c, &c, 0.005).unwrap(), 1.0);
    }

    #[test]
    fn contact_distant_hand_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let part = random_cloud(&mut rng, 40, 0.1);
        let hand = part.translated(&[1.0, 0.0, 0.0]);
        assert_eq!(contact_score(&part, &hand, 0.005).unwrap(), 0.0);
    }

    #[test]
    fn contact_counts_sub_threshold_distances() {
        // Four part points at known distances {1mm, 2mm, 20mm, 30mm} from
        // a single hand point; lambda 5mm keeps exactly two.
        let part = cloud(&[
            [0.001, 0.0, 0.0],
            [0.002, 0.0, 0.0],
            [0.02, 0.0, 0.0],
            [0.03, 0.0, 0.0],
        ]);
        let hand = cloud(&[[0.0, 0.0, 0.0]]);
        let dists = brute_min_distances(&part, &hand);
        let expected = dists.iter().filter(|&&d| d < 0.005).count() as f64 / dists.len() as f64;
        assert_eq!(expected, 0.5);
        assert_eq!(contact_score(&part, &hand, 0.005).unwrap(), expected);
    }

    #[test]
    fn contact_rejects_bad_lambda() {
        let c = cloud(&[[0.0; 3]]);
        assert!(matches!(
            contact_score(&c, &c, 0.0),
            Err(GeometryError::InvalidLambda(_))
        ));
        assert!(matches!(
            contact_score(&c, &c, -1.0),
            Err(GeometryError::InvalidLambda(_))
        ));
    }

    #[test]
    fn contact_monotone_in_lambda() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let part = random_cloud(&mut rng, 60, 0.05);
        let hand = random_cloud(&mut rng, 60, 0.05);
        let mut prev = 0.0;
        for lambda in [0.001, 0.005, 0.02, 0.05, 0.2] {
            let s = contact_score(&part, &hand, lambda).unwrap();
            assert!(s >= prev, "score decreased as lambda grew");
            prev = s;
        }
    }

    #[test]
    fn contact_invariant_under_rigid_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let part = random_cloud(&mut rng, 50, 0.05);
        let hand = random_cloud(&mut rng, 50, 0.05);
        let before = contact_score(&part, &hand, 0.02).unwrap();
        let rot = rotation_from_axis_angle(&[0.3, -1.1, 0.7]);
        let trans = [0.4, -0.2, 0.9];
        let after = contact_score(
            &part.rigid_transform(&rot, &trans),
            &hand.rigid_transform(&rot, &trans),
            0.02,
        )
        .unwrap();
        assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn filter_thresholds_inclusively() {
        let mut segs = vec![
            PartSegment::new("a", 1, (0..10).collect(), 200).unwrap(),
            PartSegment::new("b", 1, (10..110).collect(), 200).unwrap(),
        ];
        let kept = filter_valid_parts(&mut segs, 50);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, "b");
        assert!(!segs[0].valid);
        assert!(segs[1].valid);

        let mut segs = vec![
            PartSegment::new("small", 1, (0..49).collect(), 200).unwrap(),
            PartSegment::new("edge", 1, (49..99).collect(), 200).unwrap(),
        ];
        let kept = filter_valid_parts(&mut segs, 50);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, "edge", "boundary must be inclusive");
    }

    #[test]
    fn filter_with_threshold_one_keeps_everything_nonempty() {
        let mut segs = vec![
            PartSegment::new("a", 1, vec![0], 10).unwrap(),
            PartSegment::new("b", 2, vec![1, 2], 10).unwrap(),
        ];
        let kept = filter_valid_parts(&mut segs, 1);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn segment_rejects_bad_indices() {
        assert!(matches!(
            PartSegment::new("x", 1, vec![5], 5),
            Err(GeometryError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            PartSegment::new("x", 1, vec![1, 1], 5),
            Err(GeometryError::DuplicateIndex { .. })
        ));
    }

    fn candidate(label: &str, score: f64) -> GraspCandidate {
        GraspCandidate {
            part: PartSegment::new(label, 1, vec![0], 1).unwrap(),
            grasp: GraspParams::zeros(),
            score,
        }
    }

    #[test]
    fn select_best_is_argmax() {
        let cands = vec![
            candidate("a", 0.2),
            candidate("b", 0.8),
            candidate("c", 0.5),
        ];
        assert_eq!(select_best_index(&cands).unwrap(), 1);
        assert_eq!(select_best(&cands).unwrap().part.label, "b");
    }

    #[test]
    fn select_best_tie_goes_to_first() {
        let cands = vec![candidate("a", 0.4), candidate("b", 0.4)];
        assert_eq!(select_best_index(&cands).unwrap(), 0);
    }

    #[test]
    fn select_best_rejects_empty() {
        assert!(matches!(
            select_best(&[]),
            Err(GeometryError::NoValidParts)
        ));
    }

    #[test]
    fn xyz_roundtrip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obj.xyz");
        std::fs::write(
            &path,
            "# header comment\n0.1 0.2 0.3\n\n1 2 3 # trailing comment\n",
        )
        .unwrap();
        let c = PointCloud::load_xyz(&path).unwrap();
        assert_eq!(c.points(), &[[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]]);

        let out = dir.path().join("out.xyz");
        c.save_xyz(&out).unwrap();
        assert_eq!(PointCloud::load_xyz(&out).unwrap(), c);
    }

    #[test]
    fn xyz_rejects_nan_and_bad_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0 0 NaN\n").unwrap();
        assert!(matches!(
            PointCloud::load_xyz(&path),
            Err(GeometryError::Parse { line: 1, .. })
        ));
        std::fs::write(&path, "0 0\n").unwrap();
        assert!(PointCloud::load_xyz(&path).is_err());
    }

    #[test]
    fn cloud_rejects_non_finite() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn score_list() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, 1..8)
        }

        proptest! {
            #[test]
            fn contact_score_in_unit_interval(seed in 0u64..1000) {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let part = random_cloud(&mut rng, 20, 0.05);
                let hand = random_cloud(&mut rng, 20, 0.05);
                let s = contact_score(&part, &hand, 0.01).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }

            #[test]
            fn select_best_stable_under_permutation(scores in score_list(), rot in 0usize..8) {
                // Force a unique maximum so the selected label is well defined.
                let mut scores = scores;
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                scores.push(max + 0.5);
                let cands: Vec<GraspCandidate> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| candidate(&format!("p{i}"), s))
                    .collect();
                let baseline = select_best(&cands).unwrap().part.label.clone();

                let mut permuted = cands.clone();
                permuted.rotate_left(rot % permuted.len());
                prop_assert_eq!(select_best(&permuted).unwrap().part.label.clone(), baseline);
            }
        }
    }
}
