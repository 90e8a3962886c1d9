//! Feature extraction that assembles the diffusion condition: hierarchical
//! set-abstraction encoding of point clouds, cross-attention between the
//! category and part description features, and concatenation into the final
//! condition vector.
//!
//! Both geometry encoders and the attention projections are seeded random
//! weights here; nothing pretrained ships with the crate. Clouds are
//! centered at their centroid and scaled to unit max radius before
//! encoding, so the features are invariant to rigid translation and global
//! scale of the input.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;
use crate::language::TokenFeatures;
use crate::nn::{rng_for, normal_sample};

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cannot sample {m} points from a cloud of {n}")]
    SampleTooLarge { m: usize, n: usize },
    #[error("seed index {seed} out of range for cloud of {n}")]
    SeedOutOfRange { seed: usize, n: usize },
    #[error("encoder needs at least {need} points, got {got}; upsample first")]
    NotEnoughPoints { need: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cross-attention has no unmasked key tokens")]
    AllKeysMasked,
    #[error("cross-attention has no unmasked query tokens")]
    AllQueriesMasked,
}

/// Hierarchy of the set-abstraction encoder: per layer, how many centers
/// to sample and the embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetAbstractionConfig {
    pub num_layers: usize,
    pub sampled_points: Vec<usize>,
    pub embedding_sizes: Vec<usize>,
    pub group_size: usize,
}

impl Default for SetAbstractionConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            sampled_points: vec![1024, 256, 64, 16],
            embedding_sizes: vec![64, 128, 256, 512],
            group_size: 32,
        }
    }
}

impl SetAbstractionConfig {
    pub fn validate(&self) -> Result<(), ConditioningError> {
        if self.num_layers == 0 {
            return Err(ConditioningError::Config("num_layers must be >= 1".into()));
        }
        if self.sampled_points.len() != self.num_layers
            || self.embedding_sizes.len() != self.num_layers
        {
            return Err(ConditioningError::Config(format!(
                "sampled_points and embedding_sizes must have num_layers = {} entries",
                self.num_layers
            )));
        }
        if self.sampled_points.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ConditioningError::Config(
                "sampled_points must be strictly decreasing".into(),
            ));
        }
        if self.sampled_points.iter().any(|&m| m == 0) {
            return Err(ConditioningError::Config("sampled_points must be positive".into()));
        }
        if self.group_size == 0 {
            return Err(ConditioningError::Config("group_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Output feature width.
    pub fn geo_dim(&self) -> usize {
        *self.embedding_sizes.last().unwrap_or(&0)
    }
}

/// Per-layer weights of the shared two-layer point map.
#[derive(Debug, Clone)]
struct SaLayerWeights {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

/// Seeded weights for one set-abstraction encoder.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    layers: Vec<SaLayerWeights>,
}

impl EncoderWeights {
    pub fn init(cfg: &SetAbstractionConfig, seed: u64) -> Result<Self, ConditioningError> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut in_dim = 3; // first layer sees center-relative coordinates only
        for (i, &emb) in cfg.embedding_sizes.iter().enumerate() {
            layers.push(SaLayerWeights {
                w1: random_matrix(in_dim, emb, seed, &format!("sa{i}.w1")),
                b1: Array2::zeros((1, emb)),
                w2: random_matrix(emb, emb, seed, &format!("sa{i}.w2")),
                b2: Array2::zeros((1, emb)),
            });
            in_dim = 3 + emb; // next layer: relative coords + inherited feature
        }
        Ok(Self { layers })
    }

    fn check(&self, cfg: &SetAbstractionConfig) -> Result<(), ConditioningError> {
        if self.layers.len() != cfg.num_layers {
            return Err(ConditioningError::ShapeMismatch {
                what: "encoder layer count",
                expected: cfg.num_layers,
                got: self.layers.len(),
            });
        }
        for (i, (layer, &emb)) in self.layers.iter().zip(&cfg.embedding_sizes).enumerate() {
            let expect_in = if i == 0 { 3 } else { 3 + cfg.embedding_sizes[i - 1] };
            if layer.w1.dim() != (expect_in, emb) || layer.w2.dim() != (emb, emb) {
                return Err(ConditioningError::ShapeMismatch {
                    what: "encoder weight shape",
                    expected: emb,
                    got: layer.w1.ncols(),
                });
            }
        }
        Ok(())
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, name: &str) -> Array2<f64> {
    let mut rng = rng_for(seed, name);
    let std = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| normal_sample(&mut rng) * std)
}

/// Global geometry feature of one cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoFeature {
    vector: Vec<f64>,
}

impl GeoFeature {
    pub fn new(vector: Vec<f64>) -> Self {
        Self { vector }
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }
}

/// Token-resolved cross-attention output plus its pooled summary.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub matrix: Array2<f64>,
    pub pooled: Vec<f64>,
}

/// The concatenated condition [object geo | part geo | pooled fused].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    values: Vec<f64>,
}

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ConditioningError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ConditioningError::Config(
                "condition vector has non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Greedy farthest-point sampling. The first pick is `seed_index`; each
/// following pick maximizes the distance to the chosen set, ties resolved
/// to the lowest index.
pub fn farthest_point_sample(
    pc: &PointCloud,
    m: usize,
    seed_index: usize,
) -> Result<Vec<usize>, ConditioningError> {
    let n = pc.len();
    if n == 0 {
        return Err(ConditioningError::EmptyCloud);
    }
    if m == 0 || m > n {
        return Err(ConditioningError::SampleTooLarge { m, n });
    }
    if seed_index >= n {
        return Err(ConditioningError::SeedOutOfRange { seed: seed_index, n });
    }
    let pts = pc.points();
    let mut chosen = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    chosen.push(current);
    for _ in 1..m {
        let cp = pts[current];
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let dx = p[0] - cp[0];
            let dy = p[1] - cp[1];
            let dz = p[2] - cp[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Canonical FPS seed: the lexicographically smallest point, which does not
/// depend on input order.
fn canonical_seed_index(points: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.as_slice() < points[best].as_slice() {
            best = i;
        }
    }
    best
}

/// Hierarchical set-abstraction encoding.
///
/// Per layer: farthest-point-sample the centers, group each center's
/// k-nearest neighbors, push every member's (relative position, feature)
/// through a shared two-layer ReLU map, and max-reduce per group. A final
/// global max-reduce yields the feature vector.
pub fn encode_pointcloud(
    pc: &PointCloud,
    cfg: &SetAbstractionConfig,
    weights: &EncoderWeights,
) -> Result<GeoFeature, ConditioningError> {
    cfg.validate()?;
    weights.check(cfg)?;
    if pc.is_empty() {
        return Err(ConditioningError::EmptyCloud);
    }
    if pc.len() < cfg.sampled_points[0] {
        return Err(ConditioningError::NotEnoughPoints {
            need: cfg.sampled_points[0],
            got: pc.len(),
        });
    }

    // normalize: centroid to origin, max radius to 1
    let centroid = pc.centroid();
    let mut positions: Vec<[f64; 3]> = pc
        .points()
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_r = positions
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_r > 0.0 {
        for p in &mut positions {
            for v in p.iter_mut() {
                *v /= max_r;
            }
        }
    }

    let mut features: Option<Array2<f64>> = None; // n × d, follows positions

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let m = cfg.sampled_points[layer_idx];
        let emb = cfg.embedding_sizes[layer_idx];
        let n = positions.len();
        let cloud = PointCloud::new(positions.clone()).expect("normalized coords are finite");
        let seed = canonical_seed_index(&positions);
        let centers = farthest_point_sample(&cloud, m.min(n), seed)?;

        let k = cfg.group_size.min(n);
        let mut next_positions = Vec::with_capacity(centers.len());
        let mut next_features = Array2::zeros((centers.len(), emb));

        for (ci, &center_idx) in centers.iter().enumerate() {
            let c = positions[center_idx];
            // k nearest neighbors of the center (including itself)
            let mut order: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let dx = p[0] - c[0];
                    let dy = p[1] - c[1];
                    let dz = p[2] - c[2];
                    (dx * dx + dy * dy + dz * dz, i)
                })
                .collect();
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            order.truncate(k);

            let in_dim = layer.w1.nrows();
            let mut group = Array2::zeros((k, in_dim));
            for (gi, &(_, pi)) in order.iter().enumerate() {
                let p = positions[pi];
                group[(gi, 0)] = p[0] - c[0];
                group[(gi, 1)] = p[1] - c[1];
                group[(gi, 2)] = p[2] - c[2];
                if let Some(f) = &features {
                    for d in 0..f.ncols() {
                        group[(gi, 3 + d)] = f[(pi, d)];
                    }
                }
            }
            let h = relu(&(group.dot(&layer.w1) + &layer.b1));
            let h = relu(&(h.dot(&layer.w2) + &layer.b2));
            for d in 0..emb {
                let mut best = f64::NEG_INFINITY;
                for gi in 0..k {
                    best = best.max(h[(gi, d)]);
                }
                next_features[(ci, d)] = best;
            }
            next_positions.push(c);
        }
        positions = next_positions;
        features = Some(next_features);
    }

    let feats = features.expect("at least one layer");
    let out = (0..feats.ncols())
        .map(|d| {
            (0..feats.nrows())
                .map(|r| feats[(r, d)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(GeoFeature::new(out))
}

fn relu(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v.max(0.0))
}

/// Q/K/V projections for the description cross-attention.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
}

impl AttentionWeights {
    pub fn init(input_dim: usize, attn_dim: usize, seed: u64) -> Self {
        Self {
            wq: random_matrix(input_dim, attn_dim, seed, "attn.wq"),
            bq: Array2::zeros((1, attn_dim)),
            wk: random_matrix(input_dim, attn_dim, seed, "attn.wk"),
            bk: Array2::zeros((1, attn_dim)),
            wv: random_matrix(input_dim, attn_dim, seed, "attn.wv"),
            bv: Array2::zeros((1, attn_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn attn_dim(&self) -> usize {
        self.wq.ncols()
    }
}

/// Scaled dot-product cross-attention from the category tokens (queries)
/// onto one part's tokens (keys/values). Masked key columns are excluded
/// before the softmax; masked query rows are zeroed in the output and
/// excluded from the pooled mean. Scaling uses the projected width.
pub fn cross_attention(
    f_cat: &TokenFeatures,
    f_part: &TokenFeatures,
    weights: &AttentionWeights,
) -> Result<FusedFeature, ConditioningError> {
    let d = weights.input_dim();
    if f_cat.dim() != d {
        return Err(ConditioningError::ShapeMismatch {
            what: "category feature dim",
            expected: d,
            got: f_cat.dim(),
        });
    }
    if f_part.dim() != d {
        return Err(ConditioningError::ShapeMismatch {
            what: "part feature dim",
            expected: d,
            got: f_part.dim(),
        });
    }
    if !f_part.mask().iter().any(|&m| m) {
        return Err(ConditioningError::AllKeysMasked);
    }
    if !f_cat.mask().iter().any(|&m| m) {
        return Err(ConditioningError::AllQueriesMasked);
    }

    let attn_dim = weights.attn_dim();
    let q = f_cat.matrix().dot(&weights.wq) + &weights.bq;
    let k = f_part.matrix().dot(&weights.wk) + &weights.bk;
    let v = f_part.matrix().dot(&weights.wv) + &weights.bv;

    let scale = 1.0 / (attn_dim as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    for (j, &real) in f_part.mask().iter().enumerate() {
        if !real {
            for i in 0..scores.nrows() {
                scores[(i, j)] = f64::NEG_INFINITY;
            }
        }
    }

    let mut out = Array2::zeros((q.nrows(), attn_dim));
    for i in 0..scores.nrows() {
        if !f_cat.mask()[i] {
            continue; // masked query rows stay zero
        }
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&s| if s.is_finite() { (s - max).exp() } else { 0.0 })
            .collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            let w = e / sum;
            if w == 0.0 {
                continue;
            }
            for a in 0..attn_dim {
                out[(i, a)] += w * v[(j, a)];
            }
        }
    }

    let real_queries: Vec<usize> = f_cat
        .mask()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    let pooled = (0..attn_dim)
        .map(|a| real_queries.iter().map(|&i| out[(i, a)]).sum::<f64>() / real_queries.len() as f64)
        .collect();

    Ok(FusedFeature {
        matrix: out,
        pooled,
    })
}

/// Concatenates [object geometry | part geometry | pooled fused feature].
pub fn build_condition(
    f_obj: &GeoFeature,
    f_part: &GeoFeature,
    f_fused: &FusedFeature,
) -> Result<ConditionVector, ConditioningError> {
    if f_obj.len() != f_part.len() {
        return Err(ConditioningError::ShapeMismatch {
            what: "part geometry feature",
            expected: f_obj.len(),
            got: f_part.len(),
        });
    }
    let mut values = Vec::with_capacity(f_obj.len() + f_part.len() + f_fused.pooled.len());
    values.extend_from_slice(f_obj.as_slice());
    values.extend_from_slice(f_part.as_slice());
    values.extend_from_slice(&f_fused.pooled);
    ConditionVector::new(values)
}
