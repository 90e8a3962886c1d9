//! Noise-prediction networks.
//!
//! Two architectures share one contract: map (noisy grasp, step, condition)
//! to a 61-dim noise estimate.
//!
//! * `Mlp` — the desk-scale default: time embedding and condition are
//!   concatenated to the input of a 3-layer MLP.
//! * `Unet` — treats the 61 parameters as a sequence: an initial lift to
//!   `transformer_hidden` channels plus a learned positional embedding,
//!   then four blocks of (residual time-conditioned MLP, multi-head
//!   self-attention, additive condition injection, feed-forward), then a
//!   projection back to one channel.
//!
//! Both run on the autodiff tape in [`crate::nn`], so analytic gradients
//! are available for training and can be checked against finite
//! differences.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionVector;
use crate::nn::tape::{Tape, Var};
use crate::nn::{rng_for, BoundParams, ParamStore};

use super::{time_embedding, DiffusionError, GraspParams, GRASP_DIM};

/// Anything that predicts the injected noise.
pub trait Denoiser {
    fn cond_dim(&self) -> usize;
    fn predict_noise(
        &self,
        g_t: &GraspParams,
        t: usize,
        cond: &ConditionVector,
    ) -> Result<GraspParams, DiffusionError>;
}

/// Closure-backed denoiser for tests and algebraic oracles.
pub struct FnDenoiser<F> {
    cond_dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&GraspParams, usize, &ConditionVector) -> GraspParams,
{
    pub fn new(cond_dim: usize, f: F) -> Self {
        Self { cond_dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&GraspParams, usize, &ConditionVector) -> GraspParams,
{
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict_noise(
        &self,
        g_t: &GraspParams,
        t: usize,
        cond: &ConditionVector,
    ) -> Result<GraspParams, DiffusionError> {
        Ok((self.f)(g_t, t, cond))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub architecture: Architecture,
    /// Length of the condition vector the network accepts.
    pub cond_dim: usize,
    /// Sinusoidal step-embedding width; must be even.
    pub time_embed_dim: usize,
    pub mlp_hidden: usize,
    pub transformer_heads: usize,
    pub transformer_hidden: usize,
    pub transformer_dropout: f64,
    pub ffn_hidden: usize,
    pub unet_blocks: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            cond_dim: 1152,
            time_embed_dim: 64,
            mlp_hidden: 256,
            transformer_heads: 8,
            transformer_hidden: 64,
            transformer_dropout: 0.1,
            ffn_hidden: 128,
            unet_blocks: 4,
        }
    }
}

/// One training example, already pushed through the forward process.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub g_noisy: Vec<f64>,
    pub t: usize,
    pub cond: Vec<f64>,
    pub eps_target: Vec<f64>,
}

/// Dropout behavior for a forward pass. `Fixed` draws masks from the given
/// seed only, so repeated passes (e.g. the two sides of a central
/// difference) see identical masks.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Disabled,
    Fixed(u64),
}

/// A trainable denoiser: configuration plus named weights.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, DiffusionError> {
        if config.time_embed_dim % 2 != 0 || config.time_embed_dim == 0 {
            return Err(DiffusionError::OddTimeEmbedDim(config.time_embed_dim));
        }
        let mut params = ParamStore::new();
        match config.architecture {
            Architecture::Mlp => init_mlp(&config, &mut params, seed),
            Architecture::Unet => {
                if config.transformer_hidden % config.transformer_heads != 0 {
                    return Err(DiffusionError::ShapeMismatch {
                        what: "transformer_hidden must be divisible by heads",
                        expected: config.transformer_heads,
                        got: config.transformer_hidden,
                    });
                }
                init_unet(&config, &mut params, seed);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_cond(&self, got: usize) -> Result<(), DiffusionError> {
        if got != self.config.cond_dim {
            return Err(DiffusionError::ShapeMismatch {
                what: "condition vector",
                expected: self.config.cond_dim,
                got,
            });
        }
        Ok(())
    }

    /// Mean-L1 loss over a batch plus gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[NoisySample],
        dropout: DropoutMode,
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>), DiffusionError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let loss = self.batch_loss_var(&mut tape, &bound, batch, dropout)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        Ok((value, bound.gradients(&tape, &grads)))
    }

    /// Loss value only (same graph, no backward pass).
    pub fn loss_value(
        &self,
        batch: &[NoisySample],
        dropout: DropoutMode,
    ) -> Result<f64, DiffusionError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let loss = self.batch_loss_var(&mut tape, &bound, batch, dropout)?;
        Ok(tape.scalar(loss))
    }

    fn batch_loss_var(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[NoisySample],
        dropout: DropoutMode,
    ) -> Result<Var, DiffusionError> {
        if batch.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        for item in batch {
            self.check_cond(item.cond.len())?;
            if item.g_noisy.len() != GRASP_DIM || item.eps_target.len() != GRASP_DIM {
                return Err(DiffusionError::ShapeMismatch {
                    what: "grasp vector",
                    expected: GRASP_DIM,
                    got: item.g_noisy.len(),
                });
            }
        }
        match self.config.architecture {
            Architecture::Mlp => {
                let b = batch.len();
                let x = Array2::from_shape_fn((b, GRASP_DIM), |(i, j)| batch[i].g_noisy[j]);
                let mut temb = Array2::zeros((b, self.config.time_embed_dim));
                for (i, item) in batch.iter().enumerate() {
                    let e = time_embedding(item.t, self.config.time_embed_dim)?;
                    for (j, v) in e.iter().enumerate() {
                        temb[(i, j)] = *v;
                    }
                }
                let cond = Array2::from_shape_fn((b, self.config.cond_dim), |(i, j)| {
                    batch[i].cond[j]
                });
                let target = Array2::from_shape_fn((b, GRASP_DIM), |(i, j)| batch[i].eps_target[j]);

                let xv = tape.constant(x);
                let tv = tape.constant(temb);
                let cv = tape.constant(cond);
                let pred = self.forward_mlp(tape, bound, xv, tv, cv);
                let tg = tape.constant(target);
                Ok(tape.mean_abs_diff(pred, tg))
            }
            Architecture::Unet => {
                let mut total: Option<Var> = None;
                for (i, item) in batch.iter().enumerate() {
                    let x = Array2::from_shape_fn((GRASP_DIM, 1), |(r, _)| item.g_noisy[r]);
                    let e = time_embedding(item.t, self.config.time_embed_dim)?;
                    let temb = Array2::from_shape_vec((1, e.len()), e).unwrap();
                    let cond =
                        Array2::from_shape_vec((1, item.cond.len()), item.cond.clone()).unwrap();
                    let target = Array2::from_shape_fn((GRASP_DIM, 1), |(r, _)| item.eps_target[r]);

                    let xv = tape.constant(x);
                    let tv = tape.constant(temb);
                    let cv = tape.constant(cond);
                    let sample_dropout = match dropout {
                        DropoutMode::Disabled => DropoutMode::Disabled,
                        DropoutMode::Fixed(seed) => {
                            DropoutMode::Fixed(seed.wrapping_add(i as u64))
                        }
                    };
                    let pred = self.forward_unet(tape, bound, xv, tv, cv, sample_dropout);
                    let tg = tape.constant(target);
                    let l = tape.mean_abs_diff(pred, tg);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, l),
                        None => l,
                    });
                }
                let total = total.unwrap();
                Ok(tape.scale(total, 1.0 / batch.len() as f64))
            }
        }
    }

    fn forward_mlp(&self, tape: &mut Tape, p: &BoundParams, x: Var, temb: Var, cond: Var) -> Var {
        let xt = tape.concat_cols(x, temb);
        let input = tape.concat_cols(xt, cond);
        let h = linear(tape, p, input, "mlp.l1");
        let h = tape.relu(h);
        let h = linear(tape, p, h, "mlp.l2");
        let h = tape.relu(h);
        linear(tape, p, h, "mlp.l3")
    }

    fn forward_unet(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        temb: Var,
        cond: Var,
        dropout: DropoutMode,
    ) -> Var {
        let heads = self.config.transformer_heads;
        let c = self.config.transformer_hidden;
        let head_dim = c / heads;

        let mut h = linear(tape, p, x, "unet.lift");
        let pos = p.var("unet.pos");
        h = tape.add(h, pos);

        let cond_tok = linear(tape, p, cond, "unet.cond");

        for b in 0..self.config.unet_blocks {
            let prefix = format!("unet.b{b}");

            // residual block with time injection
            let a = linear(tape, p, h, &format!("{prefix}.res1"));
            let tproj = tape.matmul(temb, p.var(&format!("{prefix}.res.temb.w")));
            let a = tape.add_row(a, tproj);
            let a = tape.silu(a);
            let a = linear(tape, p, a, &format!("{prefix}.res2"));
            h = tape.add(h, a);

            // multi-head self-attention
            let n1 = affine_layer_norm(tape, p, h, &format!("{prefix}.ln1"));
            let q = tape.matmul(n1, p.var(&format!("{prefix}.attn.wq")));
            let k = tape.matmul(n1, p.var(&format!("{prefix}.attn.wk")));
            let v = tape.matmul(n1, p.var(&format!("{prefix}.attn.wv")));
            let mut merged: Option<Var> = None;
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * head_dim, head_dim);
                let kh = tape.slice_cols(k, head * head_dim, head_dim);
                let vh = tape.slice_cols(v, head * head_dim, head_dim);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                let out = tape.matmul(attn, vh);
                merged = Some(match merged {
                    Some(acc) => tape.concat_cols(acc, out),
                    None => out,
                });
            }
            let o = linear(tape, p, merged.unwrap(), &format!("{prefix}.attn.out"));
            let o = self.apply_dropout(tape, o, dropout, (b as u64) << 1);
            h = tape.add(h, o);

            // condition injection
            let cb = linear(tape, p, cond_tok, &format!("{prefix}.cond"));
            let cb = tape.silu(cb);
            h = tape.add_row(h, cb);

            // feed-forward
            let n2 = affine_layer_norm(tape, p, h, &format!("{prefix}.ln2"));
            let f = linear(tape, p, n2, &format!("{prefix}.ff1"));
            let f = tape.silu(f);
            let f = linear(tape, p, f, &format!("{prefix}.ff2"));
            let f = self.apply_dropout(tape, f, dropout, ((b as u64) << 1) | 1);
            h = tape.add(h, f);
        }

        linear(tape, p, h, "unet.out")
    }

    fn apply_dropout(&self, tape: &mut Tape, x: Var, mode: DropoutMode, site: u64) -> Var {
        let rate = self.config.transformer_dropout;
        let DropoutMode::Fixed(seed) = mode else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let shape = tape.shape(x);
        let mut rng = rng_for(seed, &format!("dropout.{site}"));
        let keep = 1.0 - rate;
        let mask = Array2::from_shape_fn(shape, |_| {
            if rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

fn linear(tape: &mut Tape, p: &BoundParams, x: Var, name: &str) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn affine_layer_norm(tape: &mut Tape, p: &BoundParams, x: Var, name: &str) -> Var {
    let n = tape.layer_norm_rows(x, 1e-5);
    let g = p.var(&format!("{name}.g"));
    let b = p.var(&format!("{name}.b"));
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

fn init_linear(params: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) {
    params.init_normal(&format!("{name}.w"), rows, cols, seed);
    params.init_zeros(&format!("{name}.b"), 1, cols);
}

fn init_mlp(cfg: &DenoiserConfig, params: &mut ParamStore, seed: u64) {
    let input = GRASP_DIM + cfg.time_embed_dim + cfg.cond_dim;
    init_linear(params, "mlp.l1", input, cfg.mlp_hidden, seed);
    init_linear(params, "mlp.l2", cfg.mlp_hidden, cfg.mlp_hidden, seed);
    init_linear(params, "mlp.l3", cfg.mlp_hidden, GRASP_DIM, seed);
}

fn init_unet(cfg: &DenoiserConfig, params: &mut ParamStore, seed: u64) {
    let c = cfg.transformer_hidden;
    init_linear(params, "unet.lift", 1, c, seed);
    params.init_normal("unet.pos", GRASP_DIM, c, seed);
    init_linear(params, "unet.cond", cfg.cond_dim, c, seed);
    for b in 0..cfg.unet_blocks {
        let prefix = format!("unet.b{b}");
        init_linear(params, &format!("{prefix}.res1"), c, c, seed);
        params.init_normal(&format!("{prefix}.res.temb.w"), cfg.time_embed_dim, c, seed);
        init_linear(params, &format!("{prefix}.res2"), c, c, seed);
        for ln in ["ln1", "ln2"] {
            let mut gain = Array2::zeros((1, c));
            gain.fill(1.0);
            params.insert(&format!("{prefix}.{ln}.g"), gain);
            params.init_zeros(&format!("{prefix}.{ln}.b"), 1, c);
        }
        for w in ["wq", "wk", "wv"] {
            params.init_normal(&format!("{prefix}.attn.{w}"), c, c, seed);
        }
        init_linear(params, &format!("{prefix}.attn.out"), c, c, seed);
        init_linear(params, &format!("{prefix}.cond"), c, c, seed);
        init_linear(params, &format!("{prefix}.ff1"), c, cfg.ffn_hidden, seed);
        init_linear(params, &format!("{prefix}.ff2"), cfg.ffn_hidden, c, seed);
    }
    init_linear(params, "unet.out", c, 1, seed);
}

impl Denoiser for DenoiserModel {
    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict_noise(
        &self,
        g_t: &GraspParams,
        t: usize,
        cond: &ConditionVector,
    ) -> Result<GraspParams, DiffusionError> {
        self.check_cond(cond.len())?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = match self.config.architecture {
            Architecture::Mlp => {
                let x = Array2::from_shape_fn((1, GRASP_DIM), |(_, j)| g_t.as_slice()[j]);
                let e = time_embedding(t, self.config.time_embed_dim)?;
                let temb = Array2::from_shape_vec((1, e.len()), e).unwrap();
                let cv = Array2::from_shape_vec((1, cond.len()), cond.as_slice().to_vec()).unwrap();
                let xv = tape.constant(x);
                let tv = tape.constant(temb);
                let cvv = tape.constant(cv);
                let pred = self.forward_mlp(&mut tape, &bound, xv, tv, cvv);
                tape.value(pred).row(0).to_vec()
            }
            Architecture::Unet => {
                let x = Array2::from_shape_fn((GRASP_DIM, 1), |(r, _)| g_t.as_slice()[r]);
                let e = time_embedding(t, self.config.time_embed_dim)?;
                let temb = Array2::from_shape_vec((1, e.len()), e).unwrap();
                let cv = Array2::from_shape_vec((1, cond.len()), cond.as_slice().to_vec()).unwrap();
                let xv = tape.constant(x);
                let tv = tape.constant(temb);
                let cvv = tape.constant(cv);
                let pred =
                    self.forward_unet(&mut tape, &bound, xv, tv, cvv, DropoutMode::Disabled);
                tape.value(pred).column(0).to_vec()
            }
        };
        GraspParams::from_vec(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, q_sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_config(arch: Architecture) -> DenoiserConfig {
        DenoiserConfig {
            architecture: arch,
            cond_dim: 5,
            time_embed_dim: 8,
            mlp_hidden: 16,
            transformer_heads: 2,
            transformer_hidden: 8,
            transformer_dropout: 0.1,
            ffn_hidden: 12,
            unet_blocks: 2,
            ..Default::default()
        }
    }

    fn toy_batch(cond_dim: usize, n: usize, seed: u64) -> Vec<NoisySample> {
        let sched = make_schedule(10, 1e-3, 1e-1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let g0 = GraspParams::standard_normal(&mut rng);
                let eps = GraspParams::standard_normal(&mut rng);
                let t = 1 + (i % 10);
                let g_noisy = q_sample(&g0, t, &eps, &sched).unwrap();
                let cond = (0..cond_dim)
                    .map(|_| crate::nn::normal_sample(&mut rng))
                    .collect();
                NoisySample {
                    g_noisy: g_noisy.as_slice().to_vec(),
                    t,
                    cond,
                    eps_target: eps.as_slice().to_vec(),
                }
            })
            .collect()
    }

    /// Central finite differences over randomly chosen scalar parameters.
    fn gradient_check(arch: Architecture, dropout: DropoutMode, perturbations: usize) {
        let cfg = toy_config(arch);
        let model = DenoiserModel::new(cfg.clone(), 42).unwrap();
        let batch = toy_batch(cfg.cond_dim, 3, 7);
        let (_, grads) = model.loss_and_grads(&batch, dropout).unwrap();

        let names: Vec<String> = model.params().names().map(String::from).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let h = 1e-6;
        let mut checked = 0;
        let mut attempts = 0;
        while checked < perturbations && attempts < perturbations * 10 {
            attempts += 1;
            let name = &names[rng.gen_range(0..names.len())];
            let shape = model.params().get(name).dim();
            let r = rng.gen_range(0..shape.0);
            let c = rng.gen_range(0..shape.1);

            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(name)[(r, c)] += delta;
                m.loss_value(&batch, dropout).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[name][(r, c)];
            if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
                // parameter is locally inert (e.g. behind a dead ReLU);
                // both sides agree that the gradient vanishes
                checked += 1;
                continue;
            }
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(
                rel < 1e-4,
                "{name}[{r},{c}]: fd={fd:e} analytic={analytic:e} rel={rel:e}"
            );
            checked += 1;
        }
        assert_eq!(checked, perturbations);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        gradient_check(Architecture::Mlp, DropoutMode::Disabled, 60);
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        gradient_check(Architecture::Unet, DropoutMode::Disabled, 60);
    }

    #[test]
    fn unet_gradients_match_with_fixed_dropout() {
        gradient_check(Architecture::Unet, DropoutMode::Fixed(5), 30);
    }

    #[test]
    fn predict_noise_is_deterministic_and_shaped() {
        for arch in [Architecture::Mlp, Architecture::Unet] {
            let model = DenoiserModel::new(toy_config(arch), 1).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(2);
            let g = GraspParams::standard_normal(&mut rng);
            let cond = ConditionVector::new(vec![0.1; 5]).unwrap();
            let a = model.predict_noise(&g, 3, &cond).unwrap();
            let b = model.predict_noise(&g, 3, &cond).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.as_slice().len(), GRASP_DIM);
        }
    }

    #[test]
    fn cond_dim_mismatch_is_an_error() {
        let model = DenoiserModel::new(toy_config(Architecture::Mlp), 1).unwrap();
        let g = GraspParams::zeros();
        let cond = ConditionVector::new(vec![0.0; 4]).unwrap();
        assert!(matches!(
            model.predict_noise(&g, 1, &cond),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn unet_rejects_indivisible_heads() {
        let mut cfg = toy_config(Architecture::Unet);
        cfg.transformer_hidden = 9;
        assert!(DenoiserModel::new(cfg, 1).is_err());
    }

    #[test]
    fn dropout_mask_is_stable_for_fixed_seed() {
        let cfg = toy_config(Architecture::Unet);
        let model = DenoiserModel::new(cfg.clone(), 3).unwrap();
        let batch = toy_batch(cfg.cond_dim, 2, 8);
        let a = model.loss_value(&batch, DropoutMode::Fixed(11)).unwrap();
        let b = model.loss_value(&batch, DropoutMode::Fixed(11)).unwrap();
        let c = model.loss_value(&batch, DropoutMode::Fixed(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
