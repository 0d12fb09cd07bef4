//! Parametric maps from raw feature vectors to unit descriptors.
//!
//! An [`Embedder`] exposes two forwards: a tape-free one and a taped one whose
//! tape is later consumed by `backward`. Both share the same arithmetic, so
//! they produce bitwise-identical descriptors.
//!
//! Every tape holds a [`TapeToken`] from the embedder's [`TapeMonitor`], which
//! counts live tapes and records the peak. The multistage driver relies on
//! this to prove that at most one tape exists at a time.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{gem_pool, gem_pool_backward, l2_normalize, l2_normalize_backward, normalize, GemTape, Matrix, NormTape};

#[derive(Debug, Default)]
struct TapeCounts {
    live: AtomicUsize,
    peak: AtomicUsize,
    created: AtomicUsize,
}

#[derive(Debug, Clone, Default)]
pub struct TapeMonitor(Arc<TapeCounts>);

impl TapeMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn token(&self) -> TapeToken {
        let live = self.0.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.0.peak.fetch_max(live, Ordering::SeqCst);
        self.0.created.fetch_add(1, Ordering::SeqCst);
        TapeToken(self.0.clone())
    }

    pub fn live(&self) -> usize {
        self.0.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.0.peak.load(Ordering::SeqCst)
    }

    pub fn created(&self) -> usize {
        self.0.created.load(Ordering::SeqCst)
    }

    /// Resets the peak and creation count to the current live state.
    pub fn reset(&self) {
        self.0.peak.store(self.live(), Ordering::SeqCst);
        self.0.created.store(0, Ordering::SeqCst);
    }
}

/// Marks a live tape; released on drop.
#[derive(Debug)]
pub struct TapeToken(Arc<TapeCounts>);

impl Drop for TapeToken {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// One gradient slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradAccumulator {
    grads: Vec<Vec<f64>>,
    count: usize,
}

impl ParamGradAccumulator {
    pub fn for_params(params: &[Vec<f64>]) -> Self {
        Self {
            grads: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            count: 0,
        }
    }

    pub fn for_model<E: Embedder + ?Sized>(model: &E) -> Self {
        Self::for_params(model.params())
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.grads[i]
    }

    /// Number of per-image contributions since the last reset.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mark_contribution(&mut self) {
        self.count += 1;
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.count = 0;
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise relative difference to `other`.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let scale = self.max_abs().max(other.max_abs()).max(f64::MIN_POSITIVE);
        self.grads
            .iter()
            .flatten()
            .zip(other.grads.iter().flatten())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12 * scale))
            .fold(0.0, f64::max)
    }

    pub fn check_shapes(&self, params: &[Vec<f64>]) -> Result<()> {
        let ok = self.grads.len() == params.len()
            && self.grads.iter().zip(params).all(|(g, p)| g.len() == p.len());
        if !ok {
            return Err(Error::ShapeMismatch(
                "gradient accumulator does not match the model parameters".into(),
            ));
        }
        Ok(())
    }
}

pub trait Embedder {
    type Tape;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn params(&self) -> &[Vec<f64>];
    fn params_mut(&mut self) -> &mut [Vec<f64>];
    fn monitor(&self) -> &TapeMonitor;

    /// Tape-free forward.
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, Self::Tape)>;
    /// Adds this image's parameter gradient, given `d loss / d descriptor`.
    fn backward(&self, tape: Self::Tape, grad: &[f64], acc: &mut ParamGradAccumulator) -> Result<()>;

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }
}

fn gaussian_tensor<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// `out = W x` for row-major `W` of shape `rows x x.len()`.
fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `out = W^T g` for row-major `W` of shape `g.len() x cols`.
fn matvec_t(w: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * a;
        }
    }
    out
}

/// `acc += g x^T`.
fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        for (a, xv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

/// `d = normalize(W x)`.
#[derive(Debug, Clone)]
pub struct LinearEmbedder {
    input_dim: usize,
    output_dim: usize,
    params: Vec<Vec<f64>>,
    monitor: TapeMonitor,
}

#[derive(Debug)]
pub struct LinearTape {
    input: Vec<f64>,
    norm: NormTape,
    _token: TapeToken,
}

impl LinearEmbedder {
    pub fn new(weights: Matrix) -> Self {
        Self {
            input_dim: weights.cols(),
            output_dim: weights.rows(),
            params: vec![weights.as_slice().to_vec()],
            monitor: TapeMonitor::new(),
        }
    }

    /// Gaussian weights with standard deviation `1 / sqrt(input_dim)`.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let w = gaussian_tensor(rng, input_dim * output_dim, 1.0 / (input_dim as f64).sqrt());
        Self::new(Matrix::from_vec(output_dim, input_dim, w).unwrap())
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[0]
    }
}

impl Embedder for LinearEmbedder {
    type Tape = LinearTape;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn monitor(&self) -> &TapeMonitor {
        &self.monitor
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        normalize(&matvec(&self.params[0], x, self.output_dim))
    }

    fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, LinearTape)> {
        self.check_input(x)?;
        let token = self.monitor.token();
        let (d, norm) = l2_normalize(&matvec(&self.params[0], x, self.output_dim))?;
        Ok((
            d,
            LinearTape {
                input: x.to_vec(),
                norm,
                _token: token,
            },
        ))
    }

    fn backward(&self, tape: LinearTape, grad: &[f64], acc: &mut ParamGradAccumulator) -> Result<()> {
        let gy = l2_normalize_backward(&tape.norm, grad);
        add_outer(acc.tensor_mut(0), &gy, &tape.input);
        acc.mark_contribution();
        Ok(())
    }
}

/// `d = normalize(W2 tanh(W1 x + b1))`.
#[derive(Debug, Clone)]
pub struct MlpEmbedder {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: Vec<Vec<f64>>,
    monitor: TapeMonitor,
}

#[derive(Debug)]
pub struct MlpTape {
    input: Vec<f64>,
    hidden: Vec<f64>,
    norm: NormTape,
    _token: TapeToken,
}

impl MlpEmbedder {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = gaussian_tensor(rng, hidden_dim * input_dim, 1.0 / (input_dim as f64).sqrt());
        let b1 = gaussian_tensor(rng, hidden_dim, 0.1);
        let w2 = gaussian_tensor(rng, output_dim * hidden_dim, 1.0 / (hidden_dim as f64).sqrt());
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            params: vec![w1, b1, w2],
            monitor: TapeMonitor::new(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.params[0], x, self.hidden_dim)
            .into_iter()
            .zip(&self.params[1])
            .map(|(a, b)| (a + b).tanh())
            .collect()
    }
}

impl Embedder for MlpEmbedder {
    type Tape = MlpTape;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn monitor(&self) -> &TapeMonitor {
        &self.monitor
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.hidden(x);
        normalize(&matvec(&self.params[2], &h, self.output_dim))
    }

    fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        self.check_input(x)?;
        let token = self.monitor.token();
        let hidden = self.hidden(x);
        let (d, norm) = l2_normalize(&matvec(&self.params[2], &hidden, self.output_dim))?;
        Ok((
            d,
            MlpTape {
                input: x.to_vec(),
                hidden,
                norm,
                _token: token,
            },
        ))
    }

    fn backward(&self, tape: MlpTape, grad: &[f64], acc: &mut ParamGradAccumulator) -> Result<()> {
        let gy = l2_normalize_backward(&tape.norm, grad);
        add_outer(acc.tensor_mut(2), &gy, &tape.hidden);
        let gh = matvec_t(&self.params[2], &gy, self.hidden_dim);
        let ga: Vec<f64> = gh
            .iter()
            .zip(&tape.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        add_outer(acc.tensor_mut(0), &ga, &tape.input);
        for (b, g) in acc.tensor_mut(1).iter_mut().zip(&ga) {
            *b += g;
        }
        acc.mark_contribution();
        Ok(())
    }
}

/// Splits the input into equal parts (stand-ins for spatial locations), maps
/// each through a shared `relu(W x_part + b)`, GeM-pools across parts with a
/// learnable power and normalizes.
#[derive(Debug, Clone)]
pub struct GemPartsEmbedder {
    parts: usize,
    part_dim: usize,
    output_dim: usize,
    params: Vec<Vec<f64>>,
    monitor: TapeMonitor,
}

#[derive(Debug)]
pub struct GemPartsTape {
    input: Vec<f64>,
    pre_activation: Matrix,
    gem: GemTape,
    norm: NormTape,
    _token: TapeToken,
}

/// Initial GeM power.
pub const GEM_INITIAL_POWER: f64 = 3.0;

impl GemPartsEmbedder {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        parts: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if parts == 0 || !input_dim.is_multiple_of(parts) {
            return Err(Error::InvalidConfig(format!(
                "input dimension {input_dim} is not divisible into {parts} parts"
            )));
        }
        let part_dim = input_dim / parts;
        let w = gaussian_tensor(rng, output_dim * part_dim, 1.0 / (part_dim as f64).sqrt());
        let b = vec![0.1; output_dim];
        Ok(Self {
            parts,
            part_dim,
            output_dim,
            params: vec![w, b, vec![GEM_INITIAL_POWER]],
            monitor: TapeMonitor::new(),
        })
    }

    pub fn power(&self) -> f64 {
        self.params[2][0]
    }

    fn activations(&self, x: &[f64]) -> (Matrix, Matrix) {
        let mut pre = Matrix::zeros(self.parts, self.output_dim);
        for p in 0..self.parts {
            let part = &x[p * self.part_dim..(p + 1) * self.part_dim];
            let a = matvec(&self.params[0], part, self.output_dim);
            for (o, (v, b)) in pre.row_mut(p).iter_mut().zip(a.iter().zip(&self.params[1])) {
                *o = v + b;
            }
        }
        let mut act = pre.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        (pre, act)
    }
}

impl Embedder for GemPartsEmbedder {
    type Tape = GemPartsTape;

    fn input_dim(&self) -> usize {
        self.parts * self.part_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn monitor(&self) -> &TapeMonitor {
        &self.monitor
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (_, act) = self.activations(x);
        let (pooled, _) = gem_pool(&act, self.power())?;
        normalize(&pooled)
    }

    fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, GemPartsTape)> {
        self.check_input(x)?;
        let token = self.monitor.token();
        let (pre_activation, act) = self.activations(x);
        let (pooled, gem) = gem_pool(&act, self.power())?;
        let (d, norm) = l2_normalize(&pooled)?;
        Ok((
            d,
            GemPartsTape {
                input: x.to_vec(),
                pre_activation,
                gem,
                norm,
                _token: token,
            },
        ))
    }

    fn backward(&self, tape: GemPartsTape, grad: &[f64], acc: &mut ParamGradAccumulator) -> Result<()> {
        let g_pooled = l2_normalize_backward(&tape.norm, grad);
        let (g_act, g_power) = gem_pool_backward(&tape.gem, &g_pooled);
        acc.tensor_mut(2)[0] += g_power;
        for p in 0..self.parts {
            let ga: Vec<f64> = g_act
                .row(p)
                .iter()
                .zip(tape.pre_activation.row(p))
                .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                .collect();
            let part = &tape.input[p * self.part_dim..(p + 1) * self.part_dim];
            add_outer(acc.tensor_mut(0), &ga, part);
            for (b, g) in acc.tensor_mut(1).iter_mut().zip(&ga) {
                *b += g;
            }
        }
        acc.mark_contribution();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks `backward` against central differences of `<forward(x), g>`.
    fn check_param_grads<E: Embedder + Clone>(model: &E, x: &[f64], g: &[f64], tol: f64) {
        let mut acc = ParamGradAccumulator::for_model(model);
        let (_, tape) = model.forward_taped(x).unwrap();
        model.backward(tape, g, &mut acc).unwrap();
        let h = 1e-6;
        for t in 0..model.params().len() {
            for k in 0..model.params()[t].len() {
                let mut up = model.clone();
                up.params_mut()[t][k] += h;
                let mut down = model.clone();
                down.params_mut()[t][k] -= h;
                let numeric = (dot(&up.forward(x).unwrap(), g) - dot(&down.forward(x).unwrap(), g)) / (2.0 * h);
                let a = acc.grads()[t][k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err <= tol, "tensor {t} entry {k}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn taped_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lin = LinearEmbedder::random(12, 5, &mut rng);
        let mlp = MlpEmbedder::random(12, 7, 5, &mut rng);
        let gem = GemPartsEmbedder::random(12, 3, 5, &mut rng).unwrap();
        assert_eq!(lin.forward(&x).unwrap(), lin.forward_taped(&x).unwrap().0);
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward_taped(&x).unwrap().0);
        assert_eq!(gem.forward(&x).unwrap(), gem.forward_taped(&x).unwrap().0);
    }

    #[test]
    fn identity_weights_normalize_the_input() {
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let model = LinearEmbedder::new(w);
        let d = model.forward(&[3.0, 0.0, 4.0]).unwrap();
        assert_eq!(d, vec![0.6, 0.0, 0.8]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        check_param_grads(&LinearEmbedder::random(8, 4, &mut rng), &x, &g, 1e-5);
        check_param_grads(&MlpEmbedder::random(8, 6, 4, &mut rng), &x, &g, 1e-5);
        check_param_grads(&GemPartsEmbedder::random(8, 4, 4, &mut rng).unwrap(), &x, &g, 1e-4);
    }

    #[test]
    fn tapes_are_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LinearEmbedder::random(4, 3, &mut rng);
        let x = [1.0, 0.5, -0.2, 0.3];
        model.forward(&x).unwrap();
        assert_eq!(model.monitor().created(), 0);
        let (_, t1) = model.forward_taped(&x).unwrap();
        let (_, t2) = model.forward_taped(&x).unwrap();
        assert_eq!(model.monitor().live(), 2);
        drop(t1);
        drop(t2);
        assert_eq!(model.monitor().live(), 0);
        assert_eq!(model.monitor().peak(), 2);
        model.monitor().reset();
        assert_eq!(model.monitor().peak(), 0);
    }

    #[test]
    fn dimension_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = LinearEmbedder::random(4, 3, &mut rng);
        assert!(matches!(model.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(GemPartsEmbedder::random(10, 3, 4, &mut rng).is_err());
    }
}
