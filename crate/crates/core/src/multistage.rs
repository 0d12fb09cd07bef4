//! Three-stage backpropagation with bounded memory.
//!
//! 1. Forward every image without tapes and stack the descriptors.
//! 2. Compute the loss and its gradient with respect to the descriptors
//!    (descriptor-space only, no network pass).
//! 3. For each image in batch order, forward again with a tape and backprop
//!    that image's descriptor gradient into the parameter accumulator. Only
//!    one tape is alive at any time.
//!
//! The accumulated gradient is exactly the full-batch gradient, because the
//! loss only depends on the parameters through the descriptors.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, ParamGradAccumulator};
use crate::error::{Error, Result};
use crate::gradients::{loss_backward_descriptors, GradientBuffer};
use crate::numerics::{DescriptorMatrix, Matrix};
use crate::quantized::{BatchLabels, LossConfig, LossOutput};

/// Network passes and optimizer updates performed so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub forwards: u64,
    pub backwards: u64,
    pub updates: u64,
}

impl Counters {
    pub fn record_forwards(&mut self, n: usize) {
        self.forwards += n as u64;
    }

    pub fn record_backwards(&mut self, n: usize) {
        self.backwards += n as u64;
    }

    pub fn record_update(&mut self) {
        self.updates += 1;
    }

    pub fn report(&self, wall_seconds: f64) -> CounterReport {
        CounterReport {
            forwards: self.forwards,
            backwards: self.backwards,
            updates: self.updates,
            wall_seconds,
        }
    }
}

/// Per-run budget record, serialized as JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterReport {
    pub forwards: u64,
    pub backwards: u64,
    pub updates: u64,
    pub wall_seconds: f64,
}

/// Budget bookkeeping for one AP training step of a given batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub batch_size: usize,
}

impl StagePlan {
    pub fn stage1(&self, counters: &mut Counters) {
        counters.record_forwards(self.batch_size);
    }

    pub fn stage3(&self, counters: &mut Counters) {
        counters.record_forwards(self.batch_size);
        counters.record_backwards(self.batch_size);
    }

    /// Counts `iterations` full steps (stages 1 and 3 plus one update each)
    /// without doing any arithmetic.
    pub fn dry_run(&self, iterations: u64) -> Counters {
        let mut c = Counters::default();
        for _ in 0..iterations {
            self.stage1(&mut c);
            self.stage3(&mut c);
            c.record_update();
        }
        c
    }
}

fn check_batch<E: Embedder>(model: &E, batch: &Matrix) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::TooFewItems {
            needed: 1,
            available: 0,
        });
    }
    if batch.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: batch.cols(),
        });
    }
    Ok(())
}

/// Stage 1: tape-free descriptors for every row of `batch`.
pub fn stage1_forward<E: Embedder + Sync>(
    model: &E,
    batch: &Matrix,
    counters: &mut Counters,
) -> Result<DescriptorMatrix> {
    check_batch(model, batch)?;
    let rows = (0..batch.rows())
        .into_par_iter()
        .map(|i| model.forward(batch.row(i)))
        .collect::<Result<Vec<_>>>()?;
    StagePlan {
        batch_size: batch.rows(),
    }
    .stage1(counters);
    DescriptorMatrix::from_rows(&rows)
}

/// Stage 2: loss and descriptor gradients. No network pass is counted.
pub fn stage2_loss_and_grads(
    d: &DescriptorMatrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<(LossOutput, GradientBuffer)> {
    loss_backward_descriptors(d, labels, cfg)
}

/// Stage 3: image-by-image taped forward and backward into `acc`.
pub fn stage3_backward<E: Embedder>(
    model: &E,
    batch: &Matrix,
    grads: &GradientBuffer,
    acc: &mut ParamGradAccumulator,
    counters: &mut Counters,
) -> Result<()> {
    check_batch(model, batch)?;
    if grads.rows() != batch.rows() || grads.cols() != model.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient buffer is {}x{}, batch needs {}x{}",
            grads.rows(),
            grads.cols(),
            batch.rows(),
            model.output_dim()
        )));
    }
    acc.check_shapes(model.params())?;
    for i in 0..batch.rows() {
        let (_, tape) = model.forward_taped(batch.row(i))?;
        model.backward(tape, grads.row(i), acc)?;
    }
    StagePlan {
        batch_size: batch.rows(),
    }
    .stage3(counters);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossOutput,
    pub grads: ParamGradAccumulator,
    pub wall_seconds: f64,
}

/// Runs all three stages. The optimizer update is left to the caller.
pub fn multistage_step<E: Embedder + Sync>(
    model: &E,
    batch: &Matrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
    counters: &mut Counters,
) -> Result<StepOutput> {
    let start = Instant::now();
    if labels.len() != batch.rows() {
        return Err(Error::DimensionMismatch {
            expected: batch.rows(),
            found: labels.len(),
        });
    }
    let descriptors = stage1_forward(model, batch, counters)?;
    let (loss, descriptor_grads) = stage2_loss_and_grads(&descriptors, labels, cfg)?;
    let mut grads = ParamGradAccumulator::for_model(model);
    stage3_backward(model, batch, &descriptor_grads, &mut grads, counters)?;
    Ok(StepOutput {
        loss,
        grads,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{LinearEmbedder, MlpEmbedder};
    use crate::numerics::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, f: usize) -> Matrix {
        let data = (0..b * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(b, f, data).unwrap()
    }

    #[test]
    fn stage1_counts_and_allocates_no_tapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Matrix::zeros(3, 3);
        (0..3).for_each(|i| w.set(i, i, 1.0));
        let model = LinearEmbedder::new(w);
        let batch = random_batch(&mut rng, 8, 3);
        let mut c = Counters::default();
        let d = stage1_forward(&model, &batch, &mut c).unwrap();
        for i in 0..8 {
            assert_eq!(d.row(i), normalize(batch.row(i)).unwrap().as_slice());
        }
        assert_eq!(c, Counters { forwards: 8, backwards: 0, updates: 0 });
        assert_eq!(model.monitor().created(), 0);
    }

    #[test]
    fn stage2_is_the_descriptor_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = LinearEmbedder::random(6, 4, &mut rng);
        let batch = random_batch(&mut rng, 8, 6);
        let labels = BatchLabels::new((0..8).map(|i| i % 2).collect());
        let cfg = LossConfig::default();
        let mut c = Counters::default();
        let d = stage1_forward(&model, &batch, &mut c).unwrap();
        let before = c;
        let (loss, g) = stage2_loss_and_grads(&d, &labels, &cfg).unwrap();
        let (loss2, g2) = loss_backward_descriptors(&d, &labels, &cfg).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(g, g2);
        assert_eq!(c, before);
        assert!((0.0..=1.0).contains(&loss.loss));
    }

    #[test]
    fn zero_descriptor_grads_accumulate_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpEmbedder::random(5, 6, 3, &mut rng);
        let batch = random_batch(&mut rng, 4, 5);
        let mut acc = ParamGradAccumulator::for_model(&model);
        let mut c = Counters::default();
        stage3_backward(&model, &batch, &GradientBuffer::zeros(4, 3), &mut acc, &mut c).unwrap();
        assert_eq!(acc.max_abs(), 0.0);
        assert_eq!(acc.count(), 4);
        assert_eq!(c, Counters { forwards: 4, backwards: 4, updates: 0 });
        assert_eq!(model.monitor().peak(), 1);
        assert_eq!(model.monitor().live(), 0);
    }

    #[test]
    fn stage3_sums_independent_per_image_terms() {
        // B = 2 linear embedder: each image contributes J_i^T g_i x_i^T with
        // J_i = (I - d_i d_i^T) / ||W x_i||.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = LinearEmbedder::random(3, 2, &mut rng);
        let batch = random_batch(&mut rng, 2, 3);
        let g = Matrix::from_rows(&[[0.3, -0.7], [1.1, 0.2]]).unwrap();
        let mut acc = ParamGradAccumulator::for_model(&model);
        let mut c = Counters::default();
        stage3_backward(&model, &batch, &GradientBuffer::from_matrix(g.clone()), &mut acc, &mut c).unwrap();

        let w = model.weights();
        let mut expect = vec![0.0; 6];
        for i in 0..2 {
            let x = batch.row(i);
            let y = [w[0] * x[0] + w[1] * x[1] + w[2] * x[2], w[3] * x[0] + w[4] * x[1] + w[5] * x[2]];
            let n = (y[0] * y[0] + y[1] * y[1]).sqrt();
            let d = [y[0] / n, y[1] / n];
            let gi = g.row(i);
            let radial = d[0] * gi[0] + d[1] * gi[1];
            let gy = [(gi[0] - radial * d[0]) / n, (gi[1] - radial * d[1]) / n];
            for r in 0..2 {
                for col in 0..3 {
                    expect[r * 3 + col] += gy[r] * x[col];
                }
            }
        }
        for (a, e) in acc.grads()[0].iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn counters_after_full_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LinearEmbedder::random(6, 4, &mut rng);
        let batch = random_batch(&mut rng, 8, 6);
        let labels = BatchLabels::new((0..8).map(|i| i % 4).collect());
        let mut c = Counters::default();
        multistage_step(&model, &batch, &labels, &LossConfig::default(), &mut c).unwrap();
        assert_eq!(c, Counters { forwards: 16, backwards: 8, updates: 0 });
    }

    #[test]
    fn singleton_class_surfaces_from_stage2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = LinearEmbedder::random(6, 4, &mut rng);
        let batch = random_batch(&mut rng, 3, 6);
        let labels = BatchLabels::new(vec![0, 0, 1]);
        let mut c = Counters::default();
        let err = multistage_step(&model, &batch, &labels, &LossConfig::default(), &mut c);
        assert!(matches!(err, Err(Error::SingletonClass { class: 1 })));
        let one = random_batch(&mut rng, 1, 6);
        assert!(multistage_step(&model, &one, &BatchLabels::new(vec![0]), &LossConfig::default(), &mut c).is_err());
    }

    #[test]
    fn dry_run_matches_counter_arithmetic() {
        let c = StagePlan { batch_size: 4096 }.dry_run(200);
        assert_eq!(c, Counters { forwards: 1_638_400, backwards: 819_200, updates: 200 });
        let c = StagePlan { batch_size: 7 }.dry_run(3);
        assert_eq!(c, Counters { forwards: 42, backwards: 21, updates: 3 });
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LinearEmbedder::random(6, 4, &mut rng);
        let batch = random_batch(&mut rng, 3, 6);
        let mut acc = ParamGradAccumulator::for_model(&model);
        let mut c = Counters::default();
        let bad = GradientBuffer::zeros(2, 4);
        assert!(matches!(
            stage3_backward(&model, &batch, &bad, &mut acc, &mut c),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Monolithic full-batch oracle: every image goes through the network
    /// jointly as one matrix, and the chain rule is applied with whole-batch
    /// matrix products.
    mod oracle {
        use super::*;
        use crate::embed::GemPartsEmbedder;
        use crate::embed::Embedder;
        use crate::gradients::loss_backward_rows;
        use nalgebra::DMatrix;

        fn to_dm(m: &Matrix) -> DMatrix<f64> {
            DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        }

        /// Row-wise normalization of `y` and the backward of `g_d` through it.
        fn normalize_rows(y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
            let norms: Vec<f64> = y.row_iter().map(|r| r.norm()).collect();
            let mut d = y.clone();
            for (i, n) in norms.iter().enumerate() {
                d.row_mut(i).scale_mut(1.0 / n);
            }
            (d, norms)
        }

        fn normalize_rows_backward(d: &DMatrix<f64>, norms: &[f64], g_d: &DMatrix<f64>) -> DMatrix<f64> {
            let mut g = g_d.clone();
            for i in 0..d.nrows() {
                let radial = d.row(i).dot(&g_d.row(i));
                let row = (g_d.row(i) - d.row(i) * radial) / norms[i];
                g.set_row(i, &row);
            }
            g
        }

        fn descriptor_grads(d: &DMatrix<f64>, labels: &BatchLabels, cfg: &LossConfig) -> DMatrix<f64> {
            let rows = Matrix::from_vec(d.nrows(), d.ncols(), d.transpose().as_slice().to_vec()).unwrap();
            let (_, g) = loss_backward_rows(&rows, labels, cfg).unwrap();
            to_dm(g.as_matrix())
        }

        fn linear(model: &LinearEmbedder, x: &Matrix, labels: &BatchLabels, cfg: &LossConfig) -> Vec<Vec<f64>> {
            let w = DMatrix::from_row_slice(model.output_dim(), model.input_dim(), &model.params()[0]);
            let x = to_dm(x);
            let y = &x * w.transpose();
            let (d, norms) = normalize_rows(&y);
            let g_y = normalize_rows_backward(&d, &norms, &descriptor_grads(&d, labels, cfg));
            let g_w = g_y.transpose() * &x;
            vec![g_w.transpose().as_slice().to_vec()]
        }

        fn mlp(model: &MlpEmbedder, x: &Matrix, labels: &BatchLabels, cfg: &LossConfig) -> Vec<Vec<f64>> {
            let (h, f, c) = (model.hidden_dim(), model.input_dim(), model.output_dim());
            let p = model.params();
            let w1 = DMatrix::from_row_slice(h, f, &p[0]);
            let b1 = DMatrix::from_fn(1, h, |_, j| p[1][j]);
            let w2 = DMatrix::from_row_slice(c, h, &p[2]);
            let x = to_dm(x);
            let ones = DMatrix::from_element(x.nrows(), 1, 1.0);
            let a = &x * w1.transpose() + &ones * &b1;
            let hid = a.map(f64::tanh);
            let y = &hid * w2.transpose();
            let (d, norms) = normalize_rows(&y);
            let g_y = normalize_rows_backward(&d, &norms, &descriptor_grads(&d, labels, cfg));
            let g_w2 = g_y.transpose() * &hid;
            let g_a = (&g_y * &w2).component_mul(&hid.map(|t| 1.0 - t * t));
            let g_w1 = g_a.transpose() * &x;
            let g_b1 = ones.transpose() * &g_a;
            vec![
                g_w1.transpose().as_slice().to_vec(),
                g_b1.as_slice().to_vec(),
                g_w2.transpose().as_slice().to_vec(),
            ]
        }

        /// GeM over parts: all images and all parts are stacked into one
        /// `(B*P) x F_part` matrix.
        fn gem(model: &GemPartsEmbedder, parts: usize, x: &Matrix, labels: &BatchLabels, cfg: &LossConfig) -> Vec<Vec<f64>> {
            let b = x.rows();
            let (fp, c) = (model.input_dim() / parts, model.output_dim());
            let prm = model.params();
            let w = DMatrix::from_row_slice(c, fp, &prm[0]);
            let bias = DMatrix::from_fn(1, c, |_, j| prm[1][j]);
            let pw = prm[2][0];
            let stacked = DMatrix::from_row_slice(b * parts, fp, x.as_slice());
            let ones = DMatrix::from_element(b * parts, 1, 1.0);
            let z = &stacked * w.transpose() + &ones * &bias;
            let act = z.map(|v| v.max(0.0).max(crate::numerics::GEM_CLAMP));
            // mean over parts of act^p, per image and channel
            let mut mean = DMatrix::<f64>::zeros(b, c);
            for i in 0..b {
                for k in 0..parts {
                    for j in 0..c {
                        mean[(i, j)] += act[(i * parts + k, j)].powf(pw) / parts as f64;
                    }
                }
            }
            let pooled = mean.map(|m| m.powf(1.0 / pw));
            let (d, norms) = normalize_rows(&pooled);
            let g_pool = normalize_rows_backward(&d, &norms, &descriptor_grads(&d, labels, cfg));
            let mut g_z = DMatrix::<f64>::zeros(b * parts, c);
            let mut g_p = 0.0;
            for i in 0..b {
                for j in 0..c {
                    let (m, g) = (mean[(i, j)], pooled[(i, j)]);
                    let mut mlog = 0.0;
                    for k in 0..parts {
                        let r = i * parts + k;
                        let a = act[(r, j)];
                        mlog += a.powf(pw) * a.ln() / parts as f64;
                        if z[(r, j)] > crate::numerics::GEM_CLAMP {
                            g_z[(r, j)] = g_pool[(i, j)] * g.powf(1.0 - pw) * a.powf(pw - 1.0) / parts as f64;
                        }
                    }
                    g_p += g_pool[(i, j)] * g * (mlog / (pw * m) - m.ln() / (pw * pw));
                }
            }
            let g_w = g_z.transpose() * &stacked;
            let g_b = ones.transpose() * &g_z;
            vec![g_w.transpose().as_slice().to_vec(), g_b.as_slice().to_vec(), vec![g_p]]
        }

        fn max_rel(a: &ParamGradAccumulator, oracle: &[Vec<f64>]) -> f64 {
            let scale = oracle.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut worst = 0.0f64;
            for (x, y) in a.grads().iter().flatten().zip(oracle.iter().flatten()) {
                worst = worst.max((x - y).abs() / scale.max(f64::MIN_POSITIVE));
            }
            worst
        }

        fn configs() -> Vec<LossConfig> {
            let mut out = Vec::new();
            for variant in [Variant::Quantized, Variant::TieAware] {
                for balancing in [Balancing::Uniform, Balancing::ClassBalanced] {
                    out.push(LossConfig { grid: BinGrid::new(20).unwrap(), variant, balancing });
                }
            }
            out
        }

        use crate::quantized::{Balancing, BinGrid, Variant};

        fn labels16() -> BatchLabels {
            BatchLabels::new(vec![0, 0, 0, 1, 1, 1, 1, 2, 2, 3, 3, 3, 3, 3, 2, 0])
        }

        #[test]
        fn linear_multistage_equals_monolithic() {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let model = LinearEmbedder::random(12, 8, &mut rng);
            let batch = random_batch(&mut rng, 16, 12);
            for cfg in configs() {
                let mut c = Counters::default();
                let step = multistage_step(&model, &batch, &labels16(), &cfg, &mut c).unwrap();
                let rel = max_rel(&step.grads, &linear(&model, &batch, &labels16(), &cfg));
                assert!(rel <= 1e-10, "{cfg:?}: {rel}");
                assert!(step.grads.max_abs() > 0.0);
            }
            assert_eq!(model.monitor().peak(), 1);
        }

        #[test]
        fn mlp_multistage_equals_monolithic() {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let model = MlpEmbedder::random(12, 10, 8, &mut rng);
            let batch = random_batch(&mut rng, 16, 12);
            for cfg in configs() {
                let mut c = Counters::default();
                let step = multistage_step(&model, &batch, &labels16(), &cfg, &mut c).unwrap();
                let rel = max_rel(&step.grads, &mlp(&model, &batch, &labels16(), &cfg));
                assert!(rel <= 1e-10, "{cfg:?}: {rel}");
            }
            assert_eq!(model.monitor().peak(), 1);
        }

        #[test]
        fn gem_multistage_equals_monolithic() {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let model = GemPartsEmbedder::random(12, 3, 8, &mut rng).unwrap();
            let batch = random_batch(&mut rng, 16, 12);
            for cfg in configs() {
                let mut c = Counters::default();
                let step = multistage_step(&model, &batch, &labels16(), &cfg, &mut c).unwrap();
                let rel = max_rel(&step.grads, &gem(&model, 3, &batch, &labels16(), &cfg));
                assert!(rel <= 1e-10, "{cfg:?}: {rel}");
            }
            assert_eq!(model.monitor().peak(), 1);
        }

        #[test]
        fn multistage_is_deterministic() {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let model = MlpEmbedder::random(12, 10, 8, &mut rng);
            let batch = random_batch(&mut rng, 16, 12);
            let cfg = LossConfig::default();
            let mut c = Counters::default();
            let a = multistage_step(&model, &batch, &labels16(), &cfg, &mut c).unwrap();
            let b = multistage_step(&model, &batch, &labels16(), &cfg, &mut c).unwrap();
            assert_eq!(a.grads, b.grads);
            assert_eq!(a.loss, b.loss);
        }
    }
}
