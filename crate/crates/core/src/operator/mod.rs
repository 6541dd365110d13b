//! Neural operator surrogate for the kernel map: a branch/trunk
//! network ("DeepONet" style) taking sampled `beta(., nu)` at fixed
//! sensors and producing the kernel slice `k(., nu)` (optionally with
//! derivative channels) at arbitrary query points.
//!
//! Prediction per target channel `t` is the latent inner product
//!
//! ```text
//!   khat_t(x) = sum_{j=1..p} g_{t,j}(beta samples) f_j(x)
//! ```
//!
//! with `g` the branch output and `f` the trunk output. Inference
//! collapses the trunk's linear readout into a per-slice vector, so
//! each query costs one hidden trunk layer plus a dot product and the
//! overall cost is `Theta(params + p * queries)`, independent of any
//! Volterra solve.

pub mod dataset;
pub mod mlp;
pub mod train;

pub use dataset::{gen_dataset, Dataset, DatasetConfig, DatasetRecord};
pub use mlp::Mlp;
pub use train::{relative_l2, train, EpochStats, LossSpec, TrainConfig};

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kernels::{solve_bundle, KernelSet, VolterraConfig};
use crate::recirc::RecircFamily;

/// Which kernel channels the operator predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetVariant {
    /// `k` only (default; trains best).
    KOnly,
    /// `k` and `k_nu`.
    GainOnly,
    /// `k`, `k_nu`, `k_x`, `k_xnu`.
    Full,
}

impl TargetVariant {
    pub fn n_targets(&self) -> usize {
        match self {
            TargetVariant::KOnly => 1,
            TargetVariant::GainOnly => 2,
            TargetVariant::Full => 4,
        }
    }

    pub fn kernel_set(&self) -> KernelSet {
        match self {
            TargetVariant::KOnly => KernelSet::K,
            TargetVariant::GainOnly => KernelSet::KNu,
            TargetVariant::Full => KernelSet::All,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            TargetVariant::KOnly => 0,
            TargetVariant::GainOnly => 1,
            TargetVariant::Full => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(TargetVariant::KOnly),
            1 => Ok(TargetVariant::GainOnly),
            2 => Ok(TargetVariant::Full),
            t => Err(Error::Format(format!("unknown target variant tag {t}"))),
        }
    }
}

/// Architecture description; widths exclude the input and output
/// layers, which are fixed by the sensor count and `p * targets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub p: usize,
    pub variant: TargetVariant,
}

impl ModelSpec {
    /// Reference configuration: three 343-wide branch layers, one
    /// 12-wide trunk layer, latent width 32 (282,418 parameters with
    /// 101 sensors). The narrow trunk keeps per-query inference cheap;
    /// the kernel family is numerically low-rank in x, so 12 basis
    /// functions lose nothing measurable.
    pub fn reference(variant: TargetVariant) -> Self {
        ModelSpec {
            branch_hidden: vec![343, 343, 343],
            trunk_hidden: vec![12],
            p: 32,
            variant,
        }
    }

    pub fn branch_widths(&self, n_sensors: usize) -> Vec<usize> {
        let mut w = vec![n_sensors];
        w.extend(&self.branch_hidden);
        w.push(self.p * self.variant.n_targets());
        w
    }

    pub fn trunk_widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        w.extend(&self.trunk_hidden);
        w.push(self.p);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub sensor_xs: Vec<f64>,
    pub branch: Mlp,
    pub trunk: Mlp,
    pub p: usize,
    pub variant: TargetVariant,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub seed: u64,
}

impl OperatorModel {
    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_xs.len()
    }

    fn normalize_input(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.n_sensors() {
            return Err(Error::Shape(format!(
                "got {} beta samples, model has {} sensors",
                beta.len(),
                self.n_sensors()
            )));
        }
        Ok(beta
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(&b, (&m, &s))| (b - m) / s)
            .collect())
    }

    /// Branch output for one normalized sample.
    fn branch_out(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let xin = self.normalize_input(beta)?;
        Ok(self.branch.forward(&xin, 1))
    }

    /// Trunk hidden activations for a set of queries plus the final
    /// linear layer's weight/bias, for the collapsed readout.
    fn trunk_hidden(&self, query_xs: &[f64]) -> Vec<f64> {
        // Run all layers except the last one.
        let nl = self.trunk.n_layers();
        let mut cur: Vec<f64> = query_xs.to_vec();
        for li in 0..nl - 1 {
            let (fi, fo) = (self.trunk.widths[li], self.trunk.widths[li + 1]);
            let w = &self.trunk.weights[li];
            let b = &self.trunk.biases[li];
            let mut z = vec![0.0; query_xs.len() * fo];
            for i in 0..query_xs.len() {
                z[i * fo..(i + 1) * fo].copy_from_slice(b);
            }
            mlp::gemm_acc(&cur, query_xs.len(), fi, w, fo, &mut z);
            for v in z.iter_mut() {
                *v = mlp::fast_tanh(*v);
            }
            cur = z;
        }
        cur
    }

    /// Predict every target channel at the query points.
    pub fn infer_slice(&self, beta: &[f64], query_xs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let g = self.branch_out(beta)?;
        let h = self.trunk_hidden(query_xs);
        let nt = self.variant.n_targets();
        let t1 = self.trunk.widths[self.trunk.n_layers() - 1];
        let w2 = &self.trunk.weights[self.trunk.n_layers() - 1];
        let b2 = &self.trunk.biases[self.trunk.n_layers() - 1];
        let mut out = Vec::with_capacity(nt);
        for t in 0..nt {
            let gt = &g[t * self.p..(t + 1) * self.p];
            // Collapse the trunk readout: v = W2 . g_t, c = g_t . b2.
            let mut v = vec![0.0; t1];
            for m in 0..t1 {
                let row = &w2[m * self.p..(m + 1) * self.p];
                v[m] = row.iter().zip(gt).map(|(a, b)| a * b).sum();
            }
            let c: f64 = b2.iter().zip(gt).map(|(a, b)| a * b).sum();
            let (om, os) = (self.output_mean[t], self.output_scale[t]);
            let mut pred = Vec::with_capacity(query_xs.len());
            for q in 0..query_xs.len() {
                let hrow = &h[q * t1..(q + 1) * t1];
                let y: f64 = hrow.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + c;
                pred.push(y * os + om);
            }
            out.push(pred);
        }
        Ok(out)
    }

    /// Predict only the `k` channel; the hot path for control and
    /// benchmarking.
    pub fn infer_k(&self, beta: &[f64], query_xs: &[f64]) -> Result<Vec<f64>> {
        let g = self.branch_out(beta)?;
        let nl = self.trunk.n_layers();
        let t1 = self.trunk.widths[nl - 1];
        let w2 = &self.trunk.weights[nl - 1];
        let b2 = &self.trunk.biases[nl - 1];
        let gt = &g[0..self.p];
        let mut v = vec![0.0; t1];
        for m in 0..t1 {
            let row = &w2[m * self.p..(m + 1) * self.p];
            v[m] = row.iter().zip(gt).map(|(a, b)| a * b).sum();
        }
        let c: f64 = b2.iter().zip(gt).map(|(a, b)| a * b).sum();
        let (om, os) = (self.output_mean[0], self.output_scale[0]);
        let mut pred = Vec::with_capacity(query_xs.len());
        if nl == 2 {
            // One hidden layer over a scalar input: fuse the affine
            // map, activation and collapsed readout per query so the
            // n-by-hidden activation buffer never touches memory.
            let w1 = &self.trunk.weights[0];
            let b1 = &self.trunk.biases[0];
            for &x in query_xs {
                let mut y = c;
                for m in 0..t1 {
                    y += v[m] * mlp::fast_tanh(w1[m] * x + b1[m]);
                }
                pred.push(y * os + om);
            }
            return Ok(pred);
        }
        let h = self.trunk_hidden(query_xs);
        for q in 0..query_xs.len() {
            let hrow = &h[q * t1..(q + 1) * t1];
            let y: f64 = hrow.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + c;
            pred.push(y * os + om);
        }
        Ok(pred)
    }
}

/// Empirical sup-norm approximation errors of a model against exact
/// kernel solves.
#[derive(Debug, Clone)]
pub struct ApproxReport {
    /// Per carried target channel: max over sampled (x, nu) of the
    /// absolute error.
    pub eps: Vec<f64>,
    /// For KOnly models: nu-derivative error estimated by central
    /// differences of the model itself (flagged as finite-difference).
    pub eps_k_nu_fd: Option<f64>,
    /// Max |k| over the sampled set, for relative reporting.
    pub kernel_scale: f64,
}

impl ApproxReport {
    pub fn relative_k_error(&self) -> f64 {
        self.eps[0] / self.kernel_scale.max(f64::MIN_POSITIVE)
    }
}

/// Compare model predictions with exact solves over a nu sweep.
pub fn approximation_report(
    model: &OperatorModel,
    family: &RecircFamily,
    nu_samples: &[f64],
    grid: &SpatialGrid,
) -> Result<ApproxReport> {
    let cfg = VolterraConfig::default();
    let nt = model.variant.n_targets();
    let mut eps = vec![0.0_f64; nt];
    let mut eps_fd = 0.0_f64;
    let mut scale = 0.0_f64;
    let xs = grid.points();
    let fd = family
        .clone()
        .with_deriv_mode(crate::recirc::DerivMode::FiniteDifference);
    for &nu in nu_samples {
        let bundle = solve_bundle(&fd, nu, grid, &cfg, model.variant.kernel_set())?;
        let beta = family.beta_slice(grid, nu)?;
        let preds = model.infer_slice(&beta, &xs)?;
        let exact: Vec<&Vec<f64>> = match model.variant {
            TargetVariant::KOnly => vec![&bundle.k],
            TargetVariant::GainOnly => vec![&bundle.k, bundle.k_nu.as_ref().unwrap()],
            TargetVariant::Full => vec![
                &bundle.k,
                bundle.k_nu.as_ref().unwrap(),
                bundle.k_x.as_ref().unwrap(),
                bundle.k_xnu.as_ref().unwrap(),
            ],
        };
        for (t, ex) in exact.iter().enumerate() {
            for i in 0..grid.n() {
                eps[t] = eps[t].max((preds[t][i] - ex[i]).abs());
            }
        }
        for &k in &bundle.k {
            scale = scale.max(k.abs());
        }
        if model.variant == TargetVariant::KOnly {
            // Estimate the nu-derivative error with central differences
            // of the model, guarded against the nu box edge.
            let h = 1e-3;
            if nu.abs() + h <= family.nu_box() {
                let kn_exact = solve_bundle(&fd, nu, grid, &cfg, KernelSet::KNu)?
                    .k_nu
                    .unwrap();
                let bp = family.beta_slice(grid, nu + h)?;
                let bm = family.beta_slice(grid, nu - h)?;
                let kp = model.infer_k(&bp, &xs)?;
                let km = model.infer_k(&bm, &xs)?;
                for i in 0..grid.n() {
                    let fd_d = (kp[i] - km[i]) / (2.0 * h);
                    eps_fd = eps_fd.max((fd_d - kn_exact[i]).abs());
                }
            }
        }
    }
    Ok(ApproxReport {
        eps,
        eps_k_nu_fd: (model.variant == TargetVariant::KOnly).then_some(eps_fd),
        kernel_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_model(variant: TargetVariant) -> OperatorModel {
        let spec = ModelSpec {
            branch_hidden: vec![8],
            trunk_hidden: vec![6],
            p: 4,
            variant,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = 11;
        OperatorModel {
            sensor_xs: (0..m).map(|i| i as f64 / (m - 1) as f64).collect(),
            branch: Mlp::init(&spec.branch_widths(m), &mut rng),
            trunk: Mlp::init(&spec.trunk_widths(), &mut rng),
            p: spec.p,
            variant,
            input_mean: vec![0.0; m],
            input_scale: vec![1.0; m],
            output_mean: vec![0.5; variant.n_targets()],
            output_scale: vec![2.0; variant.n_targets()],
            seed: 1,
        }
    }

    #[test]
    fn reference_param_count() {
        let spec = ModelSpec::reference(TargetVariant::KOnly);
        let b = Mlp::zeroed(&spec.branch_widths(101));
        let t = Mlp::zeroed(&spec.trunk_widths());
        // Close to the nominal 282,625 total.
        assert_eq!(b.param_count() + t.param_count(), 282_418);
    }

    #[test]
    fn collapsed_readout_matches_naive() {
        // infer_slice must equal the explicit branch/trunk inner product.
        let model = toy_model(TargetVariant::GainOnly);
        let beta: Vec<f64> = (0..11).map(|i| (i as f64 * 0.4).sin()).collect();
        let xs: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
        let fast = model.infer_slice(&beta, &xs).unwrap();
        let g = model.branch.forward(&beta, 1);
        for (t, pred) in fast.iter().enumerate() {
            for (q, &x) in xs.iter().enumerate() {
                let f = model.trunk.forward(&[x], 1);
                let mut y = 0.0;
                for j in 0..model.p {
                    y += g[t * model.p + j] * f[j];
                }
                let want = y * model.output_scale[t] + model.output_mean[t];
                assert!(
                    (pred[q] - want).abs() < 1e-12 * (1.0 + want.abs()),
                    "t={t} q={q}: {} vs {want}",
                    pred[q]
                );
            }
        }
    }

    #[test]
    fn zero_weights_predict_output_mean() {
        let mut model = toy_model(TargetVariant::KOnly);
        for w in model.branch.weights.iter_mut().chain(model.trunk.weights.iter_mut()) {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in model.branch.biases.iter_mut().chain(model.trunk.biases.iter_mut()) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let beta = vec![1.0; 11];
        let out = model.infer_slice(&beta, &[0.0, 0.5, 1.0]).unwrap();
        for &v in &out[0] {
            assert_eq!(v, model.output_mean[0]);
        }
    }

    #[test]
    fn readout_scale_invariance() {
        // Scaling the trunk's last linear layer by c and the branch
        // output by 1/c leaves predictions unchanged.
        let model = toy_model(TargetVariant::KOnly);
        let beta: Vec<f64> = (0..11).map(|i| 0.3 * i as f64 - 1.0).collect();
        let xs = [0.1, 0.6, 0.9];
        let base = model.infer_slice(&beta, &xs).unwrap();
        let c = 3.7;
        let mut scaled = model.clone();
        let last = scaled.trunk.n_layers() - 1;
        scaled.trunk.weights[last].iter_mut().for_each(|v| *v *= c);
        scaled.trunk.biases[last].iter_mut().for_each(|v| *v *= c);
        let lastb = scaled.branch.n_layers() - 1;
        scaled.branch.weights[lastb].iter_mut().for_each(|v| *v /= c);
        scaled.branch.biases[lastb].iter_mut().for_each(|v| *v /= c);
        let out = scaled.infer_slice(&beta, &xs).unwrap();
        for (a, b) in base[0].iter().zip(&out[0]) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = toy_model(TargetVariant::KOnly);
        assert!(model.infer_slice(&[1.0; 5], &[0.5]).is_err());
    }
}
