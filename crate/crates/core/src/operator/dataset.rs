//! Dataset generation for operator training: sample `(gamma, nu)`
//! pairs, build the Chebyshev coefficient slice at the sensors, and
//! solve the exact kernels for the target channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::TargetVariant;
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kernels::{solve_bundle, VolterraConfig};
use crate::recirc::{DerivMode, RecircFamily};
use crate::worker_count;

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub gamma: f64,
    pub nu: f64,
    /// `beta(., nu)` at the sensor points.
    pub beta: Vec<f64>,
    /// One slice per target channel on the query grid.
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub variant: TargetVariant,
    pub sensor_xs: Vec<f64>,
    pub query_xs: Vec<f64>,
    pub records: Vec<DatasetRecord>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub gamma_range: (f64, f64),
    pub nu_range: (f64, f64),
    /// Records lost to per-record solver failures.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub n_gamma: usize,
    pub n_nu: usize,
    pub gamma_range: (f64, f64),
    pub nu_range: (f64, f64),
    /// Grid points for sensors and queries (shared uniform grid).
    pub n_grid: usize,
    pub amplitude: f64,
    pub variant: TargetVariant,
    pub seed: u64,
    /// Fraction of records in the training split.
    pub train_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_gamma: 100,
            n_nu: 200,
            gamma_range: (3.0, 8.0),
            nu_range: (-5.0, 5.0),
            n_grid: 101,
            amplitude: 5.0,
            variant: TargetVariant::KOnly,
            seed: 0,
            train_frac: 0.9,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_gamma == 0 || self.n_nu == 0 {
            return Err(Error::Config("dataset needs at least one (gamma, nu) pair".into()));
        }
        if !(self.gamma_range.0 <= self.gamma_range.1) || !(self.nu_range.0 <= self.nu_range.1) {
            return Err(Error::Config("invalid sampling ranges".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config(format!("train_frac {} outside [0,1]", self.train_frac)));
        }
        Ok(())
    }
}

/// Draw the gamma/nu grid and solve every record's targets. Records
/// whose Volterra solve fails are dropped and counted.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = SpatialGrid::new(cfg.n_grid)?;
    let xs = grid.points();
    let vcfg = VolterraConfig::default();
    let nu_box = cfg.nu_range.0.abs().max(cfg.nu_range.1.abs());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    // Draw every (gamma, nu) pair first so the generator stream does
    // not depend on how record solving is scheduled.
    let mut pairs = Vec::with_capacity(cfg.n_gamma * cfg.n_nu);
    for _ in 0..cfg.n_gamma {
        let gamma = sample_range(&mut rng, cfg.gamma_range);
        for _ in 0..cfg.n_nu {
            let nu = sample_range(&mut rng, cfg.nu_range);
            pairs.push((gamma, nu));
        }
    }
    // Solve records in parallel, order preserved; each pair is
    // independent, so the result is identical to the sequential loop.
    let solve_one = |&(gamma, nu): &(f64, f64)| -> Result<Option<DatasetRecord>> {
        // The Full variant needs x-derivatives of beta on the closed
        // grid, which are singular at x = 1 in analytic mode.
        let family = RecircFamily::chebyshev(cfg.amplitude, gamma, nu_box)
            .with_deriv_mode(DerivMode::FiniteDifference);
        match solve_bundle(&family, nu, &grid, &vcfg, cfg.variant.kernel_set()) {
            Ok(bundle) => {
                let mut targets = vec![bundle.k];
                match cfg.variant {
                    TargetVariant::KOnly => {}
                    TargetVariant::GainOnly => targets.push(bundle.k_nu.unwrap()),
                    TargetVariant::Full => {
                        targets.push(bundle.k_nu.unwrap());
                        targets.push(bundle.k_x.unwrap());
                        targets.push(bundle.k_xnu.unwrap());
                    }
                }
                Ok(Some(DatasetRecord {
                    gamma,
                    nu,
                    beta: family.beta_slice(&grid, nu)?,
                    targets,
                }))
            }
            Err(Error::IllPosed { .. }) | Err(Error::Residual { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let workers = worker_count().min(pairs.len().max(1));
    let solved: Vec<Result<Option<DatasetRecord>>> = if workers <= 1 {
        pairs.iter().map(solve_one).collect()
    } else {
        let chunk = pairs.len().div_ceil(workers);
        let mut out = Vec::new();
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(solve_one).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                out.extend(h.join().expect("dataset worker panicked"));
            }
        });
        out
    };
    let mut records = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    for r in solved {
        match r? {
            Some(rec) => records.push(rec),
            None => dropped += 1,
        }
    }
    // Shuffle record order, then split.
    let mut order: Vec<usize> = (0..records.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((records.len() as f64) * cfg.train_frac).round() as usize;
    let train_idx = order[..n_train].to_vec();
    let test_idx = order[n_train..].to_vec();
    Ok(Dataset {
        variant: cfg.variant,
        sensor_xs: xs.clone(),
        query_xs: xs,
        records,
        train_idx,
        test_idx,
        seed: cfg.seed,
        gamma_range: cfg.gamma_range,
        nu_range: cfg.nu_range,
        dropped,
    })
}

fn sample_range(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}
