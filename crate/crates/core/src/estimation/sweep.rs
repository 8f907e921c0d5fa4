//! Convergence-rate sweeps, the adversarial ratio curve and the
//! sample-efficiency toy.
//!
//! Every cell `(n, seed)` owns its random streams, so cells run in parallel and
//! are merged in `(n, seed)` order; output never depends on the pool size.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    random_nonshared, FrozenMatrices, MeasureDims, MeasureKind, MixingMeasure, NonSharedMeasure,
    SharedAtom, SharedMeasure,
};
use crate::numeric::{Activation, Matrix, SeededRng};

use super::adversarial::adversarial_sequence;
use super::dataset::{sample_dataset, RegressionDataset};
use super::fit::{fit_least_squares, FitConfig, ModelSpec};
use super::l2::l2_distance_mc;
use super::voronoi::{canonicalize, loss_d1r, loss_d2};

/// Stream labels under a seed's root generator.
const FROZEN_STREAM: u64 = 0;
const TRUTH_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const FIT_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;

/// Problem scale shared by the rate sweep and the toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemConfig {
    pub d: usize,
    pub r: usize,
    /// True number of atoms `L`.
    pub true_atoms: usize,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Inputs are uniform on the ball of this radius.
    pub x_max: f64,
    /// True factor entries are uniform in `[−truth_range, truth_range]`.
    pub truth_range: f64,
    pub tau_q: f64,
    pub tau_v: f64,
    pub sigma1: Activation,
    pub sigma2: Activation,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            d: 4,
            r: 2,
            true_atoms: 2,
            sigma: 0.05,
            x_max: 3.0,
            truth_range: 1.0,
            tau_q: 0.1,
            tau_v: 0.1,
            sigma1: Activation::Tanh,
            sigma2: Activation::Tanh,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 || self.true_atoms == 0 {
            return Err(Error::Config("problem needs d, r and true_atoms >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.x_max > 0.0 && self.x_max.is_finite()) {
            return Err(Error::Config(format!("x_max must be finite and > 0, got {}", self.x_max)));
        }
        if !(self.truth_range > 0.0 && self.truth_range.is_finite()) {
            return Err(Error::Config("truth_range must be finite and > 0".into()));
        }
        if !(self.tau_q > 0.0 && self.tau_v > 0.0) {
            return Err(Error::Config("shared model needs tau_q > 0 and tau_v > 0".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, kind: MeasureKind) -> ModelSpec {
        match kind {
            MeasureKind::NonShared => ModelSpec::non_shared(self.d, self.r),
            MeasureKind::Shared => ModelSpec::shared(
                self.d,
                self.r,
                self.tau_q,
                self.tau_v,
                self.sigma1,
                self.sigma2,
            ),
        }
    }
}

/// Frozen matrices and ground truth of one seed. The frozen matrices depend
/// on the seed only, so both kinds of a sweep see the same `C_Q, C_K, C_V`.
pub fn experiment_instance(
    kind: MeasureKind,
    problem: &ProblemConfig,
    seed: u64,
) -> Result<(FrozenMatrices, MixingMeasure)> {
    problem.validate()?;
    let root = SeededRng::new(seed);
    let frozen = FrozenMatrices::random(problem.d, &mut root.derive(FROZEN_STREAM));
    let mut rng = root.derive(TRUTH_STREAM);
    let dims = MeasureDims {
        d: problem.d,
        r: problem.r,
        inner_b: problem.r,
        inner_a: problem.r,
    };
    let range = problem.truth_range;
    let truth = match kind {
        MeasureKind::NonShared => {
            MixingMeasure::NonShared(random_nonshared(problem.true_atoms, dims, range, &mut rng))
        }
        MeasureKind::Shared => MixingMeasure::Shared(SharedMeasure {
            atoms: (0..problem.true_atoms)
                .map(|_| {
                    let c = rng.uniform_range(-0.5, 0.5);
                    let u = rng.uniform_matrix(problem.d, problem.r, -range, range);
                    let v = rng.uniform_matrix(problem.r, problem.d, -range, range);
                    SharedAtom::from_products(c, u, v)
                })
                .collect(),
            tau_q: problem.tau_q,
            tau_v: problem.tau_v,
            sigma1: problem.sigma1,
            sigma2: problem.sigma2,
        }),
    };
    Ok((frozen, truth))
}

/// Least-squares slope and intercept of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    })
}

fn check_increasing(n_list: &[usize], what: &str) -> Result<()> {
    if n_list.is_empty() || n_list[0] == 0 {
        return Err(Error::Config(format!("{what} must be non-empty with entries >= 1")));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    Ok(())
}

fn elapsed_ms(start: Instant, enabled: bool) -> Option<u64> {
    enabled.then(|| start.elapsed().as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub problem: ProblemConfig,
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Exponent of `D_{1,r}` for the non-shared kind.
    pub loss_exponent: u32,
    pub fit: FitConfig,
    /// Wall-clock column; off by default because it breaks byte-identical
    /// replay.
    pub record_timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            n_list: vec![250, 500, 1000, 2000, 4000],
            seeds: (0..10).collect(),
            loss_exponent: 2,
            fit: FitConfig::default(),
            record_timing: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.fit.validate()?;
        check_increasing(&self.n_list, "n_list")?;
        check_seeds(&self.seeds)?;
        if self.loss_exponent == 0 {
            return Err(Error::Config("loss_exponent must be >= 1".into()));
        }
        if self.fit.atoms < self.problem.true_atoms {
            return Err(Error::Config(format!(
                "fitted atoms {} must be >= true atoms {}",
                self.fit.atoms, self.problem.true_atoms
            )));
        }
        Ok(())
    }
}

/// One `(n, seed)` cell. `loss` is empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    pub seed: u64,
    pub loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub wall_ms: Option<u64>,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    pub kind: MeasureKind,
    /// Cells ordered by `(n, seed)`.
    pub records: Vec<RateRecord>,
    /// `(n, median loss over successful seeds)`.
    pub medians: Vec<(usize, f64)>,
    /// Least-squares slope of `ln median` on `ln n`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Serialize)]
struct RateRow<'a> {
    kind: &'a str,
    n: usize,
    seed: u64,
    loss: Option<f64>,
    slope_window: Option<f64>,
    wall_ms: Option<u64>,
    status: &'a str,
}

impl RateCurve {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status != "ok").count()
    }

    /// Appends rows to a CSV writer; `slope_window` repeats the curve's slope
    /// over its full `n` window on every row.
    pub fn write_rows<W: std::io::Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        for rec in &self.records {
            out.serialize(RateRow {
                kind: self.kind.tag(),
                n: rec.n,
                seed: rec.seed,
                loss: rec.loss,
                slope_window: self.slope,
                wall_ms: rec.wall_ms,
                status: &rec.status,
            })
            .map_err(csv_error)?;
        }
        Ok(())
    }
}

/// CSV of one or more curves with header
/// `kind,n,seed,loss,slope_window,wall_ms,status`.
pub fn rate_curves_csv(curves: &[RateCurve]) -> Result<String> {
    let mut out = csv::Writer::from_writer(Vec::new());
    for c in curves {
        c.write_rows(&mut out)?;
    }
    if curves.iter().all(|c| c.records.is_empty()) {
        out.write_record(["kind", "n", "seed", "loss", "slope_window", "wall_ms", "status"])
            .map_err(csv_error)?;
    }
    finish_csv(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Serialization(e.to_string())
}

fn finish_csv(out: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = out.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

fn rate_cell(
    kind: MeasureKind,
    cfg: &SweepConfig,
    instance: &(FrozenMatrices, MixingMeasure, RegressionDataset),
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (frozen, truth, full) = instance;
    let ds = full.prefix(n);
    let fit_cfg = FitConfig {
        seed: SeededRng::new(seed).derive(FIT_STREAM).derive(n as u64).next_u64(),
        ..cfg.fit
    };
    let fit = fit_least_squares(&ds, frozen, cfg.problem.model_spec(kind), &fit_cfg)?;
    let aligned = canonicalize(&fit.measure, truth)?;
    let loss = match kind {
        MeasureKind::Shared => loss_d2(&aligned, truth)?,
        MeasureKind::NonShared => loss_d1r(&aligned, truth, cfg.loss_exponent)?,
    };
    Ok((loss, fit.train_loss))
}

/// Fits every `(n, seed)` cell and reports `D_2` (shared) or `D_{1,r}`
/// (non-shared) after canonicalizing the fit against the truth. The data of
/// size `n` are the first `n` draws of the seed's stream, so curves are
/// nested in `n`. Failed cells are recorded and skipped by the medians.
pub fn rate_sweep(kind: MeasureKind, cfg: &SweepConfig) -> Result<RateCurve> {
    cfg.validate()?;
    let n_max = *cfg.n_list.last().expect("validated non-empty");
    let instances = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (frozen, truth) = experiment_instance(kind, &cfg.problem, seed)?;
            let data_seed = SeededRng::new(seed).derive(DATA_STREAM).next_u64();
            let ds = sample_dataset(&truth, &frozen, n_max, cfg.problem.sigma, data_seed, cfg.problem.x_max)?;
            Ok((frozen, truth, ds))
        })
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, usize)> = cfg
        .n_list
        .iter()
        .flat_map(|&n| (0..cfg.seeds.len()).map(move |s| (n, s)))
        .collect();
    let records: Vec<RateRecord> = cells
        .par_iter()
        .map(|&(n, s)| {
            let seed = cfg.seeds[s];
            let start = Instant::now();
            let outcome = rate_cell(kind, cfg, &instances[s], n, seed);
            let wall_ms = elapsed_ms(start, cfg.record_timing);
            match outcome {
                Ok((loss, train)) => RateRecord {
                    n,
                    seed,
                    loss: Some(loss),
                    train_loss: Some(train),
                    wall_ms,
                    status: "ok".into(),
                },
                Err(e) => RateRecord {
                    n,
                    seed,
                    loss: None,
                    train_loss: None,
                    wall_ms,
                    status: e.to_string(),
                },
            }
        })
        .collect();

    let medians: Vec<(usize, f64)> = cfg
        .n_list
        .iter()
        .filter_map(|&n| {
            let mut v: Vec<f64> = records
                .iter()
                .filter(|r| r.n == n)
                .filter_map(|r| r.loss)
                .collect();
            median(&mut v).map(|m| (n, m))
        })
        .collect();
    let fit = log_log_slope(&medians.iter().map(|&(n, m)| (n as f64, m)).collect::<Vec<_>>());
    Ok(RateCurve {
        kind,
        records,
        medians,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub d: usize,
    pub r: usize,
    pub true_atoms: usize,
    /// Rank of the frozen query matrix `C_Q`.
    pub rank_cq: usize,
    /// Exponent of `D_{1,r}`.
    pub loss_exponent: u32,
    pub n_list: Vec<usize>,
    pub samples: usize,
    pub x_max: f64,
    pub truth_range: f64,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            d: 4,
            r: 2,
            true_atoms: 2,
            rank_cq: 2,
            loss_exponent: 2,
            n_list: vec![2, 4, 8, 16, 32],
            samples: 100_000,
            x_max: 1.0,
            truth_range: 1.0,
            seed: 0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 || self.true_atoms == 0 || self.rank_cq == 0 {
            return Err(Error::Config("adversarial curve needs d, r, true_atoms, rank_cq >= 1".into()));
        }
        if self.rank_cq > self.d {
            return Err(Error::Config("rank_cq cannot exceed d".into()));
        }
        if self.loss_exponent == 0 || self.samples == 0 {
            return Err(Error::Config("adversarial curve needs loss_exponent, samples >= 1".into()));
        }
        if !(self.x_max > 0.0 && self.truth_range > 0.0) {
            return Err(Error::Config("x_max and truth_range must be > 0".into()));
        }
        check_increasing(&self.n_list, "n_list")
    }

    /// Frozen matrices with `C_Q` of rank `rank_cq`, and the non-shared truth.
    pub fn instance(&self) -> Result<(FrozenMatrices, NonSharedMeasure)> {
        self.validate()?;
        let root = SeededRng::new(self.seed);
        let mut frng = root.derive(FROZEN_STREAM);
        let mut frozen = FrozenMatrices::random(self.d, &mut frng);
        let c_q = frng
            .gaussian_matrix(self.d, self.rank_cq, 1.0)
            .matmul(&frng.gaussian_matrix(self.rank_cq, self.d, 1.0))?;
        frozen.c_q = c_q.scale(1.0 / c_q.frobenius_norm());
        let dims = MeasureDims {
            d: self.d,
            r: self.r,
            inner_b: self.r,
            inner_a: self.r,
        };
        let truth = random_nonshared(self.true_atoms, dims, self.truth_range, &mut root.derive(TRUTH_STREAM));
        Ok((frozen, truth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialPoint {
    pub n: usize,
    /// `D_{1,r}(G_n, G*)` from the loss routine.
    pub loss: f64,
    /// The construction's closed form of the same quantity.
    pub expected_loss: f64,
    pub l2: f64,
    pub l2_std_err: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCurve {
    pub points: Vec<AdversarialPoint>,
}

impl AdversarialCurve {
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].ratio < w[0].ratio)
    }

    /// Last ratio over first ratio.
    pub fn decay(&self) -> Option<f64> {
        Some(self.points.last()?.ratio / self.points.first()?.ratio)
    }

    /// Header `kind,n,seed,loss,expected_loss,l2,l2_std_err,ratio`.
    pub fn to_csv(&self, seed: u64) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            kind: &'static str,
            n: usize,
            seed: u64,
            loss: f64,
            expected_loss: f64,
            l2: f64,
            l2_std_err: f64,
            ratio: f64,
        }
        let mut out = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            out.serialize(Row {
                kind: "adversarial",
                n: p.n,
                seed,
                loss: p.loss,
                expected_loss: p.expected_loss,
                l2: p.l2,
                l2_std_err: p.l2_std_err,
                ratio: p.ratio,
            })
            .map_err(csv_error)?;
        }
        finish_csv(out)
    }
}

/// `‖f_{G_n} − f_{G*}‖_{L²} / D_{1,r}(G_n, G*)` along the adversarial
/// sequence. All `n` share one Monte-Carlo sample so the ratios are compared
/// on common inputs.
pub fn adversarial_curve(cfg: &AdversarialConfig) -> Result<AdversarialCurve> {
    let (frozen, truth) = cfg.instance()?;
    let truth_m = MixingMeasure::NonShared(truth.clone());
    let f_star = truth_m.compile(&frozen)?;
    let mc_seed = SeededRng::new(cfg.seed).derive(TEST_STREAM).next_u64();
    let points = cfg
        .n_list
        .par_iter()
        .map(|&n| {
            let seq = adversarial_sequence(&truth, n, cfg.loss_exponent, &frozen.c_q, true)?;
            let g = MixingMeasure::NonShared(seq.measure);
            let f_n = g.compile(&frozen)?;
            let loss = loss_d1r(&g, &truth_m, cfg.loss_exponent)?;
            let l2 = l2_distance_mc(|x| f_n.eval(x), |x| f_star.eval(x), cfg.d, cfg.x_max, cfg.samples, mc_seed)?;
            Ok(AdversarialPoint {
                n,
                loss,
                expected_loss: seq.expected_d1r,
                l2: l2.distance,
                l2_std_err: l2.std_err,
                ratio: l2.distance / loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub problem: ProblemConfig,
    /// Fitted atoms, iterations and restarts for both methods.
    pub fit: FitConfig,
    pub base_n: usize,
    pub test_n: usize,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub record_timing: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            fit: FitConfig::default(),
            base_n: 2000,
            test_n: 2000,
            fractions: vec![0.01, 0.1, 0.3, 0.5, 1.0],
            seeds: (0..10).collect(),
            record_timing: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.fit.validate()?;
        check_seeds(&self.seeds)?;
        if self.base_n == 0 || self.test_n == 0 {
            return Err(Error::Config("base_n and test_n must be >= 1".into()));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fractions must be non-empty and lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("fractions must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Training size of a fraction, at least one sample.
    pub fn train_size(&self, fraction: f64) -> usize {
        ((fraction * self.base_n as f64).round() as usize).clamp(1, self.base_n)
    }
}

/// Shared model with `τ` ("doran") and the non-shared model ("dora").
pub const TOY_METHODS: [(&str, MeasureKind); 2] =
    [("doran", MeasureKind::Shared), ("dora", MeasureKind::NonShared)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub method: String,
    pub fraction: f64,
    pub n: usize,
    pub seed: u64,
    pub test_mse: Option<f64>,
    pub train_loss: Option<f64>,
    pub wall_ms: Option<u64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCurves {
    /// Ordered by `(fraction, seed, method)`.
    pub records: Vec<ToyRecord>,
}

impl ToyCurves {
    fn lookup(&self, method: &str, fraction: f64, seed: u64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.method == method && r.fraction == fraction && r.seed == seed)
            .and_then(|r| r.test_mse)
    }

    /// Seeds where the shared model's test error is at most the non-shared
    /// one's at `fraction`, out of seeds where both fits succeeded.
    pub fn shared_wins(&self, fraction: f64) -> (usize, usize) {
        let mut seeds: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut wins = 0;
        let mut total = 0;
        for s in seeds {
            if let (Some(a), Some(b)) = (
                self.lookup(TOY_METHODS[0].0, fraction, s),
                self.lookup(TOY_METHODS[1].0, fraction, s),
            ) {
                total += 1;
                wins += usize::from(a <= b);
            }
        }
        (wins, total)
    }

    /// Header `method,fraction,n,seed,test_mse,train_loss,wall_ms,status`.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            out.serialize(r).map_err(csv_error)?;
        }
        finish_csv(out)
    }
}

fn mean_squared_error(model: &MixingMeasure, frozen: &FrozenMatrices, test: &RegressionDataset) -> Result<f64> {
    let compiled = model.compile(frozen)?;
    let mut total = 0.0;
    for (x, y) in test.x.iter().zip(&test.y) {
        let f = compiled.eval(x)?;
        total += f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / test.len() as f64)
}

/// One shared ground truth per seed; both methods are fitted on nested
/// prefixes of one base dataset and scored on a held-out noisy test set.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyCurves> {
    cfg.validate()?;
    let instances = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (frozen, truth) = experiment_instance(MeasureKind::Shared, &cfg.problem, seed)?;
            let root = SeededRng::new(seed);
            let p = &cfg.problem;
            let train = sample_dataset(&truth, &frozen, cfg.base_n, p.sigma, root.derive(DATA_STREAM).next_u64(), p.x_max)?;
            let test = sample_dataset(&truth, &frozen, cfg.test_n, p.sigma, root.derive(TEST_STREAM).next_u64(), p.x_max)?;
            Ok((frozen, train, test))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &fraction in &cfg.fractions {
        for s in 0..cfg.seeds.len() {
            for (method, kind) in TOY_METHODS {
                cells.push((fraction, s, method, kind));
            }
        }
    }
    let records = cells
        .par_iter()
        .map(|&(fraction, s, method, kind)| {
            let seed = cfg.seeds[s];
            let n = cfg.train_size(fraction);
            let (frozen, train, test) = &instances[s];
            let start = Instant::now();
            let fit_cfg = FitConfig {
                seed: SeededRng::new(seed).derive(FIT_STREAM).derive(n as u64).next_u64(),
                ..cfg.fit
            };
            let outcome = fit_least_squares(&train.prefix(n), frozen, cfg.problem.model_spec(kind), &fit_cfg)
                .and_then(|fit| Ok((mean_squared_error(&fit.measure, frozen, test)?, fit.train_loss)));
            let wall_ms = elapsed_ms(start, cfg.record_timing);
            let (test_mse, train_loss, status) = match outcome {
                Ok((mse, train)) => (Some(mse), Some(train), "ok".to_string()),
                Err(e) => (None, None, e.to_string()),
            };
            ToyRecord {
                method: method.into(),
                fraction,
                n,
                seed,
                test_mse,
                train_loss,
                wall_ms,
                status,
            }
        })
        .collect();
    Ok(ToyCurves { records })
}

/// Entries of every seed's `C_Q, C_K, C_V`, in seed order, row-major. Input
/// to the manifest's frozen-matrix hash.
pub fn frozen_fingerprint_data(problem: &ProblemConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let (frozen, _) = experiment_instance(MeasureKind::Shared, problem, seed)?;
        for m in [&frozen.c_q, &frozen.c_k, &frozen.c_v] {
            out.extend_from_slice(Matrix::as_slice(m));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sweep() -> SweepConfig {
        SweepConfig {
            n_list: vec![40, 80],
            seeds: vec![3, 1],
            fit: FitConfig {
                restarts: 1,
                steps: 30,
                ..FitConfig::default()
            },
            ..SweepConfig::default()
        }
    }

    #[test]
    fn slope_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(-0.5)))
            .collect();
        let (s, b) = log_log_slope(&pts).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && (b - 3f64.ln()).abs() < 1e-12);
        assert!(log_log_slope(&pts[..1]).is_none());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn sweep_is_ordered_and_replayable() {
        let cfg = tiny_sweep();
        for kind in [MeasureKind::Shared, MeasureKind::NonShared] {
            let a = rate_sweep(kind, &cfg).unwrap();
            let keys: Vec<(usize, u64)> = a.records.iter().map(|r| (r.n, r.seed)).collect();
            assert_eq!(keys, vec![(40, 3), (40, 1), (80, 3), (80, 1)]);
            assert_eq!(a.failures(), 0);
            let b = rate_sweep(kind, &cfg).unwrap();
            assert_eq!(rate_curves_csv(&[a]).unwrap(), rate_curves_csv(&[b]).unwrap());
        }
    }

    #[test]
    fn csv_header_and_status_column() {
        let curve = rate_sweep(MeasureKind::Shared, &tiny_sweep()).unwrap();
        let text = rate_curves_csv(&[curve]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("kind,n,seed,loss,slope_window,wall_ms,status"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "shared");
        assert_eq!(row[5], "");
        assert_eq!(row[6], "ok");
    }

    #[test]
    fn rejects_unordered_n_and_duplicate_seeds() {
        let mut cfg = tiny_sweep();
        cfg.n_list = vec![80, 40];
        assert!(matches!(rate_sweep(MeasureKind::Shared, &cfg), Err(Error::Config(_))));
        let mut cfg = tiny_sweep();
        cfg.seeds = vec![1, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn both_kinds_share_frozen_matrices() {
        let p = ProblemConfig::default();
        let (fa, ta) = experiment_instance(MeasureKind::Shared, &p, 7).unwrap();
        let (fb, tb) = experiment_instance(MeasureKind::NonShared, &p, 7).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ta.kind(), MeasureKind::Shared);
        assert_eq!(tb.kind(), MeasureKind::NonShared);
    }

    #[test]
    fn adversarial_curve_uses_closed_form_losses() {
        let cfg = AdversarialConfig {
            samples: 2000,
            ..AdversarialConfig::default()
        };
        let curve = adversarial_curve(&cfg).unwrap();
        assert_eq!(curve.points.len(), 5);
        for p in &curve.points {
            assert!((p.loss - p.expected_loss).abs() <= 1e-12 * p.expected_loss);
            assert!(p.l2 > 0.0 && p.ratio.is_finite());
        }
        assert!(curve.to_csv(cfg.seed).unwrap().starts_with("kind,n,seed,loss,expected_loss"));
    }

    #[test]
    fn toy_rows_cover_every_fraction_and_method() {
        let cfg = ToyConfig {
            base_n: 100,
            test_n: 50,
            fractions: vec![0.1, 1.0],
            seeds: vec![0, 1],
            fit: FitConfig {
                restarts: 1,
                steps: 20,
                ..FitConfig::default()
            },
            ..ToyConfig::default()
        };
        let curves = train_toy(&cfg).unwrap();
        assert_eq!(curves.records.len(), 8);
        for method in ["doran", "dora"] {
            assert!(curves.records.iter().any(|r| r.method == method && r.fraction == 1.0 && r.n == 100));
        }
        let (_, total) = curves.shared_wins(0.1);
        assert_eq!(total, 2);
        assert_eq!(curves.to_csv().unwrap(), train_toy(&cfg).unwrap().to_csv().unwrap());
    }
}
