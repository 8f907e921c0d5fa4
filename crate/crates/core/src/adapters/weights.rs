//! LoRA, DoRA and τ-stabilized DoRA weight maps.

use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::numeric::{column_norms, norm, softplus, softplus_inverse, Matrix, SeededRng};

use super::hypernet::{HyperNetPair, Projection, SharedActivations};

/// Frozen base weight plus a trainable low-rank update `B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    w0: Matrix,
    pub b: Matrix,
    pub a: Matrix,
}

impl LoraAdapter {
    pub fn new(w0: Matrix, b: Matrix, a: Matrix) -> Result<Self> {
        check_factors(&w0, &b, &a)?;
        Ok(Self { w0, b, a })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn weight(&self) -> Result<Matrix> {
        lora_weight(&self.w0, &self.b, &self.a)
    }
}

fn check_factors(w0: &Matrix, b: &Matrix, a: &Matrix) -> Result<()> {
    let (d, k) = w0.shape();
    let r = b.cols();
    if b.rows() != d || a.shape() != (r, k) {
        return Err(Error::dim(
            "low-rank factors",
            format!("B {d}x{r}, A {r}x{k}"),
            format!("B {:?}, A {:?}", b.shape(), a.shape()),
        ));
    }
    if r == 0 || r > d.min(k) {
        return Err(Error::Config(format!(
            "rank {r} must lie in 1..={}",
            d.min(k)
        )));
    }
    Ok(())
}

/// `W₀ + B·A`.
pub fn lora_weight(w0: &Matrix, b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let ba = b.matmul(a)?;
    w0.add(&ba)
}

/// Column `j` is `m_j · W′_{:,j} / (‖W′_{:,j}‖ + τ)`.
///
/// With `τ = 0` this is the DoRA normalization and a zero column is a
/// singularity; with `τ > 0` a zero column maps to zero.
pub fn normalize_columns(wprime: &Matrix, m: &[f64], tau: f64) -> Result<Matrix> {
    if m.len() != wprime.cols() {
        return Err(Error::dim("normalize_columns", wprime.cols(), m.len()));
    }
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
    }
    let norms = column_norms(wprime)?;
    let mut scale = Vec::with_capacity(m.len());
    for (j, (mj, nj)) in m.iter().zip(&norms).enumerate() {
        let denom = nj + tau;
        if denom == 0.0 {
            return Err(Error::Singularity {
                op: "normalize_columns",
                detail: format!("column {j} of W0 + BA has zero norm"),
            });
        }
        scale.push(mj / denom);
    }
    wprime.scale_columns(&scale)
}

/// DoRA: `m · (W₀+BA) / ‖W₀+BA‖_c`.
pub fn dora_weight(w0: &Matrix, b: &Matrix, a: &Matrix, m: &[f64]) -> Result<Matrix> {
    normalize_columns(&lora_weight(w0, b, a)?, m, 0.0)
}

/// A hypernetwork shared by several adapters.
pub type SharedHyperNet = Arc<RwLock<HyperNetPair>>;

pub fn share(net: HyperNetPair) -> SharedHyperNet {
    Arc::new(RwLock::new(net))
}

#[derive(Debug, Clone)]
pub enum FactorSource {
    Direct { b: Matrix, a: Matrix },
    Hyper {
        net: SharedHyperNet,
        head: usize,
        projection: Projection,
    },
}

/// Intermediates retained by [`DoranAdapter::forward`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub b: Matrix,
    pub a: Matrix,
    pub wprime: Matrix,
    pub column_norms: Vec<f64>,
    pub tau: f64,
    pub weight: Matrix,
    pub hyper: Option<SharedActivations>,
}

/// `W = m · (W₀ + BA) / (‖W₀ + BA‖_c + τ)` with `τ = softplus(tau_raw)`.
#[derive(Debug, Clone)]
pub struct DoranAdapter {
    w0: Matrix,
    m: Vec<f64>,
    tau_raw: f64,
    source: FactorSource,
    cache: Option<ForwardCache>,
}

impl DoranAdapter {
    pub fn new(w0: Matrix, m: Vec<f64>, tau_raw: f64, source: FactorSource) -> Result<Self> {
        if m.len() != w0.cols() {
            return Err(Error::dim("DoranAdapter::new", w0.cols(), m.len()));
        }
        if !tau_raw.is_finite() || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("magnitude and tau_raw must be finite".into()));
        }
        let ad = Self {
            w0,
            m,
            tau_raw,
            source,
            cache: None,
        };
        let (b, a) = ad.factors()?;
        check_factors(&ad.w0, &b, &a)?;
        Ok(ad)
    }

    /// LoRA-style start: `B = 0`, `A ~ N(0, 1/r)`. τ is set to a tenth of the
    /// mean column norm of `W₀` and `m = ‖W₀‖_c + τ`, so the adapted weight
    /// equals `W₀` exactly at initialization.
    pub fn init_direct(w0: Matrix, r: usize, rng: &mut SeededRng) -> Result<Self> {
        let (d, k) = w0.shape();
        if r == 0 || r > d.min(k) {
            return Err(Error::Config(format!("rank {r} must lie in 1..={}", d.min(k))));
        }
        let b = Matrix::zeros(d, r);
        let a = rng.gaussian_matrix(r, k, (1.0 / r as f64).sqrt());
        Self::init_with_source(w0, FactorSource::Direct { b, a })
    }

    /// Same identity-at-init rule, factors drawn from a shared hypernetwork.
    pub fn init_hyper(
        w0: Matrix,
        net: SharedHyperNet,
        head: usize,
        projection: Projection,
    ) -> Result<Self> {
        Self::init_with_source(
            w0,
            FactorSource::Hyper {
                net,
                head,
                projection,
            },
        )
    }

    fn init_with_source(w0: Matrix, source: FactorSource) -> Result<Self> {
        let norms0 = column_norms(&w0)?;
        let mean = norms0.iter().sum::<f64>() / norms0.len() as f64;
        if mean <= 0.0 {
            return Err(Error::Config(
                "cannot scale tau from an all-zero base weight".into(),
            ));
        }
        let tau0 = 0.1 * mean;
        let mut ad = Self {
            m: vec![0.0; w0.cols()],
            w0,
            tau_raw: softplus_inverse(tau0),
            source,
            cache: None,
        };
        let (b, a) = ad.factors()?;
        check_factors(&ad.w0, &b, &a)?;
        let wprime = lora_weight(&ad.w0, &b, &a)?;
        ad.m = column_norms(&wprime)?.into_iter().map(|n| n + tau0).collect();
        Ok(ad)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn set_m(&mut self, m: Vec<f64>) -> Result<()> {
        if m.len() != self.m.len() {
            return Err(Error::dim("DoranAdapter::set_m", self.m.len(), m.len()));
        }
        self.m = m;
        self.cache = None;
        Ok(())
    }

    pub fn tau_raw(&self) -> f64 {
        self.tau_raw
    }

    pub fn set_tau_raw(&mut self, tau_raw: f64) {
        self.tau_raw = tau_raw;
        self.cache = None;
    }

    /// Sets the positive offset directly (through the inverse softplus).
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
        self.set_tau_raw(softplus_inverse(tau));
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        softplus(self.tau_raw)
    }

    pub fn source(&self) -> &FactorSource {
        &self.source
    }

    /// Mutable access to direct factors; `None` for hypernet-backed adapters.
    pub fn direct_factors_mut(&mut self) -> Option<(&mut Matrix, &mut Matrix)> {
        self.cache = None;
        match &mut self.source {
            FactorSource::Direct { b, a } => Some((b, a)),
            FactorSource::Hyper { .. } => None,
        }
    }

    pub fn factors(&self) -> Result<(Matrix, Matrix)> {
        Ok(self.factors_with_shared()?.0)
    }

    fn factors_with_shared(&self) -> Result<((Matrix, Matrix), Option<SharedActivations>)> {
        match &self.source {
            FactorSource::Direct { b, a } => Ok(((b.clone(), a.clone()), None)),
            FactorSource::Hyper {
                net,
                head,
                projection,
            } => {
                let net = net
                    .read()
                    .map_err(|_| Error::State("hypernet lock poisoned".into()))?;
                let shared = net.shared_forward()?;
                let factors = net.generate_with(&shared, *head, *projection)?;
                Ok((factors, Some(shared)))
            }
        }
    }

    pub fn wprime(&self) -> Result<Matrix> {
        let (b, a) = self.factors()?;
        lora_weight(&self.w0, &b, &a)
    }

    /// Adapted weight without touching the cache.
    pub fn weight(&self) -> Result<Matrix> {
        normalize_columns(&self.wprime()?, &self.m, self.tau())
    }

    /// Adapted weight; retains the intermediates needed by backprop.
    pub fn forward(&mut self) -> Result<Matrix> {
        let ((b, a), hyper) = self.factors_with_shared()?;
        let wprime = lora_weight(&self.w0, &b, &a)?;
        let tau = self.tau();
        let weight = normalize_columns(&wprime, &self.m, tau)?;
        self.cache = Some(ForwardCache {
            column_norms: column_norms(&wprime)?,
            b,
            a,
            wprime,
            tau,
            weight: weight.clone(),
            hyper,
        });
        Ok(weight)
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Adapted weight of a τ-stabilized adapter.
pub fn doran_weight(ad: &DoranAdapter) -> Result<Matrix> {
    ad.weight()
}

/// Column norms of the adapted weight predicted from `m`, `τ` and `W′`:
/// `m_j · n_j / (n_j + τ)`.
pub fn expected_column_norms(wprime: &Matrix, m: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(column_norms(wprime)?
        .iter()
        .zip(m)
        .map(|(n, mj)| mj.abs() * n / (n + tau))
        .collect())
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn relative_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(norm(diff.as_slice()) / b.frobenius_norm())
}
