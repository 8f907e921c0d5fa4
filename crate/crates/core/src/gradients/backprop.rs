use crate::adapters::{DoranAdapter, FactorSource, HyperNetPair};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

use super::{grad_m, grad_tau, grad_tau_raw, grad_wprime};

/// Gradients of the hypernetwork parameters; second-layer entries are
/// indexed by slot and stay zero for slots the loss does not touch.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrads {
    pub d_b_embed: Matrix,
    pub d_a_embed: Matrix,
    pub d_w1_b: Matrix,
    pub d_w1_a: Matrix,
    pub d_w2_b: Vec<Matrix>,
    pub d_w2_a: Vec<Matrix>,
}

impl HyperGrads {
    pub fn zeros_like(net: &HyperNetPair) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            d_b_embed: z(&net.b_embed),
            d_a_embed: z(&net.a_embed),
            d_w1_b: z(&net.w1_b),
            d_w1_a: z(&net.w1_a),
            d_w2_b: net.w2_b.iter().map(z).collect(),
            d_w2_a: net.w2_a.iter().map(z).collect(),
        }
    }

    /// Sums the contribution of another adapter sharing the same network.
    pub fn accumulate(&mut self, other: &HyperGrads) -> Result<()> {
        self.d_b_embed.add_assign(&other.d_b_embed)?;
        self.d_a_embed.add_assign(&other.d_a_embed)?;
        self.d_w1_b.add_assign(&other.d_w1_b)?;
        self.d_w1_a.add_assign(&other.d_w1_a)?;
        if self.d_w2_b.len() != other.d_w2_b.len() {
            return Err(Error::dim(
                "HyperGrads::accumulate",
                self.d_w2_b.len(),
                other.d_w2_b.len(),
            ));
        }
        for (a, b) in self.d_w2_b.iter_mut().zip(&other.d_w2_b) {
            a.add_assign(b)?;
        }
        for (a, b) in self.d_w2_a.iter_mut().zip(&other.d_w2_a) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.d_b_embed, &self.d_a_embed, &self.d_w1_b, &self.d_w1_a]
            .into_iter()
            .chain(&self.d_w2_b)
            .chain(&self.d_w2_a)
            .all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    /// `G = ∂L/∂W`, as supplied.
    pub upstream: Matrix,
    pub d_wprime: Matrix,
    pub d_b: Matrix,
    pub d_a: Matrix,
    pub d_m: Vec<f64>,
    pub d_tau: f64,
    pub d_tau_raw: f64,
    pub hyper: Option<HyperGrads>,
}

impl GradBundle {
    pub fn is_finite(&self) -> bool {
        self.d_wprime.is_finite()
            && self.d_b.is_finite()
            && self.d_a.is_finite()
            && self.d_m.iter().all(|v| v.is_finite())
            && self.d_tau_raw.is_finite()
            && self.hyper.as_ref().is_none_or(HyperGrads::is_finite)
    }
}

/// Reverse pass through `W = m · (W₀ + BA) / (‖·‖_c + τ)` and, for
/// hypernet-backed adapters, through both generator paths. Requires the
/// intermediates of a prior [`DoranAdapter::forward`].
pub fn backprop_adapter(ad: &DoranAdapter, g: &Matrix) -> Result<GradBundle> {
    let cache = ad
        .cache()
        .ok_or_else(|| Error::State("backprop_adapter called before forward".into()))?;
    g.same_shape(&cache.weight, "backprop_adapter")?;
    let tau = cache.tau;
    let d_wprime = grad_wprime(g, &cache.wprime, ad.m(), tau)?;
    let d_b = d_wprime.matmul_t(&cache.a)?;
    let d_a = cache.b.t_matmul(&d_wprime)?;
    let d_m = grad_m(g, &cache.wprime, tau)?;
    let d_tau = grad_tau(g, &cache.wprime, ad.m(), tau)?;
    let d_tau_raw = grad_tau_raw(d_tau, ad.tau_raw());

    let hyper = match ad.source() {
        FactorSource::Direct { .. } => None,
        FactorSource::Hyper {
            net,
            head,
            projection,
        } => {
            let shared = cache
                .hyper
                .as_ref()
                .ok_or_else(|| Error::State("forward cache lacks hypernet activations".into()))?;
            let net = net
                .read()
                .map_err(|_| Error::State("hypernet lock poisoned".into()))?;
            let slot = net.slot(*head, *projection)?;
            let mut hg = HyperGrads::zeros_like(&net);

            hg.d_w2_b[slot] = d_b.matmul_t(&shared.b_hidden)?;
            let d_hb = net.w2_b[slot].t_matmul(&d_b)?;
            let d_zb = net.activation.backward(&shared.b_pre, &d_hb)?;
            hg.d_w1_b = d_zb.matmul_t(&net.b_embed)?;
            hg.d_b_embed = net.w1_b.t_matmul(&d_zb)?;

            hg.d_w2_a[slot] = d_a.matmul_t(&shared.a_hidden)?;
            let d_ha = net.w2_a[slot].t_matmul(&d_a)?;
            let d_za = net.activation.backward(&shared.a_pre, &d_ha)?;
            hg.d_w1_a = d_za.matmul_t(&net.a_embed)?;
            hg.d_a_embed = net.w1_a.t_matmul(&d_za)?;
            Some(hg)
        }
    };

    Ok(GradBundle {
        upstream: g.clone(),
        d_wprime,
        d_b,
        d_a,
        d_m,
        d_tau,
        d_tau_raw,
        hyper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{share, HyperNetConfig, Projection};
    use crate::numeric::{Activation, SeededRng};

    fn cfg() -> HyperNetConfig {
        HyperNetConfig {
            embed_dim: 6,
            hidden: 4,
            activation: Activation::LeakyRelu { slope: 0.01 },
        }
    }

    #[test]
    fn missing_forward_is_state_error() {
        let mut rng = SeededRng::new(1);
        let ad = DoranAdapter::init_direct(rng.gaussian_matrix(4, 4, 1.0), 2, &mut rng).unwrap();
        assert!(matches!(
            backprop_adapter(&ad, &Matrix::zeros(4, 4)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_second_layers_block_first_layer_grads() {
        let mut rng = SeededRng::new(2);
        let mut net = HyperNetPair::random(4, 4, 2, 1, &cfg(), &mut rng).unwrap();
        net.w2_b[0] = Matrix::zeros(4, 4);
        net.w2_a[0] = Matrix::zeros(2, 4);
        let net = share(net);
        let mut ad =
            DoranAdapter::init_hyper(rng.gaussian_matrix(4, 4, 1.0), net.clone(), 0, Projection::Query)
                .unwrap();
        ad.forward().unwrap();
        let g = rng.gaussian_matrix(4, 4, 1.0);
        let hg = backprop_adapter(&ad, &g).unwrap().hyper.unwrap();
        assert_eq!(hg.d_w1_b.max_abs(), 0.0);
        assert_eq!(hg.d_w1_a.max_abs(), 0.0);
        // Both factors are zero, so the second layers see no signal either.
        assert_eq!(hg.d_w2_b[0].max_abs(), 0.0);

        // With A non-zero, the B-side second layer does receive gradient.
        net.write().unwrap().w2_a[0] = rng.gaussian_matrix(2, 4, 1.0);
        ad.forward().unwrap();
        let hg = backprop_adapter(&ad, &g).unwrap().hyper.unwrap();
        assert_eq!(hg.d_w1_b.max_abs(), 0.0);
        assert!(hg.d_w2_b[0].max_abs() > 0.0);
    }
}
