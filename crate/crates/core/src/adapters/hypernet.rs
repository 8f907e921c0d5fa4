//! Hypernetwork that emits low-rank factors.
//!
//! `B = W2B[slot] · σ(W1B · B′)` and `A = W2A[slot] · σ(W1A · A′)`. The
//! embeddings and first layers are single instances shared by every head and
//! by both the query and value projections; only the second layers are
//! per-slot, with `slot = 2 · head + projection`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Value => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "q" | "query" => Ok(Projection::Query),
            "v" | "value" => Ok(Projection::Value),
            other => Err(Error::Lookup(format!("unknown projection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 16,
            activation: Activation::LeakyRelu { slope: 0.01 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetPair {
    /// `B′`: embed × r
    pub b_embed: Matrix,
    /// `A′`: embed × k
    pub a_embed: Matrix,
    /// hidden × embed
    pub w1_b: Matrix,
    /// hidden × embed
    pub w1_a: Matrix,
    /// d × hidden, one per slot
    pub w2_b: Vec<Matrix>,
    /// r × hidden, one per slot
    pub w2_a: Vec<Matrix>,
    pub activation: Activation,
}

/// First-layer activations, computed once per forward pass and reused by
/// every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedActivations {
    pub b_pre: Matrix,
    pub b_hidden: Matrix,
    pub a_pre: Matrix,
    pub a_hidden: Matrix,
}

impl HyperNetPair {
    /// Random embeddings and first layers; `W2B = 0` so every generated `B`
    /// starts at zero, while `W2A` is random so gradients reach the network.
    pub fn init(
        d: usize,
        k: usize,
        r: usize,
        heads: usize,
        cfg: &HyperNetConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.activation.validate()?;
        if heads == 0 || r == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config(
                "hypernet needs heads, rank, embed_dim and hidden >= 1".into(),
            ));
        }
        let e = cfg.embed_dim;
        let h = cfg.hidden;
        let slots = 2 * heads;
        Ok(Self {
            b_embed: rng.gaussian_matrix(e, r, 1.0),
            a_embed: rng.gaussian_matrix(e, k, 1.0),
            w1_b: rng.gaussian_matrix(h, e, (1.0 / e as f64).sqrt()),
            w1_a: rng.gaussian_matrix(h, e, (1.0 / e as f64).sqrt()),
            w2_b: (0..slots).map(|_| Matrix::zeros(d, h)).collect(),
            w2_a: (0..slots)
                .map(|_| rng.gaussian_matrix(r, h, (1.0 / h as f64).sqrt()))
                .collect(),
            activation: cfg.activation,
        })
    }

    /// Fully random network, used by gradient checks.
    pub fn random(
        d: usize,
        k: usize,
        r: usize,
        heads: usize,
        cfg: &HyperNetConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut net = Self::init(d, k, r, heads, cfg, rng)?;
        let h = cfg.hidden as f64;
        for w in &mut net.w2_b {
            *w = rng.gaussian_matrix(w.rows(), w.cols(), (1.0 / h).sqrt());
        }
        Ok(net)
    }

    pub fn heads(&self) -> usize {
        self.w2_b.len() / 2
    }

    pub fn rank(&self) -> usize {
        self.b_embed.cols()
    }

    pub fn out_rows(&self) -> usize {
        self.w2_b.first().map_or(0, Matrix::rows)
    }

    pub fn out_cols(&self) -> usize {
        self.a_embed.cols()
    }

    pub fn slot(&self, head: usize, projection: Projection) -> Result<usize> {
        if head >= self.heads() {
            return Err(Error::Lookup(format!(
                "head {head} not registered (hypernet has {} heads)",
                self.heads()
            )));
        }
        Ok(2 * head + projection.index())
    }

    pub fn shared_forward(&self) -> Result<SharedActivations> {
        let b_pre = self.w1_b.matmul(&self.b_embed)?;
        let a_pre = self.w1_a.matmul(&self.a_embed)?;
        Ok(SharedActivations {
            b_hidden: self.activation.forward(&b_pre),
            a_hidden: self.activation.forward(&a_pre),
            b_pre,
            a_pre,
        })
    }

    pub fn generate_with(
        &self,
        shared: &SharedActivations,
        head: usize,
        projection: Projection,
    ) -> Result<(Matrix, Matrix)> {
        let slot = self.slot(head, projection)?;
        let b = self.w2_b[slot].matmul(&shared.b_hidden)?;
        let a = self.w2_a[slot].matmul(&shared.a_hidden)?;
        Ok((b, a))
    }

    /// `(B, A)` for one head and projection.
    pub fn generate(&self, head: usize, projection: Projection) -> Result<(Matrix, Matrix)> {
        self.generate_with(&self.shared_forward()?, head, projection)
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        if self.w2_b.len() != self.w2_a.len() || self.w2_b.is_empty() || self.w2_b.len() % 2 != 0
        {
            return Err(Error::Config(
                "hypernet needs matching, even, non-empty second-layer lists".into(),
            ));
        }
        let (e, r) = self.b_embed.shape();
        let (ea, _) = self.a_embed.shape();
        let h = self.w1_b.rows();
        let check = |m: &Matrix, shape: (usize, usize), name: &str| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::dim(
                    "HyperNetPair::validate",
                    format!("{name} {shape:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
            Ok(())
        };
        check(&self.a_embed, (e, self.a_embed.cols()), "a_embed")?;
        if ea != e {
            return Err(Error::dim("HyperNetPair::validate", e, ea));
        }
        check(&self.w1_b, (h, e), "w1_b")?;
        check(&self.w1_a, (h, e), "w1_a")?;
        let d = self.out_rows();
        for w in &self.w2_b {
            check(w, (d, h), "w2_b")?;
        }
        for w in &self.w2_a {
            check(w, (r, h), "w2_a")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::leaky_relu;

    fn small_cfg() -> HyperNetConfig {
        HyperNetConfig {
            embed_dim: 5,
            hidden: 3,
            activation: Activation::LeakyRelu { slope: 0.01 },
        }
    }

    #[test]
    fn shapes_follow_owner_layer() {
        let mut rng = SeededRng::new(1);
        let net = HyperNetPair::random(6, 4, 2, 3, &small_cfg(), &mut rng).unwrap();
        net.validate().unwrap();
        let (b, a) = net.generate(2, Projection::Value).unwrap();
        assert_eq!(b.shape(), (6, 2));
        assert_eq!(a.shape(), (2, 4));
    }

    #[test]
    fn first_layer_is_shared_bit_for_bit() {
        let mut rng = SeededRng::new(2);
        let net = HyperNetPair::random(4, 4, 2, 2, &small_cfg(), &mut rng).unwrap();
        let shared = net.shared_forward().unwrap();
        // Recomputing for a different head or projection gives the same bits.
        for _ in [(0, Projection::Query), (1, Projection::Value)] {
            let again = net.shared_forward().unwrap();
            assert_eq!(again, shared);
        }
        let (b0, _) = net.generate_with(&shared, 0, Projection::Query).unwrap();
        let (b0_fresh, _) = net.generate(0, Projection::Query).unwrap();
        assert_eq!(b0, b0_fresh);
    }

    #[test]
    fn zero_second_layer_gives_zero_factor() {
        let mut rng = SeededRng::new(3);
        let mut net = HyperNetPair::random(4, 4, 2, 2, &small_cfg(), &mut rng).unwrap();
        let slot = net.slot(1, Projection::Query).unwrap();
        net.w2_b[slot] = Matrix::zeros(4, 3);
        let (b, _) = net.generate(1, Projection::Query).unwrap();
        assert_eq!(b, Matrix::zeros(4, 2));
        let (b_other, _) = net.generate(0, Projection::Query).unwrap();
        assert!(b_other.max_abs() > 0.0);
    }

    #[test]
    fn identity_second_layer_composes_primitives() {
        let mut rng = SeededRng::new(4);
        let cfg = HyperNetConfig {
            embed_dim: 5,
            hidden: 3,
            activation: Activation::LeakyRelu { slope: 0.01 },
        };
        // d = hidden and r = hidden so W2 can be the identity.
        let mut net = HyperNetPair::random(3, 4, 3, 1, &cfg, &mut rng).unwrap();
        net.w2_b[0] = Matrix::identity(3);
        net.w2_a[0] = Matrix::identity(3);
        let (b, a) = net.generate(0, Projection::Query).unwrap();
        let expect_b = leaky_relu(&net.w1_b.matmul(&net.b_embed).unwrap(), 0.01).unwrap();
        let expect_a = leaky_relu(&net.w1_a.matmul(&net.a_embed).unwrap(), 0.01).unwrap();
        assert_eq!(b, expect_b);
        assert_eq!(a, expect_a);
    }

    #[test]
    fn unregistered_head_is_lookup_error() {
        let mut rng = SeededRng::new(5);
        let net = HyperNetPair::random(4, 4, 2, 2, &small_cfg(), &mut rng).unwrap();
        assert!(matches!(
            net.generate(2, Projection::Query),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn sharing_structure_under_perturbation() {
        let mut rng = SeededRng::new(6);
        let net = HyperNetPair::random(4, 4, 2, 2, &small_cfg(), &mut rng).unwrap();
        let before: Vec<Matrix> = (0..2)
            .map(|h| net.generate(h, Projection::Query).unwrap().0)
            .collect();

        let mut first = net.clone();
        first.w1_b = first.w1_b.map(|x| x * 1.1 + 0.01);
        for (h, b) in before.iter().enumerate() {
            assert_ne!(&first.generate(h, Projection::Query).unwrap().0, b);
        }

        let mut second = net.clone();
        let slot = second.slot(0, Projection::Query).unwrap();
        second.w2_b[slot] = second.w2_b[slot].map(|x| x + 0.1);
        assert_ne!(second.generate(0, Projection::Query).unwrap().0, before[0]);
        assert_eq!(second.generate(1, Projection::Query).unwrap().0, before[1]);
    }
}
