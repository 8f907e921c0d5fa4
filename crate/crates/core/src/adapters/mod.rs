//! Adapted-weight maps and the factor-generating hypernetwork.

mod hypernet;
mod weights;

pub use hypernet::{HyperNetConfig, HyperNetPair, Projection, SharedActivations};
pub use weights::{
    dora_weight, doran_weight, expected_column_norms, lora_weight, normalize_columns,
    relative_distance, share, DoranAdapter, FactorSource, ForwardCache, LoraAdapter,
    SharedHyperNet,
};

use crate::codec::ParamDoc;
use crate::error::{Error, Result};
use crate::numeric::Activation;

impl HyperNetPair {
    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("hypernet");
        self.write_into(&mut doc, "");
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self> {
        doc.expect_structure("hypernet")?;
        Self::read_from(doc, "")
    }

    fn write_into(&self, doc: &mut ParamDoc, prefix: &str) {
        doc.put_matrix(format!("{prefix}b_embed"), &self.b_embed);
        doc.put_matrix(format!("{prefix}a_embed"), &self.a_embed);
        doc.put_matrix(format!("{prefix}w1_b"), &self.w1_b);
        doc.put_matrix(format!("{prefix}w1_a"), &self.w1_a);
        for (s, (wb, wa)) in self.w2_b.iter().zip(&self.w2_a).enumerate() {
            doc.put_matrix(format!("{prefix}w2_b.{s}"), wb);
            doc.put_matrix(format!("{prefix}w2_a.{s}"), wa);
        }
        doc.put_topology(format!("{prefix}slots"), self.w2_b.len());
        doc.put_topology(format!("{prefix}activation"), self.activation.tag());
    }

    fn read_from(doc: &ParamDoc, prefix: &str) -> Result<Self> {
        let slots = doc.topology_usize(&format!("{prefix}slots"))?;
        let net = Self {
            b_embed: doc.matrix(&format!("{prefix}b_embed"))?,
            a_embed: doc.matrix(&format!("{prefix}a_embed"))?,
            w1_b: doc.matrix(&format!("{prefix}w1_b"))?,
            w1_a: doc.matrix(&format!("{prefix}w1_a"))?,
            w2_b: (0..slots)
                .map(|s| doc.matrix(&format!("{prefix}w2_b.{s}")))
                .collect::<Result<_>>()?,
            w2_a: (0..slots)
                .map(|s| doc.matrix(&format!("{prefix}w2_a.{s}")))
                .collect::<Result<_>>()?,
            activation: Activation::parse(doc.topology_str(&format!("{prefix}activation"))?)?,
        };
        net.validate()?;
        Ok(net)
    }
}

impl DoranAdapter {
    /// Direct adapters carry `B`, `A`; hypernet-backed adapters carry the
    /// network under the `net.` prefix plus the head and projection.
    pub fn to_doc(&self) -> Result<ParamDoc> {
        let mut doc = ParamDoc::new("doran-adapter");
        doc.put_matrix("w0", self.w0());
        doc.put_vector("m", self.m());
        doc.put_scalar("tau_raw", self.tau_raw());
        match self.source() {
            FactorSource::Direct { b, a } => {
                doc.put_topology("factors", "direct");
                doc.put_matrix("b", b);
                doc.put_matrix("a", a);
            }
            FactorSource::Hyper {
                net,
                head,
                projection,
            } => {
                doc.put_topology("factors", "hyper");
                doc.put_topology("head", *head);
                doc.put_topology("projection", projection.tag());
                let net = net
                    .read()
                    .map_err(|_| Error::State("hypernet lock poisoned".into()))?;
                net.write_into(&mut doc, "net.");
            }
        }
        Ok(doc)
    }

    /// `shared` re-attaches a hypernet-backed adapter to an existing network
    /// instead of the copy stored in the document.
    pub fn from_doc(doc: &ParamDoc, shared: Option<SharedHyperNet>) -> Result<Self> {
        doc.expect_structure("doran-adapter")?;
        let w0 = doc.matrix("w0")?;
        let m = doc.vector("m")?;
        let tau_raw = doc.scalar("tau_raw")?;
        let source = match doc.topology_str("factors")? {
            "direct" => FactorSource::Direct {
                b: doc.matrix("b")?,
                a: doc.matrix("a")?,
            },
            "hyper" => FactorSource::Hyper {
                net: match shared {
                    Some(net) => net,
                    None => share(HyperNetPair::read_from(doc, "net.")?),
                },
                head: doc.topology_usize("head")?,
                projection: Projection::parse(doc.topology_str("projection")?)?,
            },
            other => {
                return Err(Error::Serialization(format!(
                    "unknown factor source {other:?}"
                )))
            }
        };
        Self::new(w0, m, tau_raw, source)
    }
}
