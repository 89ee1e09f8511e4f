use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::format::KvDoc;
use crate::param::Manifest;

/// Which fusion operator to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// `y = W [q; v]`.
    Concat,
    /// Unconstrained 3-way tensor `y = (T ×₁ q) ×₂ v`.
    FullBilinear,
    /// Tucker factors with a dense learnable core.
    TuckerFusion,
    /// Tucker factors with a slice-rank-constrained core.
    Mutan,
    /// Identity core, `t_q = t_v = t_o = R`.
    Mlb,
    /// Fixed count-sketch of the outer product followed by a learnt output matrix.
    Mcb,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Concat,
        Scheme::FullBilinear,
        Scheme::TuckerFusion,
        Scheme::Mutan,
        Scheme::Mlb,
        Scheme::Mcb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Concat => "concat",
            Scheme::FullBilinear => "full-bilinear",
            Scheme::TuckerFusion => "tucker",
            Scheme::Mutan => "mutan",
            Scheme::Mlb => "mlb",
            Scheme::Mcb => "mcb",
        }
    }

    /// Whether the operator is a Tucker decomposition of a bilinear tensor.
    pub fn is_tucker_family(self) -> bool {
        matches!(
            self,
            Scheme::TuckerFusion | Scheme::Mutan | Scheme::Mlb | Scheme::Mcb
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "concat" => Scheme::Concat,
            "full-bilinear" | "bilinear" | "full" => Scheme::FullBilinear,
            "tucker" | "mutan-nor" | "mutan_nor" => Scheme::TuckerFusion,
            "mutan" => Scheme::Mutan,
            "mlb" => Scheme::Mlb,
            "mcb" => Scheme::Mcb,
            _ => return Err(Error::InvalidConfig(format!("unknown fusion scheme `{s}`"))),
        })
    }
}

/// Dimensions and hyper-parameters of one fusion operator.
///
/// Fields a scheme does not use are left at 0. `rank` is the per-slice rank
/// for [`Scheme::Mutan`] and the shared projection size for [`Scheme::Mlb`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub scheme: Scheme,
    pub d_q: usize,
    pub d_v: usize,
    pub d_out: usize,
    pub t_q: usize,
    pub t_v: usize,
    pub t_o: usize,
    pub rank: usize,
    pub sketch_dim: usize,
    pub use_tanh: bool,
    pub seed: u64,
}

impl FusionConfig {
    pub fn new(scheme: Scheme, d_q: usize, d_v: usize, d_out: usize) -> Self {
        FusionConfig {
            scheme,
            d_q,
            d_v,
            d_out,
            t_q: 0,
            t_v: 0,
            t_o: 0,
            rank: 0,
            sketch_dim: 0,
            use_tanh: true,
            seed: 0,
        }
    }

    pub fn with_projections(mut self, t_q: usize, t_v: usize, t_o: usize) -> Self {
        self.t_q = t_q;
        self.t_v = t_v;
        self.t_o = t_o;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_sketch_dim(mut self, sketch_dim: usize) -> Self {
        self.sketch_dim = sketch_dim;
        self
    }

    pub fn with_tanh(mut self, use_tanh: bool) -> Self {
        self.use_tanh = use_tanh;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Projection sizes `(t_q, t_v, t_o)` actually used by the scheme.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        match self.scheme {
            Scheme::Mlb => (self.rank, self.rank, self.rank),
            Scheme::Mcb => (self.d_q, self.d_v, self.sketch_dim),
            _ => (self.t_q, self.t_v, self.t_o),
        }
    }

    /// Whether tanh is applied to the input projections for this scheme.
    pub fn applies_tanh(&self) -> bool {
        self.use_tanh && matches!(self.scheme, Scheme::TuckerFusion | Scheme::Mutan | Scheme::Mlb)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |name: &str, value: usize| {
            if value == 0 {
                Err(Error::InvalidConfig(format!(
                    "{} requires {name} > 0",
                    self.scheme
                )))
            } else {
                Ok(())
            }
        };
        need("d_q", self.d_q)?;
        need("d_v", self.d_v)?;
        need("d_out", self.d_out)?;
        match self.scheme {
            Scheme::Concat | Scheme::FullBilinear => {}
            Scheme::TuckerFusion => {
                need("t_q", self.t_q)?;
                need("t_v", self.t_v)?;
                need("t_o", self.t_o)?;
            }
            Scheme::Mutan => {
                need("t_q", self.t_q)?;
                need("t_v", self.t_v)?;
                need("t_o", self.t_o)?;
                need("rank", self.rank)?;
                let limit = self.t_q.min(self.t_v);
                if self.rank > limit {
                    return Err(Error::InvalidConfig(format!(
                        "mutan requires 1 <= rank <= min(t_q, t_v) = {limit}, got rank {}",
                        self.rank
                    )));
                }
            }
            Scheme::Mlb => need("rank", self.rank)?,
            Scheme::Mcb => need("sketch_dim", self.sketch_dim)?,
        }
        Ok(())
    }

    /// Learnable parameter layout. Computed from dimensions alone, so it is
    /// cheap even for full-scale configurations.
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let (t_q, t_v, t_o) = self.latent_dims();
        match self.scheme {
            Scheme::Concat => m.push("w", vec![self.d_out, self.d_q + self.d_v]),
            Scheme::FullBilinear => m.push("t", vec![self.d_q, self.d_v, self.d_out]),
            Scheme::TuckerFusion => {
                m.push("wq", vec![self.d_q, t_q]);
                m.push("wv", vec![self.d_v, t_v]);
                m.push("core", vec![t_q, t_v, t_o]);
                m.push("wo", vec![self.d_out, t_o]);
            }
            Scheme::Mutan => {
                m.push("wq", vec![self.d_q, t_q]);
                m.push("wv", vec![self.d_v, t_v]);
                for r in 0..self.rank {
                    m.push(format!("m.{r}"), vec![t_q, t_o]);
                }
                for r in 0..self.rank {
                    m.push(format!("n.{r}"), vec![t_v, t_o]);
                }
                m.push("wo", vec![self.d_out, t_o]);
            }
            Scheme::Mlb => {
                m.push("wq", vec![self.d_q, t_q]);
                m.push("wv", vec![self.d_v, t_v]);
                m.push("wo", vec![self.d_out, t_o]);
            }
            Scheme::Mcb => m.push("wo", vec![self.d_out, t_o]),
        }
        m
    }

    /// Number of learnable scalars; fixed sketch arrays are not counted.
    pub fn param_count(&self) -> usize {
        self.manifest().total()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("scheme", self.scheme);
        doc.set("d_q", self.d_q);
        doc.set("d_v", self.d_v);
        doc.set("d_out", self.d_out);
        doc.set("t_q", self.t_q);
        doc.set("t_v", self.t_v);
        doc.set("t_o", self.t_o);
        doc.set("rank", self.rank);
        doc.set("sketch_dim", self.sketch_dim);
        doc.set("use_tanh", self.use_tanh);
        doc.set("seed", self.seed);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let usize_or_zero = |key: &str| -> Result<usize> {
            match doc.get(key) {
                None => Ok(0),
                Some(_) => Ok(doc.parse_key(key)?),
            }
        };
        let cfg = FusionConfig {
            scheme: doc.require("scheme").map_err(Error::from)?.parse()?,
            d_q: doc.parse_key("d_q")?,
            d_v: doc.parse_key("d_v")?,
            d_out: doc.parse_key("d_out")?,
            t_q: usize_or_zero("t_q")?,
            t_v: usize_or_zero("t_v")?,
            t_o: usize_or_zero("t_o")?,
            rank: usize_or_zero("rank")?,
            sketch_dim: usize_or_zero("sketch_dim")?,
            use_tanh: match doc.get("use_tanh") {
                None => true,
                Some(_) => doc.parse_key("use_tanh")?,
            },
            seed: match doc.get("seed") {
                None => 0,
                Some(_) => doc.parse_key("seed")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
