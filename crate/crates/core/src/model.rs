//! The two-stream network: face and context encoders, attention streams,
//! context correction, gated fusion and the classification head.

use std::fmt;
use std::str::FromStr;

use crate::agcim::{AgCim, CimTrace};
use crate::attention::AttentionStream;
use crate::classifier::fuse_classify;
use crate::config::{join, KeyValues};
use crate::encoder::{Encoder, EncoderConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Ablation presets: which attention streams and whether the correction
/// module is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    /// Everything on.
    A,
    /// No MHSA in either stream; correction on.
    B,
    /// MHSA in both streams; no correction.
    C,
    /// Context MHSA and correction; no face MHSA.
    D,
    /// Encoders and plain fusion only.
    E,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::E];

    /// `(face_mhsa, context_mhsa, ag_cim)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Ablation::A => (true, true, true),
            Ablation::B => (false, false, true),
            Ablation::C => (true, true, false),
            Ablation::D => (false, true, true),
            Ablation::E => (false, false, false),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.to_string().eq_ignore_ascii_case(s.trim())).ok_or_else(|| Error::config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: usize,
    pub num_classes: usize,
    pub face_mhsa: bool,
    pub context_mhsa: bool,
    pub ag_cim: bool,
    /// Use one set of encoder weights for both streams.
    pub share_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), heads: 4, num_classes: 7, face_mhsa: true, context_mhsa: true, ag_cim: true, share_encoders: false }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.face_mhsa, self.context_mhsa, self.ag_cim) = a.switches();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.encoder.out_dim();
        if (self.face_mhsa || self.context_mhsa) && (self.heads == 0 || d % self.heads != 0) {
            return Err(Error::config(format!("feature dim {d} is not divisible by {} heads", self.heads)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let e = d.encoder.clone();
        let cfg = Self {
            encoder: EncoderConfig {
                in_channels: kv.take("in_channels", e.in_channels)?,
                patch: kv.take("patch", e.patch)?,
                dims: kv.take_list("dims", e.dims)?,
                depths: kv.take_list("depths", e.depths)?,
                se_reduction: kv.take("se_reduction", e.se_reduction)?,
                stn: kv.take("stn", e.stn)?,
                se: kv.take("se", e.se)?,
            },
            heads: kv.take("heads", d.heads)?,
            num_classes: kv.take("num_classes", d.num_classes)?,
            face_mhsa: kv.take("face_mhsa", d.face_mhsa)?,
            context_mhsa: kv.take("context_mhsa", d.context_mhsa)?,
            ag_cim: kv.take("ag_cim", d.ag_cim)?,
            share_encoders: kv.take("share_encoders", d.share_encoders)?,
        };
        let cfg = match kv.remove("ablation") {
            Some(a) => cfg.with_ablation(a.parse()?),
            None => cfg,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let e = &self.encoder;
        kv.set("in_channels", e.in_channels);
        kv.set("patch", e.patch);
        kv.set("dims", join(&e.dims));
        kv.set("depths", join(&e.depths));
        kv.set("se_reduction", e.se_reduction);
        kv.set("stn", e.stn);
        kv.set("se", e.se);
        kv.set("heads", self.heads);
        kv.set("num_classes", self.num_classes);
        kv.set("face_mhsa", self.face_mhsa);
        kv.set("context_mhsa", self.context_mhsa);
        kv.set("ag_cim", self.ag_cim);
        kv.set("share_encoders", self.share_encoders);
        kv
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub h_face: Var,
    pub h_context: Var,
    pub phi_f: Var,
    pub phi_c: Var,
    pub trace: Option<CimTrace>,
}

#[derive(Clone, Debug)]
pub struct AgcdNet {
    pub cfg: ModelConfig,
    face_enc: Encoder,
    context_enc: Encoder,
    face_att: AttentionStream,
    context_att: AttentionStream,
    cim: AgCim,
}

impl AgcdNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.out_dim();
        let (fp, cp) = if cfg.share_encoders { ("enc", "enc") } else { ("face.enc", "context.enc") };
        Ok(Self {
            face_enc: Encoder::new(cfg.encoder.clone(), fp)?,
            context_enc: Encoder::new(cfg.encoder.clone(), cp)?,
            face_att: AttentionStream::new(d, cfg.heads, cfg.face_mhsa, "face.att")?,
            context_att: AttentionStream::new(d, cfg.heads, cfg.context_mhsa, "context.att")?,
            cim: AgCim::new(d, cfg.ag_cim, "cim"),
            cfg,
        })
    }

    /// Fresh parameters. Each module draws from its own stream, so modules
    /// common to two configurations start from identical weights.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.face_enc.init(&mut store, &mut stream(seed, &self.face_enc.prefix, 0));
        if !self.cfg.share_encoders {
            self.context_enc.init(&mut store, &mut stream(seed, &self.context_enc.prefix, 0));
        }
        self.face_att.init(&mut store, &mut stream(seed, "face.att", 0));
        self.context_att.init(&mut store, &mut stream(seed, "context.att", 0));
        self.cim.init(&mut store, &mut stream(seed, "cim", 0));
        let (d, k) = (self.cfg.encoder.out_dim(), self.cfg.num_classes);
        store.insert("head.w", Tensor::zeros([d, k]));
        store.insert("head.b", Tensor::zeros([k]));
        store
    }

    /// `face: [N,C,Hf,Wf]`, `context: [N,C,H,W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, face: Var, context: Var) -> Result<ForwardOut> {
        if g.shape(face)[0] != g.shape(context)[0] {
            return Err(Error::config(format!("face batch {:?} vs context batch {:?}", g.shape(face), g.shape(context))));
        }
        let fe = self.face_enc.forward(g, p, face)?;
        let ce = self.context_enc.forward(g, p, context)?;
        let fa = self.face_att.forward(g, p, fe.map)?;
        let ca = self.context_att.forward(g, p, ce.map)?;
        let (phi_c, trace) = self.cim.forward(g, p, ca.phi, fa.phi)?;
        let logits = fuse_classify(g, fa.phi, phi_c, fa.h, ca.h, p.get("head.w")?, p.get("head.b")?)?;
        Ok(ForwardOut { logits, h_face: fa.h, h_context: ca.h, phi_f: fa.phi, phi_c, trace })
    }
}
