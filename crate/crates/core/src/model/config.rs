use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};
use crate::labels::{N_CLASSES, N_COMPS, N_TRACKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelAttention {
    /// Per-channel tokens from unfolded (t, f) patches, attention across channels.
    #[default]
    Ule,
    /// Channels folded into the batch; attention over time with frequency as features.
    Dca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_ch: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub embed_ch: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_tracks: usize,
    pub n_classes: usize,
    pub t_out: usize,
    pub cru_alpha: f64,
    pub cru_group_size: usize,
    pub cru_squeeze_ratio: usize,
    pub sru_gate_threshold: f64,
    /// Replace the soft spatial gate by `g ≥ threshold` (forward only).
    pub sru_hard_gate: bool,
    pub ule_patch: (usize, usize),
    pub ule_dim: usize,
    pub channel_attention: ChannelAttention,
    /// When false, both SCConv units of every block are the identity.
    pub use_scconv: bool,
    pub gn_groups: usize,
    pub fnn_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_ch: 7,
            t_in: 100,
            f_in: 128,
            embed_ch: 64,
            n_blocks: 2,
            n_heads: 8,
            n_tracks: N_TRACKS,
            n_classes: N_CLASSES,
            t_out: 20,
            cru_alpha: 0.5,
            cru_group_size: 2,
            cru_squeeze_ratio: 2,
            sru_gate_threshold: 0.5,
            sru_hard_gate: false,
            ule_patch: (1, 1),
            ule_dim: 64,
            channel_attention: ChannelAttention::Ule,
            use_scconv: true,
            gn_groups: 8,
            fnn_size: 256,
            seed: 0,
        }
    }
}

fn bad(msg: String) -> SeldError {
    SeldError::Domain(msg)
}

impl ModelConfig {
    /// Small configuration for gradient checks and the overfit demo.
    pub fn toy() -> Self {
        Self {
            t_in: 20,
            f_in: 16,
            embed_ch: 16,
            n_blocks: 1,
            n_heads: 4,
            ule_dim: 16,
            gn_groups: 4,
            fnn_size: 32,
            ..Self::default()
        }
    }

    pub fn output_width(&self) -> usize {
        N_COMPS * self.n_tracks * self.n_classes
    }

    /// Time pooling of the first stem stage.
    pub fn time_pool(&self) -> usize {
        self.t_in / self.t_out
    }

    /// Frequency extent after the stem.
    pub fn f_embed(&self) -> usize {
        self.f_in / 8
    }

    /// Channels of the CRU upper branch.
    pub fn cru_upper(&self) -> usize {
        (self.cru_alpha * self.embed_ch as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("in_ch", self.in_ch),
            ("t_in", self.t_in),
            ("f_in", self.f_in),
            ("embed_ch", self.embed_ch),
            ("n_heads", self.n_heads),
            ("n_tracks", self.n_tracks),
            ("n_classes", self.n_classes),
            ("t_out", self.t_out),
            ("cru_group_size", self.cru_group_size),
            ("cru_squeeze_ratio", self.cru_squeeze_ratio),
            ("ule_dim", self.ule_dim),
            ("gn_groups", self.gn_groups),
            ("fnn_size", self.fnn_size),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(bad(format!("{name} must be positive")));
        }
        let e = self.embed_ch;
        if e % self.n_heads != 0 {
            return Err(bad(format!("embed_ch {e} not divisible by n_heads {}", self.n_heads)));
        }
        if e % 2 != 0 {
            return Err(bad(format!("embed_ch {e} must be even")));
        }
        if e % self.gn_groups != 0 {
            return Err(bad(format!("embed_ch {e} not divisible by gn_groups {}", self.gn_groups)));
        }
        if self.t_in % self.t_out != 0 {
            return Err(bad(format!("t_in {} not divisible by t_out {}", self.t_in, self.t_out)));
        }
        if self.f_in % 8 != 0 {
            return Err(bad(format!("f_in {} not divisible by 8", self.f_in)));
        }
        if !(self.cru_alpha > 0.0 && self.cru_alpha < 1.0) {
            return Err(bad(format!("cru_alpha {} outside (0, 1)", self.cru_alpha)));
        }
        let up = self.cru_alpha * e as f64;
        if (up - up.round()).abs() > 1e-9 {
            return Err(bad(format!("cru_alpha·embed_ch = {up} is not an integer")));
        }
        let (up, low) = (self.cru_upper(), e - self.cru_upper());
        let r = self.cru_squeeze_ratio;
        if up % r != 0 || low % r != 0 {
            return Err(bad(format!("CRU branches {up}/{low} not divisible by squeeze ratio {r}")));
        }
        let up_sq = up / r;
        if up_sq % self.cru_group_size != 0 || e % (up_sq / self.cru_group_size) != 0 {
            return Err(bad(format!(
                "grouped CRU conv: {up_sq} channels in groups of {} do not divide {e} outputs",
                self.cru_group_size
            )));
        }
        if low / r > e {
            return Err(bad("CRU lower branch wider than the embedding".into()));
        }
        let (pt, pf) = self.ule_patch;
        if pt == 0 || pf == 0 || self.t_out % pt != 0 || self.f_embed() % pf != 0 {
            return Err(bad(format!(
                "ule_patch {:?} does not tile the {}×{} embedding",
                self.ule_patch,
                self.t_out,
                self.f_embed()
            )));
        }
        match self.channel_attention {
            ChannelAttention::Ule if self.ule_dim % self.n_heads != 0 => {
                return Err(bad(format!("ule_dim {} not divisible by n_heads {}", self.ule_dim, self.n_heads)));
            }
            ChannelAttention::Dca if self.f_embed() % self.n_heads != 0 => {
                return Err(bad(format!(
                    "embedded frequency extent {} not divisible by n_heads {}",
                    self.f_embed(),
                    self.n_heads
                )));
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.sru_gate_threshold) {
            return Err(bad(format!("sru_gate_threshold {} outside [0, 1]", self.sru_gate_threshold)));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a `.json` file as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
