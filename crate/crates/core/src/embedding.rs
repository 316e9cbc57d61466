//! Coordinate vectors for (input point, output point) pairs and the Fourier
//! feature mapping fed to each hypernetwork.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::{d_cos, QSpacePoint};
use crate::{Error, Result};

/// Which components make up the coordinate vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `[Δu, Δv, Δw, Δρ, d_cos]`
    Standard,
    /// `[Δu, Δv, Δw, ρ_in, ρ_out, d_cos]`
    Bv,
    /// standard plus the patch centroid
    Sp,
    /// bv plus the patch centroid
    BvSp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Standard, Variant::Bv, Variant::Sp, Variant::BvSp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Bv => "bv",
            Variant::Sp => "sp",
            Variant::BvSp => "bv_sp",
        }
    }

    pub fn uses_centroid(self) -> bool {
        matches!(self, Variant::Sp | Variant::BvSp)
    }

    pub fn separate_bvalues(self) -> bool {
        matches!(self, Variant::Bv | Variant::BvSp)
    }

    /// Component count with the direction similarity included.
    pub fn components(self) -> usize {
        match self {
            Variant::Standard => 5,
            Variant::Bv => 6,
            Variant::Sp => 8,
            Variant::BvSp => 9,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub variant: Variant,
    /// Number of Fourier bands `L`.
    pub bands: usize,
    /// Divisor applied to b-values before they enter the coordinate vector.
    pub b_scale: f64,
    /// When false the coordinate vector is passed through unmapped.
    pub fourier: bool,
    /// When false the direction similarity component is dropped.
    pub include_dcos: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Standard,
            bands: 4,
            b_scale: 3000.0,
            fourier: true,
            include_dcos: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn new(variant: Variant, bands: usize) -> Self {
        Self {
            variant,
            bands,
            ..Self::default()
        }
    }

    /// Number of coordinate components `E`.
    pub fn components(&self) -> usize {
        self.variant.components() - usize::from(!self.include_dcos)
    }

    /// Length of the vector handed to the hypernetwork.
    pub fn width(&self) -> usize {
        if self.fourier {
            2 * self.bands * self.components()
        } else {
            self.components()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fourier && self.bands == 0 {
            return Err(Error::InvalidConfig("Fourier bands must be ≥ 1".into()));
        }
        if !(self.b_scale > 0.0 && self.b_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "b_scale must be positive, got {}",
                self.b_scale
            )));
        }
        Ok(())
    }
}

/// Centroid check shared by every entry point that takes one.
pub fn check_centroid(variant: Variant, centroid: Option<[f64; 3]>) -> Result<Option<[f64; 3]>> {
    if !variant.uses_centroid() {
        return Ok(None);
    }
    let c = centroid.ok_or(Error::MissingCentroid {
        variant: variant.name(),
    })?;
    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig(format!(
            "centroid components must lie in [0, 1], got {c:?}"
        )));
    }
    Ok(Some(c))
}

/// The coordinate vector `p` for input point `x` and output point `y`.
pub fn build_p(
    x: &QSpacePoint,
    y: &QSpacePoint,
    cfg: &EmbeddingConfig,
    centroid: Option<[f64; 3]>,
) -> Result<Vec<f64>> {
    let centroid = check_centroid(cfg.variant, centroid)?;
    let mut p = Vec::with_capacity(cfg.components());
    p.extend([x.u - y.u, x.v - y.v, x.w - y.w]);
    if cfg.variant.separate_bvalues() {
        p.push(x.rho / cfg.b_scale);
        p.push(y.rho / cfg.b_scale);
    } else {
        p.push((x.rho - y.rho) / cfg.b_scale);
    }
    if cfg.include_dcos {
        p.push(d_cos(&x.dir, &y.dir));
    }
    if let Some(c) = centroid {
        p.extend(c);
    }
    Ok(p)
}

/// `[sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]` per component,
/// concatenated in component order.
pub fn fourier_map(p: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * p.len());
    fourier_map_into(p, bands, &mut out);
    out
}

pub(crate) fn fourier_map_into(p: &[f64], bands: usize, out: &mut Vec<f64>) {
    for &pm in p {
        let mut freq = PI;
        for _ in 0..bands {
            let (s, c) = (freq * pm).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

/// Full embedding of one pair: `fourier_map(build_p(..))`, or `p` itself
/// when the mapping is disabled.
pub fn embed(
    x: &QSpacePoint,
    y: &QSpacePoint,
    cfg: &EmbeddingConfig,
    centroid: Option<[f64; 3]>,
) -> Result<Vec<f64>> {
    let p = build_p(x, y, cfg, centroid)?;
    if cfg.fourier {
        Ok(fourier_map(&p, cfg.bands))
    } else {
        Ok(p)
    }
}
