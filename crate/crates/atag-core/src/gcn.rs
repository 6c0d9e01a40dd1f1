//! Local branch: adaptive graph convolution over a banded snippet graph,
//! plus the ablation variants (fixed adjacency only, dynamic adjacency
//! only, plain temporal convolution).

use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};
use crate::model::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalVariant {
    /// Fixed adjacency plus content-dependent adjacency.
    Adaptive,
    /// Fixed (learned) adjacency only.
    GeneralGcn,
    /// Content-dependent adjacency only.
    SelfAttnGcn,
    /// Temporal convolution with kernel 2*delta+1, no graph.
    Conv,
}

impl LocalVariant {
    pub fn name(self) -> &'static str {
        match self {
            LocalVariant::Adaptive => "adaptive",
            LocalVariant::GeneralGcn => "general-gcn",
            LocalVariant::SelfAttnGcn => "self-attn-gcn",
            LocalVariant::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(LocalVariant::Adaptive),
            "general-gcn" => Ok(LocalVariant::GeneralGcn),
            "self-attn-gcn" => Ok(LocalVariant::SelfAttnGcn),
            "conv" => Ok(LocalVariant::Conv),
            other => Err(CoreError::config(format!("unknown local variant '{other}'"))),
        }
    }

    fn uses_fixed(self) -> bool {
        matches!(self, LocalVariant::Adaptive | LocalVariant::GeneralGcn)
    }

    fn uses_dynamic(self) -> bool {
        matches!(self, LocalVariant::Adaptive | LocalVariant::SelfAttnGcn)
    }
}

#[derive(Debug, Clone)]
pub struct GcnConfig {
    /// Branch width `C_l`.
    pub width: usize,
    /// Graph half-width; snippets m, n are connected iff |m - n| <= delta.
    pub delta: usize,
    pub variant: LocalVariant,
}

impl GcnConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.delta >= t {
            return Err(CoreError::config(format!(
                "delta {} must be smaller than sequence length {t}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Binary band mask M, `t x t`, with M[m][n] = 1 iff |m - n| <= delta.
pub fn build_band_mask<S: Scalar>(t: usize, delta: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * t];
    for m in 0..t {
        for n in m.saturating_sub(delta)..=(m + delta).min(t - 1) {
            data[m * t + n] = S::one();
        }
    }
    Tensor::new(vec![t, t], data).expect("band mask shape")
}

/// Additive form of the band mask: 0 in band, -inf outside.
fn band_mask_additive<S: Scalar>(band: &Tensor<S>) -> Tensor<S> {
    band.map(|v| if v > S::zero() { S::zero() } else { S::neg_infinity() })
}

pub fn register_params<S: Scalar>(
    ps: &mut ParamSet<S>,
    p: &str,
    cfg: &GcnConfig,
    t: usize,
    rng: &mut impl RngCore,
) {
    let w = cfg.width;
    if let LocalVariant::Conv = cfg.variant {
        let k = 2 * cfg.delta + 1;
        ps.add(format!("{p}.conv.w"), Tensor::xavier(vec![w, w, k], w * k, rng));
        ps.add(format!("{p}.conv.b"), Tensor::zeros(vec![w]));
        return;
    }
    if cfg.variant.uses_fixed() {
        // near-uniform in-band averaging at init, zero outside the band
        let base = 1.0 / (2 * cfg.delta + 1) as f64;
        let mut data = vec![S::zero(); t * t];
        for m in 0..t {
            for n in m.saturating_sub(cfg.delta)..=(m + cfg.delta).min(t - 1) {
                data[m * t + n] = S::from_f64(base + rng.gen_range(-0.01..0.01));
            }
        }
        ps.add(format!("{p}.aa"), Tensor::new(vec![t, t], data).expect("aa shape"));
    }
    if cfg.variant.uses_dynamic() {
        ps.add(format!("{p}.theta"), Tensor::xavier(vec![w], w, rng));
    }
    ps.add(format!("{p}.w"), Tensor::xavier(vec![w, w], w, rng));
}

pub struct GcnOut {
    pub features: Var,
    /// Content-dependent adjacency, when the variant has one.
    pub a_d: Option<Var>,
    /// The combined masked adjacency actually applied, when the variant is
    /// graph-based.
    pub a_hat: Option<Var>,
}

/// Graph convolution `relu(A_hat (x W)) + x` where
/// `A_hat = (A_a + A_d) ⊙ M` (terms present per variant). The conv variant
/// replaces the graph aggregation with a temporal convolution under the
/// same relu-then-residual wrapper.
pub fn forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    cfg: &GcnConfig,
    x: Var,
) -> Result<GcnOut> {
    let t = tape.shape(x)[0];
    cfg.validate(t)?;
    if let LocalVariant::Conv = cfg.variant {
        let y = tape.conv1d(
            x,
            bp.var(&format!("{p}.conv.w")),
            Some(bp.var(&format!("{p}.conv.b"))),
            1,
        )?;
        let features = tape.add(tape.relu(y), x)?;
        return Ok(GcnOut {
            features,
            a_d: None,
            a_hat: None,
        });
    }
    let band = build_band_mask::<S>(t, cfg.delta);
    let a_d = if cfg.variant.uses_dynamic() {
        let scores = tape.pairwise_absdiff_project(x, bp.var(&format!("{p}.theta")))?;
        let scores = tape.relu(scores);
        Some(tape.softmax_lastdim(scores, Some(&band_mask_additive(&band)))?)
    } else {
        None
    };
    let combined = match (cfg.variant.uses_fixed(), a_d) {
        (true, Some(ad)) => tape.add(bp.var(&format!("{p}.aa")), ad)?,
        (true, None) => bp.var(&format!("{p}.aa")),
        (false, Some(ad)) => ad,
        (false, None) => unreachable!("graph variant with no adjacency"),
    };
    let mask = tape.constant(band);
    let a_hat = tape.mul(combined, mask)?;
    let projected = tape.matmul(x, bp.var(&format!("{p}.w")))?;
    let aggregated = tape.matmul(a_hat, projected)?;
    let features = tape.add(tape.relu(aggregated), x)?;
    Ok(GcnOut {
        features,
        a_d,
        a_hat: Some(a_hat),
    })
}
