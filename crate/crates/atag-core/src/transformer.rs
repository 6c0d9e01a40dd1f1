//! The augmented transformer (global) branch: front block, sine positional
//! encoding on queries/keys, multi-head self-attention, FFN and the
//! snippet actionness predictor.

use rand::RngCore;

use crate::error::{CoreError, Result};
use crate::heads::{predictor_1d_forward, register_predictor_1d};
use crate::model::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    /// Branch width `C_g`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    /// Large kernel of the depthwise-separable front-block convolution.
    pub front_kernel: usize,
    pub dropout: f64,
    pub use_front_block: bool,
    pub use_pos_encoding: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.width;
        if self.heads == 0 || w % self.heads != 0 {
            return Err(CoreError::config(format!(
                "head count {} must divide width {w}",
                self.heads
            )));
        }
        if w % 2 != 0 {
            return Err(CoreError::config("transformer width must be even"));
        }
        if w % 4 != 0 {
            return Err(CoreError::config(
                "transformer width must be divisible by 4 (actionness grouped conv)",
            ));
        }
        if self.front_kernel % 2 == 0 {
            return Err(CoreError::config("front kernel must be odd"));
        }
        if self.layers == 0 {
            return Err(CoreError::config("at least one transformer layer required"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Standard alternating sin/cos positional encoding, `pos / 10000^(2i/width)`.
pub fn sine_pos_encoding<S: Scalar>(t: usize, width: usize) -> Result<Tensor<S>> {
    if width % 2 != 0 {
        return Err(CoreError::config(format!(
            "positional encoding width {width} must be even"
        )));
    }
    let mut out = Vec::with_capacity(t * width);
    for pos in 0..t {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            out.push(S::from_f64(angle.sin()));
            out.push(S::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![t, width], out)
}

fn ln_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.g"), format!("{prefix}.b"))
}

fn register_ln<S: Scalar>(ps: &mut ParamSet<S>, prefix: &str, width: usize) {
    let (g, b) = ln_names(prefix);
    ps.add(g, Tensor::full(vec![width], S::one()));
    ps.add(b, Tensor::zeros(vec![width]));
}

fn apply_ln<S: Scalar>(tape: &Tape<S>, bp: &BoundParams<S>, prefix: &str, x: Var) -> Result<Var> {
    let (g, b) = ln_names(prefix);
    tape.layer_norm(x, bp.var(&g), bp.var(&b))
}

pub fn register_params<S: Scalar>(
    ps: &mut ParamSet<S>,
    p: &str,
    cfg: &TransformerConfig,
    rng: &mut impl RngCore,
) {
    let w = cfg.width;
    if cfg.use_front_block {
        for side in ["w1", "w2"] {
            ps.add(format!("{p}.glu.{side}"), Tensor::xavier(vec![w, w], w, rng));
        }
        ps.add(format!("{p}.glu.b1"), Tensor::zeros(vec![w]));
        ps.add(format!("{p}.glu.b2"), Tensor::zeros(vec![w]));
        register_ln(ps, &format!("{p}.ln1"), w);
        ps.add(format!("{p}.c1x1.w"), Tensor::xavier(vec![w, w, 1], w, rng));
        ps.add(format!("{p}.c1x1.b"), Tensor::zeros(vec![w]));
        register_ln(ps, &format!("{p}.ln2"), w);
        ps.add(
            format!("{p}.dw.w"),
            Tensor::xavier(vec![w, 1, cfg.front_kernel], cfg.front_kernel, rng),
        );
        ps.add(format!("{p}.dw.b"), Tensor::zeros(vec![w]));
        ps.add(format!("{p}.pw.w"), Tensor::xavier(vec![w, w, 1], w, rng));
        ps.add(format!("{p}.pw.b"), Tensor::zeros(vec![w]));
        register_ln(ps, &format!("{p}.ln3"), w);
    }
    let d = cfg.head_dim();
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for proj in ["q", "k", "v"] {
                ps.add(
                    format!("{p}.a{l}.h{h}.{proj}"),
                    Tensor::xavier(vec![w, d], w, rng),
                );
            }
        }
        ps.add(format!("{p}.a{l}.out.w"), Tensor::xavier(vec![w, w], w, rng));
        ps.add(format!("{p}.a{l}.out.b"), Tensor::zeros(vec![w]));
        register_ln(ps, &format!("{p}.a{l}.ln"), w);

        let we = w * cfg.ffn_expansion;
        ps.add(format!("{p}.f{l}.w1"), Tensor::xavier(vec![w, we], w, rng));
        ps.add(format!("{p}.f{l}.b1"), Tensor::zeros(vec![we]));
        ps.add(format!("{p}.f{l}.w2"), Tensor::xavier(vec![we, w], we, rng));
        ps.add(format!("{p}.f{l}.b2"), Tensor::zeros(vec![w]));
        if cfg.ffn_expansion != 1 {
            ps.add(format!("{p}.f{l}.p1"), Tensor::xavier(vec![w, we], w, rng));
            ps.add(format!("{p}.f{l}.p2"), Tensor::xavier(vec![we, w], we, rng));
        }
        register_ln(ps, &format!("{p}.f{l}.ln1"), we);
        register_ln(ps, &format!("{p}.f{l}.ln2"), w);
    }
    register_predictor_1d(ps, &format!("{p}.act"), w, w, 1, rng);
}

pub(crate) fn maybe_dropout<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut (dyn RngCore + '_)>,
) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, r),
        _ => Ok(x),
    }
}

/// GLU / pooled-conv / depthwise-separable front block; each part wrapped
/// as `layer_norm(part(x) + x)`. Shape-preserving.
pub fn front_block_forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    cfg: &TransformerConfig,
    x: Var,
) -> Result<Var> {
    // part 1: gated linear unit
    let lin = tape.add_bias(tape.matmul(x, bp.var(&format!("{p}.glu.w1")))?, bp.var(&format!("{p}.glu.b1")))?;
    let gate = tape.sigmoid(tape.add_bias(
        tape.matmul(x, bp.var(&format!("{p}.glu.w2")))?,
        bp.var(&format!("{p}.glu.b2")),
    )?);
    let glu = tape.mul(lin, gate)?;
    let p1 = apply_ln(tape, bp, &format!("{p}.ln1"), tape.add(glu, x)?)?;
    // part 2: parallel 1x1 conv and 3-wide average pool, merged by sum
    let conv = tape.conv1d(
        p1,
        bp.var(&format!("{p}.c1x1.w")),
        Some(bp.var(&format!("{p}.c1x1.b"))),
        1,
    )?;
    let pooled = tape.avg_pool1d(p1, 3)?;
    let merged = tape.add(conv, pooled)?;
    let p2 = apply_ln(tape, bp, &format!("{p}.ln2"), tape.add(merged, p1)?)?;
    // part 3: depthwise-separable large-kernel conv
    let dw = tape.conv1d(
        p2,
        bp.var(&format!("{p}.dw.w")),
        Some(bp.var(&format!("{p}.dw.b"))),
        cfg.width,
    )?;
    let pw = tape.conv1d(
        dw,
        bp.var(&format!("{p}.pw.w")),
        Some(bp.var(&format!("{p}.pw.b"))),
        1,
    )?;
    apply_ln(tape, bp, &format!("{p}.ln3"), tape.add(pw, p2)?)
}

/// One multi-head self-attention sublayer (post-norm). Returns the output
/// and the per-head attention maps.
pub fn attention_forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    cfg: &TransformerConfig,
    layer: usize,
    x: Var,
    pos: Option<&Tensor<S>>,
    rng: &mut Option<&mut (dyn RngCore + '_)>,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.head_dim();
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    // positional encoding enters queries and keys only, not values
    let xqk = match pos {
        Some(pe) => tape.add_const(x, pe)?,
        None => x,
    };
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tape.matmul(xqk, bp.var(&format!("{p}.a{layer}.h{h}.q")))?;
        let k = tape.matmul(xqk, bp.var(&format!("{p}.a{layer}.h{h}.k")))?;
        let v = tape.matmul(x, bp.var(&format!("{p}.a{layer}.h{h}.v")))?;
        let logits = tape.scale(tape.matmul(q, tape.transpose(k)?)?, inv_sqrt_d);
        let attn = tape.softmax_lastdim(logits, None)?;
        maps.push(attn);
        let attn_d = maybe_dropout(tape, attn, cfg.dropout, rng)?;
        heads.push(tape.matmul(attn_d, v)?);
    }
    let mut cat = heads[0];
    for &hvar in &heads[1..] {
        cat = tape.concat_cols(cat, hvar)?;
    }
    let out = tape.add_bias(
        tape.matmul(cat, bp.var(&format!("{p}.a{layer}.out.w")))?,
        bp.var(&format!("{p}.a{layer}.out.b")),
    )?;
    let out = maybe_dropout(tape, out, cfg.dropout, rng)?;
    let y = apply_ln(tape, bp, &format!("{p}.a{layer}.ln"), tape.add(x, out)?)?;
    Ok((y, maps))
}

/// Two-layer FFN with a residual connection and layer norm after each
/// layer. When the hidden width differs from the input width the residual
/// goes through a learned projection.
pub fn ffn_forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    cfg: &TransformerConfig,
    layer: usize,
    x: Var,
    rng: &mut Option<&mut (dyn RngCore + '_)>,
) -> Result<Var> {
    let h1 = tape.relu(tape.add_bias(
        tape.matmul(x, bp.var(&format!("{p}.f{layer}.w1")))?,
        bp.var(&format!("{p}.f{layer}.b1")),
    )?);
    let h1 = maybe_dropout(tape, h1, cfg.dropout, rng)?;
    let r1 = if cfg.ffn_expansion == 1 {
        x
    } else {
        tape.matmul(x, bp.var(&format!("{p}.f{layer}.p1")))?
    };
    let z = apply_ln(tape, bp, &format!("{p}.f{layer}.ln1"), tape.add(h1, r1)?)?;
    let h2 = tape.add_bias(
        tape.matmul(z, bp.var(&format!("{p}.f{layer}.w2")))?,
        bp.var(&format!("{p}.f{layer}.b2")),
    )?;
    let h2 = maybe_dropout(tape, h2, cfg.dropout, rng)?;
    let r2 = if cfg.ffn_expansion == 1 {
        z
    } else {
        tape.matmul(z, bp.var(&format!("{p}.f{layer}.p2")))?
    };
    apply_ln(tape, bp, &format!("{p}.f{layer}.ln2"), tape.add(h2, r2)?)
}

pub struct TransformerOut {
    pub features: Var,
    /// Snippet actionness probabilities, length `T`.
    pub actionness: Var,
    /// Per-head attention maps of the last layer, each `T x T`.
    pub attention: Vec<Var>,
}

/// Full branch: front block, transformer layer stack, actionness head.
pub fn forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    cfg: &TransformerConfig,
    x: Var,
    mut rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<TransformerOut> {
    cfg.validate()?;
    let t = tape.shape(x)[0];
    let mut h = if cfg.use_front_block {
        front_block_forward(tape, bp, p, cfg, x)?
    } else {
        x
    };
    let pos = if cfg.use_pos_encoding {
        Some(sine_pos_encoding::<S>(t, cfg.width)?)
    } else {
        None
    };
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let (y, maps) = attention_forward(tape, bp, p, cfg, l, h, pos.as_ref(), &mut rng)?;
        attention = maps;
        h = ffn_forward(tape, bp, p, cfg, l, y, &mut rng)?;
    }
    let actionness = predictor_1d_forward(tape, bp, &format!("{p}.act"), h, 0)?;
    Ok(TransformerOut {
        features: h,
        actionness,
        attention,
    })
}
