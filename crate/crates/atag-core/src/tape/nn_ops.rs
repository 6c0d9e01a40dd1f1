//! Neural-network operations: stable softmax, layer norm, temporal and 2-D
//! convolution, pooling, dropout, the pairwise feature-difference projection
//! used by the adaptive graph branch, the sparse boundary-matching sampler
//! and the fused loss kernels.

use std::rc::Rc;

use rand::Rng;

use super::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Precomputed sparse row-sampling matrix: each output row is a fixed linear
/// combination of input rows. Used by the boundary-matching sampler so the
/// whole sampling step stays differentiable through one sparse product.
#[derive(Debug, Clone)]
pub struct SampleMatrix<S: Scalar> {
    /// Per output row: (input row index, weight) pairs.
    pub rows: Vec<Vec<(usize, S)>>,
    /// Number of input rows the matrix applies to.
    pub in_rows: usize,
}

impl<S: Scalar> Tape<S> {
    /// Numerically stable softmax over the last dimension, with an optional
    /// additive mask whose entries are `0` or `-inf`.
    ///
    /// Rows whose unmasked set is empty become all-zero and a warning is
    /// recorded on the tape.
    pub fn softmax_lastdim(&self, x: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let last = *shape.last().ok_or_else(|| CoreError::config("softmax on 0-d tensor"))?;
        if let Some(m) = mask {
            if m.shape() != vx.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "softmax_lastdim",
                    lhs: shape,
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let nrows = vx.numel() / last;
        let mut out = vec![S::zero(); vx.numel()];
        let neg_inf = S::neg_infinity();
        for r in 0..nrows {
            let base = r * last;
            let row = &vx.data()[base..base + last];
            let masked = |j: usize| -> bool {
                mask.map_or(false, |m| m.data()[base + j] == neg_inf)
            };
            let mut maxv = S::neg_infinity();
            let mut unmasked = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if !masked(j) {
                    unmasked += 1;
                    if v > maxv {
                        maxv = v;
                    }
                }
            }
            if unmasked == 0 {
                self.warn(format!("softmax_lastdim: fully masked row {r}, emitting zeros"));
                continue;
            }
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if !masked(j) {
                    let e = (v - maxv).exp();
                    out[base + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..last {
                if !masked(j) {
                    out[base + j] = out[base + j] / denom;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rgx = self.requires_grad(x);
        let cy = Rc::new(out.clone());
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                let gx = store.entry(x.id);
                for r in 0..nrows {
                    let base = r * last;
                    let y = &cy.data()[base..base + last];
                    let go = &g[base..base + last];
                    let mut dot = S::zero();
                    for j in 0..last {
                        dot = dot + go[j] * y[j];
                    }
                    for j in 0..last {
                        gx[base + j] = gx[base + j] + y[j] * (go[j] - dot);
                    }
                }
            })),
        ))
    }

    /// Per-row layer normalization over the channel (last) dimension of a
    /// 2-D tensor, with affine parameters `gamma` and `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        if c < 2 {
            return Err(CoreError::config("layer_norm requires at least 2 channels"));
        }
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: vg.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let eps = S::from_f64(1e-5);
        let invc = S::from_f64(1.0 / c as f64);
        let mut out = vec![S::zero(); r * c];
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * invc;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * invc;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let (rgx, rgg, rgb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let cg = Rc::clone(&vg);
        Ok(self.push(
            out,
            rgx || rgg || rgb,
            Some(Box::new(move |g, store| {
                if rgg {
                    let gg = store.entry(gamma.id);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if rgb {
                    let gb = store.entry(beta.id);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                }
                if rgx {
                    let gx = store.entry(x.id);
                    for i in 0..r {
                        let mut mean_gy = S::zero();
                        let mut mean_gy_xh = S::zero();
                        for j in 0..c {
                            let gy = g[i * c + j] * cg.data()[j];
                            mean_gy = mean_gy + gy;
                            mean_gy_xh = mean_gy_xh + gy * xhat[i * c + j];
                        }
                        mean_gy = mean_gy * invc;
                        mean_gy_xh = mean_gy_xh * invc;
                        for j in 0..c {
                            let gy = g[i * c + j] * cg.data()[j];
                            let xh = xhat[i * c + j];
                            gx[i * c + j] =
                                gx[i * c + j] + inv_std[i] * (gy - mean_gy - xh * mean_gy_xh);
                        }
                    }
                }
            })),
        ))
    }

    /// Grouped temporal convolution with "same" zero padding.
    ///
    /// Layout is channels-last: `x: (T, C_in)`, `w: (C_out, C_in/groups, k)`,
    /// optional bias `(C_out)`; output `(T, C_out)`. `k` must be odd.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 2 || vw.shape().len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "conv1d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (t, cin) = (vx.rows(), vx.cols());
        let (cout, cin_g, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(CoreError::config(format!(
                "conv1d: channels (in {cin}, out {cout}) not divisible by groups {groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(CoreError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![cin, groups],
                rhs: vec![cin_g],
            });
        }
        if k % 2 == 0 {
            return Err(CoreError::config(format!("conv1d: kernel size {k} must be odd")));
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            if vb.shape() != [cout] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vb.shape().to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let half = (k / 2) as isize;
        let cout_g = cout / groups;
        let mut out = vec![S::zero(); t * cout];
        for co in 0..cout {
            let gi = co / cout_g;
            let ci0 = gi * cin_g;
            for tt in 0..t {
                let mut acc = S::zero();
                for dk in 0..k {
                    let ti = tt as isize + dk as isize - half;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    for cig in 0..cin_g {
                        acc = acc
                            + vx.data()[ti * cin + ci0 + cig]
                                * vw.data()[(co * cin_g + cig) * k + dk];
                    }
                }
                out[tt * cout + co] = acc;
            }
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            for tt in 0..t {
                for co in 0..cout {
                    out[tt * cout + co] = out[tt * cout + co] + vb.data()[co];
                }
            }
        }
        let out = Tensor::new(vec![t, cout], out)?;
        let rgx = self.requires_grad(x);
        let rgw = self.requires_grad(w);
        let rgb = bias.map_or(false, |b| self.requires_grad(b));
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        Ok(self.push(
            out,
            rgx || rgw || rgb,
            Some(Box::new(move |g, store| {
                if rgx {
                    let gx = store.entry(x.id);
                    for co in 0..cout {
                        let gi = co / cout_g;
                        let ci0 = gi * cin_g;
                        for tt in 0..t {
                            let go = g[tt * cout + co];
                            if go == S::zero() {
                                continue;
                            }
                            for dk in 0..k {
                                let ti = tt as isize + dk as isize - half;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                let ti = ti as usize;
                                for cig in 0..cin_g {
                                    gx[ti * cin + ci0 + cig] = gx[ti * cin + ci0 + cig]
                                        + go * cw.data()[(co * cin_g + cig) * k + dk];
                                }
                            }
                        }
                    }
                }
                if rgw {
                    let gw = store.entry(w.id);
                    for co in 0..cout {
                        let gi = co / cout_g;
                        let ci0 = gi * cin_g;
                        for tt in 0..t {
                            let go = g[tt * cout + co];
                            if go == S::zero() {
                                continue;
                            }
                            for dk in 0..k {
                                let ti = tt as isize + dk as isize - half;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                let ti = ti as usize;
                                for cig in 0..cin_g {
                                    gw[(co * cin_g + cig) * k + dk] = gw
                                        [(co * cin_g + cig) * k + dk]
                                        + go * cx.data()[ti * cin + ci0 + cig];
                                }
                            }
                        }
                    }
                }
                if rgb {
                    if let Some(b) = bias {
                        let gb = store.entry(b.id);
                        for tt in 0..t {
                            for co in 0..cout {
                                gb[co] = gb[co] + g[tt * cout + co];
                            }
                        }
                    }
                }
            })),
        ))
    }

    /// 2-D convolution with "same" zero padding on a `(C_in, H, W)` tensor.
    /// `w: (C_out, C_in, kh, kw)`, odd kernel extents, optional bias.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 3 || vw.shape().len() != 4 || vw.shape()[1] != vx.shape()[0] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CoreError::config("conv2d: kernel extents must be odd"));
        }
        let (hh, hw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![S::zero(); cout * h * wd];
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = S::zero();
                    for ci in 0..cin {
                        for di in 0..kh {
                            let ii = i as isize + di as isize - hh;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = j as isize + dj as isize - hw;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + vx.data()[(ci * h + ii as usize) * wd + jj as usize]
                                        * vw.data()[((co * cin + ci) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out[(co * h + i) * wd + j] = acc;
                }
            }
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            if vb.shape() != [cout] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vb.shape().to_vec(),
                    rhs: vec![cout],
                });
            }
            for co in 0..cout {
                for p in 0..h * wd {
                    out[co * h * wd + p] = out[co * h * wd + p] + vb.data()[co];
                }
            }
        }
        let out = Tensor::new(vec![cout, h, wd], out)?;
        let rgx = self.requires_grad(x);
        let rgw = self.requires_grad(w);
        let rgb = bias.map_or(false, |b| self.requires_grad(b));
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        Ok(self.push(
            out,
            rgx || rgw || rgb,
            Some(Box::new(move |g, store| {
                if rgx {
                    let gx = store.entry(x.id);
                    for co in 0..cout {
                        for i in 0..h {
                            for j in 0..wd {
                                let go = g[(co * h + i) * wd + j];
                                if go == S::zero() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for di in 0..kh {
                                        let ii = i as isize + di as isize - hh;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        for dj in 0..kw {
                                            let jj = j as isize + dj as isize - hw;
                                            if jj < 0 || jj >= wd as isize {
                                                continue;
                                            }
                                            let xi = (ci * h + ii as usize) * wd + jj as usize;
                                            gx[xi] = gx[xi]
                                                + go * cw.data()
                                                    [((co * cin + ci) * kh + di) * kw + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rgw {
                    let gw = store.entry(w.id);
                    for co in 0..cout {
                        for i in 0..h {
                            for j in 0..wd {
                                let go = g[(co * h + i) * wd + j];
                                if go == S::zero() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for di in 0..kh {
                                        let ii = i as isize + di as isize - hh;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        for dj in 0..kw {
                                            let jj = j as isize + dj as isize - hw;
                                            if jj < 0 || jj >= wd as isize {
                                                continue;
                                            }
                                            let wi = ((co * cin + ci) * kh + di) * kw + dj;
                                            gw[wi] = gw[wi]
                                                + go * cx.data()
                                                    [(ci * h + ii as usize) * wd + jj as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rgb {
                    if let Some(b) = bias {
                        let gb = store.entry(b.id);
                        for co in 0..cout {
                            for p in 0..h * wd {
                                gb[co] = gb[co] + g[co * h * wd + p];
                            }
                        }
                    }
                }
            })),
        ))
    }

    /// Temporal average pooling with window `k` (odd), stride 1, zero padding
    /// and a constant divisor `k` (edge windows average in the padding).
    pub fn avg_pool1d(&self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "avg_pool1d",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        if k % 2 == 0 {
            return Err(CoreError::config("avg_pool1d: window must be odd"));
        }
        let (t, c) = (vx.rows(), vx.cols());
        let half = (k / 2) as isize;
        let inv = S::from_f64(1.0 / k as f64);
        let mut out = vec![S::zero(); t * c];
        for tt in 0..t {
            for dk in 0..k {
                let ti = tt as isize + dk as isize - half;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let ti = ti as usize;
                for j in 0..c {
                    out[tt * c + j] = out[tt * c + j] + vx.data()[ti * c + j] * inv;
                }
            }
        }
        let out = Tensor::new(vec![t, c], out)?;
        let rgx = self.requires_grad(x);
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                let gx = store.entry(x.id);
                for tt in 0..t {
                    for dk in 0..k {
                        let ti = tt as isize + dk as isize - half;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for j in 0..c {
                            gx[ti * c + j] = gx[ti * c + j] + g[tt * c + j] * inv;
                        }
                    }
                }
            })),
        ))
    }

    /// Inverted dropout: keep with probability `1-rate`, scale kept entries
    /// by `1/(1-rate)`. Call only in training mode.
    pub fn dropout<R: Rng>(&self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask_data: Vec<S> = (0..vx.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::new(vx.shape().to_vec(), mask_data)?;
        self.mul_const(x, &mask)
    }

    /// Banded pairwise projection `y[m,n] = sum_c theta[c] * |x[m,c] - x[n,c]|`
    /// over a 2-D `(T, C)` input, producing a `(T, T)` logit matrix.
    pub fn pairwise_absdiff_project(&self, x: Var, theta: Var) -> Result<Var> {
        let (vx, vt) = (self.value(x), self.value(theta));
        if vx.shape().len() != 2 || vt.shape() != [vx.cols()] {
            return Err(CoreError::ShapeMismatch {
                op: "pairwise_absdiff_project",
                lhs: vx.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let (t, c) = (vx.rows(), vx.cols());
        let mut out = vec![S::zero(); t * t];
        for m in 0..t {
            for n in 0..t {
                let mut acc = S::zero();
                for j in 0..c {
                    acc = acc + vt.data()[j] * (vx.data()[m * c + j] - vx.data()[n * c + j]).abs();
                }
                out[m * t + n] = acc;
            }
        }
        let out = Tensor::new(vec![t, t], out)?;
        let (rgx, rgt) = (self.requires_grad(x), self.requires_grad(theta));
        let (cx, ct) = (Rc::clone(&vx), Rc::clone(&vt));
        Ok(self.push(
            out,
            rgx || rgt,
            Some(Box::new(move |g, store| {
                if rgt {
                    let gt = store.entry(theta.id);
                    for m in 0..t {
                        for n in 0..t {
                            let go = g[m * t + n];
                            if go == S::zero() {
                                continue;
                            }
                            for j in 0..c {
                                gt[j] = gt[j]
                                    + go * (cx.data()[m * c + j] - cx.data()[n * c + j]).abs();
                            }
                        }
                    }
                }
                if rgx {
                    let gx = store.entry(x.id);
                    for m in 0..t {
                        for n in 0..t {
                            let go = g[m * t + n];
                            if go == S::zero() {
                                continue;
                            }
                            for j in 0..c {
                                let d = cx.data()[m * c + j] - cx.data()[n * c + j];
                                let s = if d > S::zero() {
                                    S::one()
                                } else if d < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                };
                                let step = go * ct.data()[j] * s;
                                gx[m * c + j] = gx[m * c + j] + step;
                                gx[n * c + j] = gx[n * c + j] - step;
                            }
                        }
                    }
                }
            })),
        ))
    }

    /// Apply a constant sparse sampling matrix to the rows of `x: (T, C)`,
    /// producing `(R, C)` where `R = sm.rows.len()`.
    pub fn sample_rows(&self, sm: &SampleMatrix<S>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || vx.rows() != sm.in_rows {
            return Err(CoreError::ShapeMismatch {
                op: "sample_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![sm.in_rows],
            });
        }
        let c = vx.cols();
        let r = sm.rows.len();
        let mut out = vec![S::zero(); r * c];
        for (ri, entries) in sm.rows.iter().enumerate() {
            for &(ti, w) in entries {
                for j in 0..c {
                    out[ri * c + j] = out[ri * c + j] + vx.data()[ti * c + j] * w;
                }
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rgx = self.requires_grad(x);
        let rows = Rc::new(sm.rows.clone());
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                let gx = store.entry(x.id);
                for (ri, entries) in rows.iter().enumerate() {
                    for &(ti, w) in entries {
                        for j in 0..c {
                            gx[ti * c + j] = gx[ti * c + j] + g[ri * c + j] * w;
                        }
                    }
                }
            })),
        ))
    }

    /// Weighted binary logistic regression loss over (optionally masked)
    /// entries, with `alpha+ = V/pos`, `alpha- = V/neg`, negated and
    /// normalized by the valid count `V` so it is a nonnegative loss.
    ///
    /// Degenerate label sets (no positives or no negatives) zero the
    /// corresponding alpha and record a warning.
    pub fn weighted_bl_loss(
        &self,
        p: Var,
        labels: &Tensor<S>,
        valid: Option<&Tensor<S>>,
    ) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != labels.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "weighted_bl_loss",
                lhs: vp.shape().to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        if let Some(v) = valid {
            if v.shape() != vp.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "weighted_bl_loss valid mask",
                    lhs: vp.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let n = vp.numel();
        let is_valid =
            |i: usize| -> bool { valid.map_or(true, |v| v.data()[i] != S::zero()) };
        let mut vcount = 0.0f64;
        let mut pos = 0.0f64;
        for i in 0..n {
            if is_valid(i) {
                vcount += 1.0;
                if labels.data()[i] != S::zero() {
                    pos += 1.0;
                }
            }
        }
        if vcount == 0.0 {
            return Err(CoreError::config("weighted_bl_loss: no valid entries"));
        }
        let neg = vcount - pos;
        let alpha_pos = if pos > 0.0 {
            vcount / pos
        } else {
            self.warn("weighted_bl_loss: no positive labels, alpha+ set to 0".to_string());
            0.0
        };
        let alpha_neg = if neg > 0.0 {
            vcount / neg
        } else {
            self.warn("weighted_bl_loss: no negative labels, alpha- set to 0".to_string());
            0.0
        };
        let (ap, an) = (S::from_f64(alpha_pos), S::from_f64(alpha_neg));
        let eps = S::from_f64(1e-7);
        let hi = S::one() - eps;
        let invv = S::from_f64(1.0 / vcount);
        let mut total = S::zero();
        for i in 0..n {
            if !is_valid(i) {
                continue;
            }
            let pc = vp.data()[i].max(eps).min(hi);
            let g = labels.data()[i];
            total = total + ap * g * pc.ln() + an * (S::one() - g) * (S::one() - pc).ln();
        }
        let loss = -(total * invv);
        let rgp = self.requires_grad(p);
        let cp = Rc::clone(&vp);
        let labels_c = Rc::new(labels.clone());
        let valid_c = valid.map(|v| Rc::new(v.clone()));
        Ok(self.push(
            Tensor::scalar(loss),
            rgp,
            Some(Box::new(move |g, store| {
                let go = g[0];
                let gp = store.entry(p.id);
                for i in 0..n {
                    if let Some(v) = &valid_c {
                        if v.data()[i] == S::zero() {
                            continue;
                        }
                    }
                    let praw = cp.data()[i];
                    if praw < eps || praw > hi {
                        continue; // clamped region has zero slope
                    }
                    let lab = labels_c.data()[i];
                    let d = ap * lab / praw - an * (S::one() - lab) / (S::one() - praw);
                    gp[i] = gp[i] - go * invv * d;
                }
            })),
        ))
    }

    /// Mean squared error between `pred` and a constant target over the
    /// (optionally masked) entries.
    pub fn mse_loss(
        &self,
        pred: Var,
        target: &Tensor<S>,
        valid: Option<&Tensor<S>>,
    ) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mse_loss",
                lhs: vp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = vp.numel();
        let is_valid =
            |i: usize| -> bool { valid.map_or(true, |v| v.data()[i] != S::zero()) };
        let vcount = (0..n).filter(|&i| is_valid(i)).count();
        if vcount == 0 {
            return Err(CoreError::config("mse_loss: no valid entries"));
        }
        let invv = S::from_f64(1.0 / vcount as f64);
        let mut total = S::zero();
        for i in 0..n {
            if is_valid(i) {
                let d = vp.data()[i] - target.data()[i];
                total = total + d * d;
            }
        }
        let rgp = self.requires_grad(pred);
        let cp = Rc::clone(&vp);
        let target_c = Rc::new(target.clone());
        let valid_c = valid.map(|v| Rc::new(v.clone()));
        let two = S::from_f64(2.0);
        Ok(self.push(
            Tensor::scalar(total * invv),
            rgp,
            Some(Box::new(move |g, store| {
                let go = g[0];
                let gp = store.entry(pred.id);
                for i in 0..n {
                    if let Some(v) = &valid_c {
                        if v.data()[i] == S::zero() {
                            continue;
                        }
                    }
                    gp[i] = gp[i] + go * two * invv * (cp.data()[i] - target_c.data()[i]);
                }
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn softmax_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]));
        // pad rows to equal length for the test tensor
        let x2 = tape.constant(Tensor::from_slice_f64(vec![1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax_lastdim(x, None).unwrap();
        let v = tape.value(y);
        assert!((v.at2(0, 0) - 0.5).abs() < 1e-12);
        let y2 = tape.softmax_lastdim(x2, None).unwrap();
        let v2 = tape.value(y2);
        for (got, want) in v2.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_full_mask_column() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![1, 2], &[3.0, 100.0]));
        let mask = Tensor::from_slice_f64(vec![1, 2], &[0.0, f64::NEG_INFINITY]);
        let y = tape.softmax_lastdim(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_is_zero_with_warning() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![1, 2], &[3.0, 4.0]));
        let mask = Tensor::full(vec![1, 2], f64::NEG_INFINITY);
        let y = tape.softmax_lastdim(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        assert_eq!(tape.warnings().len(), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![8, 5], &data));
        let y = tape.softmax_lastdim(x, None).unwrap();
        let v = tape.value(y);
        for r in 0..8 {
            let s: f64 = (0..5).map(|j| v.at2(r, j)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..5).all(|j| (0.0..=1.0).contains(&v.at2(r, j))));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 4], 3.7));
        let gamma = tape.constant(Tensor::full(vec![4], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-2));
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![1, 6], &row));
        let gamma = tape.constant(Tensor::full(vec![6], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![6]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        let v = tape.value(y);
        // two-pass mean/variance oracle
        let mean: f64 = row.iter().sum::<f64>() / 6.0;
        let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        for (j, &r) in row.iter().enumerate() {
            let want = (r - mean) / (var + 1e-5).sqrt();
            assert!((v.data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_gamma_zero_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0]]));
        let gamma = tape.constant(Tensor::zeros(vec![3]));
        let beta = tape.constant(Tensor::full(vec![3], 0.25));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn conv1d_hand_example() {
        // x=[1,2,3,4], kernel [1/3,1/3,1/3] -> [1, 2, 3, 7/3] with zero padding
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::from_slice_f64(
            vec![1, 1, 3],
            &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ));
        let y = tape.conv1d(x, w, None, 1).unwrap();
        let v = tape.value(y);
        for (got, want) in v.data().iter().zip([1.0, 2.0, 3.0, 7.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![5, 1], &[1.0, -2.0, 3.0, 0.5, 4.0]));
        let w = tape.constant(Tensor::from_slice_f64(vec![1, 1, 3], &[0.0, 1.0, 0.0]));
        let zero_w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        let y = tape.conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let z = tape.conv1d(x, zero_w, None, 1).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_group_divisibility_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![4, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 1, 3]));
        assert!(matches!(
            tape.conv1d(x, w, None, 2),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn avg_pool_hand_example() {
        // 3-wide pool on [0,0,3,0,0] -> [0,1,1,1,0]
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_slice_f64(vec![5, 1], &[0.0, 0.0, 3.0, 0.0, 0.0]));
        let y = tape.avg_pool1d(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn bl_loss_half_is_two_ln_two() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(vec![8], 0.5));
        let labels = Tensor::from_slice_f64(vec![8], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let l = tape.weighted_bl_loss(p, &labels, None).unwrap();
        let got = tape.value(l).data()[0];
        assert!((got - 2.0 * (2.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn bl_loss_perfect_prediction_near_zero() {
        let tape = Tape::<f64>::new();
        let labels = Tensor::from_slice_f64(vec![4], &[1.0, 0.0, 1.0, 0.0]);
        let p = tape.constant(labels.clone());
        let l = tape.weighted_bl_loss(p, &labels, None).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-5);
    }

    #[test]
    fn bl_loss_degenerate_labels_warns() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(vec![4], 0.5));
        let labels = Tensor::full(vec![4], 1.0);
        let l = tape.weighted_bl_loss(p, &labels, None).unwrap();
        assert!(tape.value(l).data()[0].is_finite());
        assert_eq!(tape.warnings().len(), 1);
    }

    #[test]
    fn bl_loss_invariant_to_length_with_same_ratio() {
        let tape = Tape::<f64>::new();
        let short_l = Tensor::from_slice_f64(vec![4], &[1.0, 0.0, 1.0, 0.0]);
        let long_l =
            Tensor::from_slice_f64(vec![8], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let ps = tape.constant(Tensor::from_slice_f64(vec![4], &[0.7, 0.2, 0.7, 0.2]));
        let pl = tape.constant(Tensor::from_slice_f64(
            vec![8],
            &[0.7, 0.2, 0.7, 0.2, 0.7, 0.2, 0.7, 0.2],
        ));
        let a = tape.weighted_bl_loss(ps, &short_l, None).unwrap();
        let b = tape.weighted_bl_loss(pl, &long_l, None).unwrap();
        assert!((tape.value(a).data()[0] - tape.value(b).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn sample_rows_applies_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 30.0]]));
        let sm = SampleMatrix {
            rows: vec![vec![(0, 0.5), (1, 0.5)]],
            in_rows: 2,
        };
        let y = tape.sample_rows(&sm, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 20.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
