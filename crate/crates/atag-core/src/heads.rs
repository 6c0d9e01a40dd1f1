//! Output heads: global/local feature fusion, the boundary predictor and
//! the boundary-matching completeness head.

use rand::RngCore;

use crate::error::{CoreError, Result};
use crate::labels::valid_mask;
use crate::model::{BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{SampleMatrix, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Early fusion by channel concatenation (default).
    Concat,
    /// Early fusion by elementwise sum; requires equal branch widths.
    Sum,
    /// Heads run on each branch separately; their probabilities are
    /// averaged.
    Late,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Sum => "sum",
            FusionMode::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "sum" => Ok(FusionMode::Sum),
            "late" => Ok(FusionMode::Late),
            other => Err(CoreError::config(format!("unknown fusion mode '{other}'"))),
        }
    }

    /// Channel count the heads see, given the two branch widths.
    pub fn head_width(self, c_g: usize, c_l: usize) -> usize {
        match self {
            FusionMode::Concat => c_g + c_l,
            FusionMode::Sum | FusionMode::Late => c_g.max(c_l),
        }
    }
}

/// Early fusion of the branch outputs; `Late` is handled by the caller
/// (heads applied per branch) and is rejected here.
pub fn fuse_global_local<S: Scalar>(
    tape: &Tape<S>,
    global: Var,
    local: Var,
    mode: FusionMode,
) -> Result<Var> {
    match mode {
        FusionMode::Concat => tape.concat_cols(global, local),
        FusionMode::Sum => {
            let (sg, sl) = (tape.shape(global), tape.shape(local));
            if sg != sl {
                return Err(CoreError::config(format!(
                    "sum fusion needs equal branch widths, got {sg:?} and {sl:?}"
                )));
            }
            tape.add(global, local)
        }
        FusionMode::Late => Err(CoreError::config(
            "late fusion has no fused feature tensor; apply heads per branch",
        )),
    }
}

/// Shared two-layer 1-D predictor: grouped conv (k=3, groups=4) with ReLU,
/// then a 1x1 conv and sigmoid. Registers `cout` output channels.
pub fn register_predictor_1d<S: Scalar>(
    ps: &mut ParamSet<S>,
    p: &str,
    cin: usize,
    hidden: usize,
    cout: usize,
    rng: &mut impl RngCore,
) {
    ps.add(
        format!("{p}.c1.w"),
        Tensor::xavier(vec![hidden, cin / 4, 3], cin / 4 * 3, rng),
    );
    ps.add(format!("{p}.c1.b"), Tensor::zeros(vec![hidden]));
    ps.add(
        format!("{p}.c2.w"),
        Tensor::xavier(vec![cout, hidden, 1], hidden, rng),
    );
    ps.add(format!("{p}.c2.b"), Tensor::zeros(vec![cout]));
}

/// All `cout` probability channels of the shared predictor, shape `(T, cout)`.
pub fn predictor_1d_probs<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    x: Var,
) -> Result<Var> {
    let h = tape.relu(tape.conv1d(
        x,
        bp.var(&format!("{p}.c1.w")),
        Some(bp.var(&format!("{p}.c1.b"))),
        4,
    )?);
    let logits = tape.conv1d(
        h,
        bp.var(&format!("{p}.c2.w")),
        Some(bp.var(&format!("{p}.c2.b"))),
        1,
    )?;
    Ok(tape.sigmoid(logits))
}

/// One probability channel of the shared predictor, shape `(T)`.
pub fn predictor_1d_forward<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    x: Var,
    channel: usize,
) -> Result<Var> {
    tape.select_col(predictor_1d_probs(tape, bp, p, x)?, channel)
}

pub fn register_boundary_head<S: Scalar>(
    ps: &mut ParamSet<S>,
    p: &str,
    cin: usize,
    hidden: usize,
    rng: &mut impl RngCore,
) {
    register_predictor_1d(ps, p, cin, hidden, 2, rng);
}

/// Start/end probabilities, each length `T`.
pub fn boundary_head<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    fused: Var,
) -> Result<(Var, Var)> {
    let probs = predictor_1d_probs(tape, bp, p, fused)?;
    Ok((tape.select_col(probs, 0)?, tape.select_col(probs, 1)?))
}

/// Sparse boundary-matching sampling matrix. Output row `(di*T + j)*N + n`
/// holds the interpolation weights for the n-th of `N` uniform sample
/// points over the proposal `[j, j + di + 1]`; invalid cells get empty
/// (all-zero) rows. Positions are clamped to the last snippet.
pub fn build_sample_matrix<S: Scalar>(t: usize, d: usize, n: usize) -> Result<SampleMatrix<S>> {
    if d > t {
        return Err(CoreError::config(format!(
            "max duration {d} exceeds sequence length {t}"
        )));
    }
    if n == 0 {
        return Err(CoreError::config("sample count must be positive"));
    }
    let mut rows = Vec::with_capacity(d * t * n);
    for di in 0..d {
        let dur = (di + 1) as f64;
        for j in 0..t {
            let valid = j + di + 1 <= t;
            for k in 0..n {
                if !valid {
                    rows.push(Vec::new());
                    continue;
                }
                let frac = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                let pos = (j as f64 + dur * frac).min((t - 1) as f64);
                let lo = pos.floor() as usize;
                let w_hi = pos - lo as f64;
                if w_hi > 0.0 {
                    rows.push(vec![
                        (lo, S::from_f64(1.0 - w_hi)),
                        (lo + 1, S::from_f64(w_hi)),
                    ]);
                } else {
                    rows.push(vec![(lo, S::one())]);
                }
            }
        }
    }
    Ok(SampleMatrix { rows, in_rows: t })
}

pub fn register_completeness_head<S: Scalar>(
    ps: &mut ParamSet<S>,
    p: &str,
    cin: usize,
    n: usize,
    h3d: usize,
    h2d: usize,
    rng: &mut impl RngCore,
) {
    // ReLU layers get a small positive bias: invalid cells carry exactly
    // zero features, and a zero bias would park their pre-activations on
    // the ReLU kink, breaking finite-difference gradient checks.
    let b0 = S::from_f64(0.01);
    ps.add(
        format!("{p}.lin.w"),
        Tensor::xavier(vec![n * cin, h3d], n * cin, rng),
    );
    ps.add(format!("{p}.lin.b"), Tensor::full(vec![h3d], b0));
    ps.add(format!("{p}.c1.w"), Tensor::xavier(vec![h2d, h3d, 1, 1], h3d, rng));
    ps.add(format!("{p}.c1.b"), Tensor::full(vec![h2d], b0));
    for name in ["c2", "c3"] {
        ps.add(
            format!("{p}.{name}.w"),
            Tensor::xavier(vec![h2d, h2d, 3, 3], h2d * 9, rng),
        );
        ps.add(format!("{p}.{name}.b"), Tensor::full(vec![h2d], b0));
    }
    ps.add(format!("{p}.c4.w"), Tensor::xavier(vec![2, h2d, 1, 1], h2d, rng));
    ps.add(format!("{p}.c4.b"), Tensor::zeros(vec![2]));
}

/// Boundary-matching completeness head: sparse sampling, a per-cell linear
/// layer over the `N x C` sampled block, then a 2-D conv stack over the
/// duration/time map. Returns `(M_cc, M_cr)`, each `D x T`, with invalid
/// cells zeroed.
pub fn completeness_head<S: Scalar>(
    tape: &Tape<S>,
    bp: &BoundParams<S>,
    p: &str,
    fused: Var,
    sm: &SampleMatrix<S>,
    d: usize,
    n: usize,
) -> Result<(Var, Var)> {
    let t = tape.shape(fused)[0];
    let c = tape.shape(fused)[1];
    if sm.rows.len() != d * t * n {
        return Err(CoreError::config(format!(
            "sample matrix has {} rows, expected {}",
            sm.rows.len(),
            d * t * n
        )));
    }
    let sampled = tape.sample_rows(sm, fused)?; // (D*T*N, C)
    let per_cell = tape.reshape(sampled, vec![d * t, n * c])?;
    let z = tape.relu(tape.add_bias(
        tape.matmul(per_cell, bp.var(&format!("{p}.lin.w")))?,
        bp.var(&format!("{p}.lin.b")),
    )?);
    let h3d = tape.shape(z)[1];
    let maps = tape.reshape(tape.transpose(z)?, vec![h3d, d, t])?;
    let mut h = maps;
    for name in ["c1", "c2", "c3"] {
        h = tape.relu(tape.conv2d(
            h,
            bp.var(&format!("{p}.{name}.w")),
            Some(bp.var(&format!("{p}.{name}.b"))),
        )?);
    }
    let out = tape.sigmoid(tape.conv2d(
        h,
        bp.var(&format!("{p}.c4.w")),
        Some(bp.var(&format!("{p}.c4.b"))),
    )?);
    let mask = valid_mask::<S>(d, t);
    let cc = tape.mul_const(tape.select_channel(out, 0)?, &mask)?;
    let cr = tape.mul_const(tape.select_channel(out, 1)?, &mask)?;
    Ok((cc, cr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn concat_fusion_shapes() {
        let tape = Tape::new();
        let g = tape.constant(rand_tensor(vec![5, 2], 1));
        let l = tape.constant(rand_tensor(vec![5, 2], 2));
        let f = fuse_global_local(&tape, g, l, FusionMode::Concat).unwrap();
        assert_eq!(tape.shape(f), vec![5, 4]);
        // channel order is [global || local]
        let (vf, vg, vl) = (tape.value(f), tape.value(g), tape.value(l));
        for i in 0..5 {
            assert_eq!(vf.at2(i, 0), vg.at2(i, 0));
            assert_eq!(vf.at2(i, 3), vl.at2(i, 1));
        }
    }

    #[test]
    fn sum_fusion_identity_and_mismatch() {
        let tape = Tape::new();
        let g = tape.constant(rand_tensor(vec![5, 3], 3));
        let zero = tape.constant(Tensor::zeros(vec![5, 3]));
        let f = fuse_global_local(&tape, g, zero, FusionMode::Sum).unwrap();
        assert_eq!(tape.value(f).data(), tape.value(g).data());
        let narrow = tape.constant(Tensor::zeros(vec![5, 2]));
        assert!(fuse_global_local(&tape, g, narrow, FusionMode::Sum).is_err());
        assert!(fuse_global_local(&tape, g, zero, FusionMode::Late).is_err());
    }

    #[test]
    fn fusion_mode_round_trip() {
        for m in [FusionMode::Concat, FusionMode::Sum, FusionMode::Late] {
            assert_eq!(FusionMode::parse(m.name()).unwrap(), m);
        }
        assert!(FusionMode::parse("early").is_err());
    }

    #[test]
    fn boundary_zero_final_layer_gives_half() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        register_boundary_head(&mut ps, "bd", 8, 8, &mut rng);
        *ps.get_mut("bd.c2.w").unwrap() = Tensor::zeros(vec![2, 8, 1]);
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let fused = tape.constant(rand_tensor(vec![6, 8], 5));
        let (s, e) = boundary_head(&tape, &bp, "bd", fused).unwrap();
        assert_eq!(tape.shape(s), vec![6]);
        assert_eq!(tape.shape(e), vec![6]);
        for v in [s, e] {
            assert!(tape.value(v).data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn boundary_outputs_are_probabilities() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        register_boundary_head(&mut ps, "bd", 8, 8, &mut rng);
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let fused = tape.constant(rand_tensor(vec![7, 8], 7));
        let (s, e) = boundary_head(&tape, &bp, "bd", fused).unwrap();
        for v in [s, e] {
            assert!(tape.value(v).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn sample_matrix_endpoints() {
        // full-length proposal with two samples hits the first and last snippet
        let t = 10;
        let sm = build_sample_matrix::<f64>(t, t, 2).unwrap();
        let di = t - 1; // duration t, right edge clamped to the last snippet
        let row0 = &sm.rows[(di * t) * 2];
        let row1 = &sm.rows[(di * t) * 2 + 1];
        assert_eq!(row0, &vec![(0usize, 1.0)]);
        assert_eq!(row1, &vec![(t - 1, 1.0)]);
        // duration T-1 starting at 0 ends exactly at snippet T-1
        let sm2 = build_sample_matrix::<f64>(t, t - 1, 2).unwrap();
        let r = &sm2.rows[((t - 2) * t) * 2 + 1];
        assert_eq!(r, &vec![(t - 1, 1.0)]);
    }

    #[test]
    fn sample_matrix_rejects_bad_config() {
        assert!(build_sample_matrix::<f64>(5, 6, 4).is_err());
        assert!(build_sample_matrix::<f64>(5, 5, 0).is_err());
    }

    #[test]
    fn invalid_cells_have_empty_rows_and_weights_sum_to_one() {
        let (t, d, n) = (8, 6, 4);
        let sm = build_sample_matrix::<f64>(t, d, n).unwrap();
        assert_eq!(sm.rows.len(), d * t * n);
        for di in 0..d {
            for j in 0..t {
                for k in 0..n {
                    let row = &sm.rows[(di * t + j) * n + k];
                    if j + di + 1 <= t {
                        let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                        assert!((sum - 1.0).abs() < 1e-12);
                        assert!(row.iter().all(|&(idx, _)| idx < t));
                    } else {
                        assert!(row.is_empty());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_features_sample_to_constant() {
        let (t, d, n) = (9, 5, 4);
        let sm = build_sample_matrix::<f64>(t, d, n).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![t, 3], 2.5));
        let s = tape.sample_rows(&sm, x).unwrap();
        let v = tape.value(s);
        for di in 0..d {
            for j in 0..t {
                for k in 0..n {
                    let row = (di * t + j) * n + k;
                    let want = if j + di + 1 <= t { 2.5 } else { 0.0 };
                    for c in 0..3 {
                        assert_eq!(v.at2(row, c), want);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_features_match_closed_form() {
        // channel c at snippet i holds a_c*i + b_c; interpolation is exact
        let (t, d, n) = (12, 8, 5);
        let coeffs = [(0.7, -1.0), (-0.3, 2.0)];
        let mut data = Vec::new();
        for i in 0..t {
            for (a, b) in coeffs {
                data.push(a * i as f64 + b);
            }
        }
        let sm = build_sample_matrix::<f64>(t, d, n).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![t, 2], data).unwrap());
        let v = tape.value(tape.sample_rows(&sm, x).unwrap());
        for di in 0..d {
            let dur = (di + 1) as f64;
            for j in 0..t {
                if j + di + 1 > t {
                    continue;
                }
                for k in 0..n {
                    let pos = (j as f64 + dur * k as f64 / (n - 1) as f64).min((t - 1) as f64);
                    let row = (di * t + j) * n + k;
                    for (c, (a, b)) in coeffs.iter().enumerate() {
                        let want = a * pos + b;
                        assert!((v.at2(row, c) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    fn completeness_setup(
        t: usize,
        c: usize,
        d: usize,
        n: usize,
    ) -> (ParamSet<f64>, SampleMatrix<f64>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        register_completeness_head(&mut ps, "cm", c, n, 6, 4, &mut rng);
        let sm = build_sample_matrix::<f64>(t, d, n).unwrap();
        (ps, sm)
    }

    #[test]
    fn completeness_shapes_ranges_and_mask() {
        let (t, c, d, n) = (10, 4, 6, 4);
        let (ps, sm) = completeness_setup(t, c, d, n);
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let fused = tape.constant(rand_tensor(vec![t, c], 10));
        let (cc, cr) = completeness_head(&tape, &bp, "cm", fused, &sm, d, n).unwrap();
        for m in [cc, cr] {
            let v = tape.value(m);
            assert_eq!(v.shape(), &[d, t]);
            for di in 0..d {
                for j in 0..t {
                    let x = v.at2(di, j);
                    if j + di + 1 <= t {
                        assert!((0.0..=1.0).contains(&x));
                    } else {
                        assert_eq!(x, 0.0, "invalid cell ({di},{j}) must be exactly zero");
                    }
                }
            }
        }
    }

    #[test]
    fn completeness_zero_final_layer_gives_half_on_valid_cells() {
        let (t, c, d, n) = (8, 4, 5, 4);
        let (mut ps, sm) = completeness_setup(t, c, d, n);
        *ps.get_mut("cm.c4.w").unwrap() = Tensor::zeros(vec![2, 4, 1, 1]);
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let fused = tape.constant(rand_tensor(vec![t, c], 11));
        let (cc, cr) = completeness_head(&tape, &bp, "cm", fused, &sm, d, n).unwrap();
        for m in [cc, cr] {
            let v = tape.value(m);
            for di in 0..d {
                for j in 0..t {
                    let want = if j + di + 1 <= t { 0.5 } else { 0.0 };
                    assert!((v.at2(di, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bm_sampling_gradients_match_finite_differences() {
        // linearity check: gradient through the sparse sampler alone
        let (t, c, d, n) = (10, 4, 6, 4);
        let sm = build_sample_matrix::<f64>(t, d, n).unwrap();
        let target = rand_tensor(vec![d * t * n, c], 12).map(f64::abs);
        let mut ps = ParamSet::new();
        ps.add("x".to_string(), rand_tensor(vec![t, c], 13));
        let report = grad_check(
            ps.items(),
            |tape, vars| {
                let s = tape.sample_rows(&sm, vars[0])?;
                tape.mse_loss(s, &target, None)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn completeness_gradients_match_finite_differences() {
        let (t, c, d, n) = (8, 4, 5, 4);
        let (ps, sm) = completeness_setup(t, c, d, n);
        let fused = rand_tensor(vec![t, c], 14);
        let gc = {
            let mut m = valid_mask::<f64>(d, t);
            // half the valid cells positive
            let t_ = t;
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                if *v > 0.0 && (i / t_ + i % t_) % 2 == 0 {
                    *v = 0.0;
                }
            }
            m
        };
        let valid = valid_mask::<f64>(d, t);
        let report = grad_check(
            ps.items(),
            |tape, vars| {
                let bp = ps.rebind(tape, vars);
                let x = tape.constant(fused.clone());
                let (cc, cr) = completeness_head(tape, &bp, "cm", x, &sm, d, n)?;
                let l1 = tape.weighted_bl_loss(cc, &gc, Some(&valid))?;
                let l2 = tape.mse_loss(cr, &gc, Some(&valid))?;
                tape.add(l1, l2)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }
}
