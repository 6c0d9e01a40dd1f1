//! Model assembly: named parameter registry, configuration, and the full
//! two-branch forward pass producing all score maps.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::split_channels;
use crate::error::{CoreError, Result};
use crate::gcn::{self, GcnConfig, LocalVariant};
use crate::heads::{
    boundary_head, build_sample_matrix, completeness_head, fuse_global_local, predictor_1d_forward,
    register_boundary_head, register_completeness_head, register_predictor_1d, FusionMode,
};
use crate::scalar::Scalar;
use crate::tape::{SampleMatrix, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{self, TransformerConfig};

/// Ordered, name-indexed set of trainable tensors. Order is creation order
/// and is the canonical order for optimizers, checkpoints and gradient
/// checks.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    items: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, value: Tensor<S>) {
        assert!(
            self.index.insert(name.clone(), self.items.len()).is_none(),
            "duplicate parameter '{name}'"
        );
        self.items.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.items[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.items[i].1)
    }

    pub fn items(&self) -> &[(String, Tensor<S>)] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [(String, Tensor<S>)] {
        &mut self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape<S>) -> BoundParams<S> {
        let vars = self
            .items
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams {
            vars,
            _marker: std::marker::PhantomData,
        }
    }

    /// Associate existing tape vars (one per parameter, in order) with the
    /// parameter names. Used by gradient checking, which creates the leaves
    /// itself.
    pub fn rebind(&self, _tape: &Tape<S>, vars: &[Var]) -> BoundParams<S> {
        assert_eq!(vars.len(), self.items.len(), "var/parameter count mismatch");
        BoundParams {
            vars: self
                .items
                .iter()
                .zip(vars)
                .map(|((name, _), &v)| (name.clone(), v))
                .collect(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Convert every tensor through f64, e.g. between precisions.
    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, t) in &self.items {
            out.add(
                name.clone(),
                Tensor::from_slice_f64(t.shape().to_vec(), &t.to_f64_vec()),
            );
        }
        out
    }
}

/// Name-to-var view of a `ParamSet` bound onto one tape.
pub struct BoundParams<S: Scalar> {
    vars: HashMap<String, Var>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> BoundParams<S> {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Fixed sequence length.
    pub t: usize,
    /// Input feature channels; split evenly across the two branches.
    pub c: usize,
    /// Maximum proposal duration in snippets.
    pub d: usize,
    /// Boundary-matching sample points per proposal.
    pub n_samples: usize,
    pub heads: usize,
    pub layers: usize,
    pub delta: usize,
    pub ffn_expansion: usize,
    pub front_kernel: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub local_variant: LocalVariant,
    pub boundary_hidden: usize,
    pub cc_hidden_3d: usize,
    pub cc_hidden_2d: usize,
    /// Transformer branch on/off (off = ablated local-only model).
    pub use_global_branch: bool,
    pub use_front_block: bool,
    pub use_pos_encoding: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(t: usize, c: usize, d: usize) -> Self {
        Self {
            t,
            c,
            d,
            n_samples: 32,
            heads: 8,
            layers: 1,
            delta: 2,
            ffn_expansion: 2,
            front_kernel: 7,
            dropout: 0.0,
            fusion: FusionMode::Concat,
            local_variant: LocalVariant::Adaptive,
            boundary_hidden: 16,
            cc_hidden_3d: 16,
            cc_hidden_2d: 16,
            use_global_branch: true,
            use_front_block: true,
            use_pos_encoding: true,
        }
    }

    /// Width of each branch.
    pub fn branch_width(&self) -> usize {
        self.c / 2
    }

    /// Channel count the output heads operate on.
    pub fn head_width(&self) -> usize {
        if !self.use_global_branch {
            self.branch_width()
        } else {
            self.fusion.head_width(self.branch_width(), self.branch_width())
        }
    }

    pub fn transformer_cfg(&self) -> TransformerConfig {
        TransformerConfig {
            width: self.branch_width(),
            heads: self.heads,
            layers: self.layers,
            ffn_expansion: self.ffn_expansion,
            front_kernel: self.front_kernel,
            dropout: self.dropout,
            use_front_block: self.use_front_block,
            use_pos_encoding: self.use_pos_encoding,
        }
    }

    pub fn gcn_cfg(&self) -> GcnConfig {
        GcnConfig {
            width: self.branch_width(),
            delta: self.delta,
            variant: self.local_variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c % 2 != 0 || self.c == 0 {
            return Err(CoreError::config(format!(
                "channel count {} must be even and positive",
                self.c
            )));
        }
        if self.d == 0 || self.d > self.t {
            return Err(CoreError::config(format!(
                "max duration {} must be in 1..={}",
                self.d, self.t
            )));
        }
        if self.n_samples == 0 {
            return Err(CoreError::config("n_samples must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config(format!(
                "dropout {} must be in [0,1)",
                self.dropout
            )));
        }
        if self.use_global_branch {
            self.transformer_cfg().validate()?;
        } else if self.branch_width() % 4 != 0 {
            return Err(CoreError::config(
                "branch width must be divisible by 4 (actionness grouped conv)",
            ));
        }
        self.gcn_cfg().validate(self.t)?;
        for (what, w) in [
            ("head input width", self.head_width()),
            ("boundary hidden width", self.boundary_hidden),
        ] {
            if w % 4 != 0 || w == 0 {
                return Err(CoreError::config(format!(
                    "{what} {w} must be a positive multiple of 4"
                )));
            }
        }
        if self.cc_hidden_3d == 0 || self.cc_hidden_2d == 0 {
            return Err(CoreError::config("completeness widths must be positive"));
        }
        Ok(())
    }
}

/// Everything the forward pass produced, still on the tape.
pub struct ForwardOut {
    /// Snippet actionness probabilities, length `T`.
    pub actionness: Var,
    /// Boundary probabilities, each length `T`.
    pub start: Var,
    pub end: Var,
    /// Completeness maps, each `D x T` with invalid cells zeroed.
    pub cc: Var,
    pub cr: Var,
    /// Per-head attention maps of the last transformer layer.
    pub attention: Vec<Var>,
    /// Content adjacency of the local branch, when the variant has one.
    pub a_d: Option<Var>,
    /// Combined masked adjacency of the local branch.
    pub a_hat: Option<Var>,
}

/// Detached, f64 score maps for post-processing and evaluation. Maps are
/// row-major `D x T`.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    pub t: usize,
    pub d: usize,
    pub actionness: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub cc: Vec<f64>,
    pub cr: Vec<f64>,
}

impl ScoreMaps {
    pub fn extract<S: Scalar>(tape: &Tape<S>, out: &ForwardOut) -> Self {
        let cc = tape.value(out.cc);
        ScoreMaps {
            t: tape.shape(out.actionness)[0],
            d: cc.shape()[0],
            actionness: tape.value(out.actionness).to_f64_vec(),
            start: tape.value(out.start).to_f64_vec(),
            end: tape.value(out.end).to_f64_vec(),
            cc: cc.to_f64_vec(),
            cr: tape.value(out.cr).to_f64_vec(),
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Deterministic parameter initialization.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamSet<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let cw = self.cfg.branch_width();
        if self.cfg.use_global_branch {
            transformer::register_params(&mut ps, "tr", &self.cfg.transformer_cfg(), &mut rng);
        } else {
            register_predictor_1d(&mut ps, "act", cw, cw, 1, &mut rng);
        }
        gcn::register_params(&mut ps, "gcn", &self.cfg.gcn_cfg(), self.cfg.t, &mut rng);
        let hw = self.cfg.head_width();
        register_boundary_head(&mut ps, "bd", hw, self.cfg.boundary_hidden, &mut rng);
        register_completeness_head(
            &mut ps,
            "cm",
            hw,
            self.cfg.n_samples,
            self.cfg.cc_hidden_3d,
            self.cfg.cc_hidden_2d,
            &mut rng,
        );
        ps
    }

    pub fn sample_matrix<S: Scalar>(&self) -> Result<SampleMatrix<S>> {
        build_sample_matrix(self.cfg.t, self.cfg.d, self.cfg.n_samples)
    }

    /// Full forward pass for one video's features `(T, C)`. Pass an RNG for
    /// training mode (active dropout); `None` for inference.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        bp: &BoundParams<S>,
        features: &Tensor<S>,
        sm: &SampleMatrix<S>,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        if features.shape() != [cfg.t, cfg.c] {
            return Err(CoreError::config(format!(
                "feature shape {:?} does not match configured (T={}, C={}); \
                 the learned adjacency fixes the sequence length",
                features.shape(),
                cfg.t,
                cfg.c
            )));
        }
        let (f_g, f_l) = split_channels(features)?;
        let x_l = tape.constant(f_l);

        let local = gcn::forward(tape, bp, "gcn", &cfg.gcn_cfg(), x_l)?;

        let (global_features, actionness, attention) = if cfg.use_global_branch {
            let x_g = tape.constant(f_g);
            let out = transformer::forward(
                tape,
                bp,
                "tr",
                &cfg.transformer_cfg(),
                x_g,
                rng.as_deref_mut(),
            )?;
            (Some(out.features), out.actionness, out.attention)
        } else {
            let a = predictor_1d_forward(tape, bp, "act", local.features, 0)?;
            (None, a, Vec::new())
        };

        let (start, end, cc, cr) = match (global_features, cfg.fusion) {
            (None, _) => self.run_heads(tape, bp, local.features, sm)?,
            (Some(g), FusionMode::Late) => {
                let (s1, e1, cc1, cr1) = self.run_heads(tape, bp, g, sm)?;
                let (s2, e2, cc2, cr2) = self.run_heads(tape, bp, local.features, sm)?;
                let half = S::from_f64(0.5);
                (
                    tape.scale(tape.add(s1, s2)?, half),
                    tape.scale(tape.add(e1, e2)?, half),
                    tape.scale(tape.add(cc1, cc2)?, half),
                    tape.scale(tape.add(cr1, cr2)?, half),
                )
            }
            (Some(g), mode) => {
                let fused = fuse_global_local(tape, g, local.features, mode)?;
                self.run_heads(tape, bp, fused, sm)?
            }
        };

        Ok(ForwardOut {
            actionness,
            start,
            end,
            cc,
            cr,
            attention,
            a_d: local.a_d,
            a_hat: local.a_hat,
        })
    }

    fn run_heads<S: Scalar>(
        &self,
        tape: &Tape<S>,
        bp: &BoundParams<S>,
        features: Var,
        sm: &SampleMatrix<S>,
    ) -> Result<(Var, Var, Var, Var)> {
        let (s, e) = boundary_head(tape, bp, "bd", features)?;
        let (cc, cr) =
            completeness_head(tape, bp, "cm", features, sm, self.cfg.d, self.cfg.n_samples)?;
        Ok((s, e, cc, cr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroundTruth, Instance};
    use crate::gradcheck::grad_check;
    use crate::labels::{valid_mask, LabelSet};
    use crate::loss::{total_loss, LossWeights, PredictionVars};

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(8, 8, 6);
        cfg.heads = 2;
        cfg.n_samples = 4;
        cfg.boundary_hidden = 8;
        cfg.cc_hidden_3d = 6;
        cfg.cc_hidden_2d = 4;
        cfg
    }

    fn random_features(t: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![t, c], 1.0, &mut rng)
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        assert!(small_cfg().validate().is_ok());
        let mut c = small_cfg();
        c.c = 7;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.d = 9;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.delta = 8;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.boundary_hidden = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let model = Model::new(small_cfg()).unwrap();
        let a: ParamSet<f64> = model.init_params(42);
        let b: ParamSet<f64> = model.init_params(42);
        assert_eq!(a.len(), b.len());
        for ((n1, t1), (n2, t2)) in a.items().iter().zip(b.items()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        let c: ParamSet<f64> = model.init_params(43);
        assert!(a.items().iter().zip(c.items()).any(|((_, x), (_, y))| x.data() != y.data()));
        for group in ["tr.", "gcn.", "bd.", "cm."] {
            assert!(
                a.items().iter().any(|(n, _)| n.starts_with(group)),
                "missing group {group}"
            );
        }
    }

    fn check_forward(cfg: ModelConfig) {
        let t = cfg.t;
        let d = cfg.d;
        let model = Model::new(cfg).unwrap();
        let ps: ParamSet<f64> = model.init_params(1);
        let sm = model.sample_matrix().unwrap();
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let x = random_features(t, model.cfg.c, 2);
        let out = model.forward(&tape, &bp, &x, &sm, None).unwrap();
        for (name, v) in [("actionness", out.actionness), ("start", out.start), ("end", out.end)] {
            let val = tape.value(v);
            assert_eq!(val.shape(), &[t], "{name}");
            assert!(val.data().iter().all(|&p| (0.0..=1.0).contains(&p)), "{name}");
        }
        for m in [out.cc, out.cr] {
            let val = tape.value(m);
            assert_eq!(val.shape(), &[d, t]);
            for di in 0..d {
                for j in 0..t {
                    let p = val.at2(di, j);
                    if j + di + 1 <= t {
                        assert!((0.0..=1.0).contains(&p));
                    } else {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shapes_all_fusion_modes() {
        for fusion in [FusionMode::Concat, FusionMode::Sum, FusionMode::Late] {
            let mut cfg = small_cfg();
            cfg.fusion = fusion;
            check_forward(cfg);
        }
    }

    #[test]
    fn forward_shapes_all_variants_and_ablated() {
        for v in [
            LocalVariant::Adaptive,
            LocalVariant::GeneralGcn,
            LocalVariant::SelfAttnGcn,
            LocalVariant::Conv,
        ] {
            let mut cfg = small_cfg();
            cfg.local_variant = v;
            check_forward(cfg);
        }
        let mut cfg = small_cfg();
        cfg.use_global_branch = false;
        check_forward(cfg);
    }

    #[test]
    fn wrong_length_input_is_rejected() {
        let model = Model::new(small_cfg()).unwrap();
        let ps: ParamSet<f64> = model.init_params(1);
        let sm = model.sample_matrix().unwrap();
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let x = random_features(9, 8, 3);
        assert!(model.forward(&tape, &bp, &x, &sm, None).is_err());
    }

    #[test]
    fn precision_conversion_round_trips_f32_values() {
        let model = Model::new(small_cfg()).unwrap();
        let ps32: ParamSet<f32> = model.init_params(5);
        let ps64: ParamSet<f64> = ps32.convert();
        let back: ParamSet<f32> = ps64.convert();
        for ((_, a), (_, b)) in ps32.items().iter().zip(back.items()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let ps: ParamSet<f64> = model.init_params(7);
        let sm = model.sample_matrix().unwrap();
        let x = random_features(cfg.t, cfg.c, 8);
        let gt = GroundTruth {
            video_id: "v".into(),
            instances: vec![Instance::new(2.0, 6.0)],
        };
        let labels = LabelSet::<f64>::build(&gt, cfg.t, cfg.d);
        let valid = valid_mask::<f64>(cfg.d, cfg.t);
        let weights = LossWeights::default();
        let report = grad_check(
            ps.items(),
            |tape, vars| {
                let bp = ps.rebind(tape, vars);
                let out = model.forward(tape, &bp, &x, &sm, None)?;
                let preds = PredictionVars {
                    actionness: out.actionness,
                    start: out.start,
                    end: out.end,
                    cc: out.cc,
                    cr: out.cr,
                };
                Ok(total_loss(tape, &preds, &labels, &valid, &weights)?.0)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst: {:?}", report.worst);
    }
}
