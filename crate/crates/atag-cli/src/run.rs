//! Command drivers: dataset assembly, training, inference, evaluation,
//! the ablation grid and the gradient check.

use anyhow::{anyhow, bail, Context, Result};
use atag_core::data::{
    resize_linear, synth_generate, window_video, FeatureSequence, GroundTruth, Instance,
};
use atag_core::eval::{ar_at_an, ar_curve, auc, EvalConfig, VideoEval};
use atag_core::gradcheck::grad_check;
use atag_core::labels::{valid_mask, LabelSet};
use atag_core::loss::{total_loss, LossParts, PredictionVars};
use atag_core::model::{Model, ParamSet, ScoreMaps};
use atag_core::optim::OptimState;
use atag_core::postproc::{compare_proposals, enumerate_proposals, nms, soft_nms, Proposal};
use atag_core::tape::{SampleMatrix, Tape};
use atag_core::{Scalar, Tensor};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig, Suppress};
use crate::io::{
    load_annotations, load_features, save_annotations, save_features_raw, EvalReport,
    ProposalRecord,
};

/// One training example: features at the model's native length plus labels.
pub struct TrainVideo<S: Scalar> {
    pub features: FeatureSequence<S>,
    pub gt: GroundTruth,
}

/// Generate the synthetic corpus and write it to `out_dir` as raw payloads
/// plus one annotations file.
pub fn synth_cmd(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let videos = synth_generate::<f64>(&cfg.dataset_spec())?;
    let mut paths = Vec::new();
    let mut anns = Vec::new();
    for v in &videos {
        let payload = out_dir.join(format!("{}.f32", v.features.video_id));
        save_features_raw(&payload, &v.features)?;
        anns.push((v.gt.clone(), v.features.t()));
        paths.push(payload);
    }
    let ann_path = out_dir.join("annotations.json");
    save_annotations(&ann_path, &anns)?;
    paths.push(ann_path);
    Ok(paths)
}

/// Load feature payloads + annotations from disk and cut them to the model's
/// native length according to the mode (resize for anet, windows for thumos,
/// exact match for synthetic).
pub fn load_train_set<S: Scalar>(
    cfg: &RunConfig,
    feature_paths: &[PathBuf],
    annotations: &Path,
) -> Result<Vec<TrainVideo<S>>> {
    let anns = load_annotations(annotations)?;
    let by_id: HashMap<&str, &GroundTruth> =
        anns.iter().map(|a| (a.gt.video_id.as_str(), &a.gt)).collect();
    let mut out = Vec::new();
    for path in feature_paths {
        let f64_seq = load_features(path)?;
        let gt = by_id
            .get(f64_seq.video_id.as_str())
            .copied()
            .cloned()
            .ok_or_else(|| {
                anyhow!(
                    "video '{}' from {} has no annotation entry",
                    f64_seq.video_id,
                    path.display()
                )
            })?;
        let seq = convert_seq::<S>(&f64_seq);
        for (w_feat, w_gt) in cut_to_native(cfg, &seq, &gt)? {
            out.push(TrainVideo {
                features: w_feat,
                gt: w_gt,
            });
        }
    }
    Ok(out)
}

fn convert_seq<S: Scalar>(f: &FeatureSequence<f64>) -> FeatureSequence<S> {
    FeatureSequence {
        video_id: f.video_id.clone(),
        features: Tensor::from_slice_f64(f.features.shape().to_vec(), f.features.data()),
        frame_interval: f.frame_interval,
        origin_offset: f.origin_offset,
    }
}

fn cut_to_native<S: Scalar>(
    cfg: &RunConfig,
    f: &FeatureSequence<S>,
    gt: &GroundTruth,
) -> Result<Vec<(FeatureSequence<S>, GroundTruth)>> {
    if f.t() == cfg.t {
        return Ok(vec![(f.clone(), gt.clone())]);
    }
    match cfg.mode {
        Mode::Anet => Ok(vec![resize_linear(f, gt, cfg.t)?]),
        Mode::Thumos => {
            if f.t() < cfg.t {
                bail!(
                    "video '{}' has T={} but the window is {}",
                    f.video_id,
                    f.t(),
                    cfg.t
                );
            }
            Ok(window_video(f, gt, cfg.t, cfg.window_overlap)?)
        }
        Mode::Synthetic => bail!(
            "video '{}' has T={} but the model expects T={}",
            f.video_id,
            f.t(),
            cfg.t
        ),
    }
}

pub struct TrainOutcome {
    pub loss_curve: Vec<LossParts>,
    pub checkpoint_path: PathBuf,
    /// Set when a non-finite loss stopped training early; the checkpoint on
    /// disk is the last finite epoch.
    pub halted_at: Option<usize>,
    pub wall_seconds: f64,
}

/// Train from scratch, checkpointing every epoch to `out_dir/checkpoint.bin`.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    videos: &[TrainVideo<S>],
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        bail!("training set is empty");
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let model = Model::new(cfg.model_config())?;
    let mut params: ParamSet<S> = model.init_params(cfg.seed);
    let sm = model.sample_matrix::<S>()?;
    let labels: Vec<LabelSet<S>> = videos
        .iter()
        .map(|v| LabelSet::build(&v.gt, cfg.t, cfg.d))
        .collect();
    let valid = valid_mask::<S>(cfg.d, cfg.t);
    let weights = cfg.loss_weights();
    let tensors: Vec<Tensor<S>> = params.items().iter().map(|(_, t)| t.clone()).collect();
    let mut opt = OptimState::new(cfg.adam_config(), &tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ckpt_path = out_dir.join("checkpoint.bin");
    let start = Instant::now();
    let mut curve: Vec<LossParts> = Vec::with_capacity(cfg.epochs);
    let mut halted_at = None;

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..videos.len()).collect();
        // Fisher-Yates on the training stream: deterministic per seed, and
        // resumable because the stream position is checkpointed.
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut epoch_sum = LossParts::default();
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Vec<S>>> = vec![None; params.len()];
            let inv = S::from_f64(1.0 / batch.len() as f64);
            for &vi in batch {
                let tape = Tape::new();
                let bp = params.bind(&tape);
                let dropout_rng: Option<&mut (dyn RngCore + '_)> = if cfg.dropout > 0.0 {
                    Some(&mut rng)
                } else {
                    None
                };
                let out = model.forward(&tape, &bp, &videos[vi].features.features, &sm, dropout_rng)?;
                let preds = PredictionVars {
                    actionness: out.actionness,
                    start: out.start,
                    end: out.end,
                    cc: out.cc,
                    cr: out.cr,
                };
                let loss = total_loss(&tape, &preds, &labels[vi], &valid, &weights);
                let (loss, parts) = match loss {
                    Ok(v) => v,
                    Err(atag_core::CoreError::NonFinite(what)) => {
                        if !quiet {
                            println!(
                                "epoch {epoch}: non-finite loss ({what}); halting, keeping the last finite checkpoint"
                            );
                        }
                        halted_at = Some(epoch);
                        break 'epochs;
                    }
                    Err(e) => return Err(e.into()),
                };
                if !parts.total.is_finite() {
                    halted_at = Some(epoch);
                    break 'epochs;
                }
                accumulate(&mut epoch_sum, &parts);
                seen += 1;
                let store = tape.backward(loss);
                for (i, (name, _)) in params.items().iter().enumerate() {
                    if let Some(g) = store.get(bp.var(name)) {
                        let slot = grads[i].get_or_insert_with(|| vec![S::zero(); g.len()]);
                        for (acc, &gi) in slot.iter_mut().zip(g) {
                            *acc = *acc + gi * inv;
                        }
                    }
                }
            }
            opt.step(params.items_mut(), &grads, epoch)?;
        }
        let mean = scale_parts(&epoch_sum, 1.0 / seen.max(1) as f64);
        if !quiet {
            println!(
                "epoch {:>4}  total {:>9.5}  cc {:.5}  cr {:.5}  act {:.5}  start {:.5}  end {:.5}  lr {:.2e}  {:.0} ms",
                epoch,
                mean.total,
                mean.completeness_cls,
                mean.completeness_reg,
                mean.actionness,
                mean.start,
                mean.end,
                opt.effective_lr(epoch),
                epoch_start.elapsed().as_secs_f64() * 1e3
            );
        }
        curve.push(mean);
        Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            params: clone_params(&params),
            opt: opt.clone(),
            rng: rng.clone(),
        }
        .save(&ckpt_path)?;
    }
    if halted_at == Some(0) && !ckpt_path.exists() {
        bail!("loss was non-finite before the first checkpoint");
    }
    Ok(TrainOutcome {
        loss_curve: curve,
        checkpoint_path: ckpt_path,
        halted_at,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn clone_params<S: Scalar>(ps: &ParamSet<S>) -> ParamSet<S> {
    let mut out = ParamSet::new();
    for (name, t) in ps.items() {
        out.add(name.clone(), t.clone());
    }
    out
}

fn accumulate(sum: &mut LossParts, p: &LossParts) {
    sum.total += p.total;
    sum.completeness_cls += p.completeness_cls;
    sum.completeness_reg += p.completeness_reg;
    sum.actionness += p.actionness;
    sum.start += p.start;
    sum.end += p.end;
}

fn scale_parts(p: &LossParts, k: f64) -> LossParts {
    LossParts {
        total: p.total * k,
        completeness_cls: p.completeness_cls * k,
        completeness_reg: p.completeness_reg * k,
        actionness: p.actionness * k,
        start: p.start * k,
        end: p.end * k,
    }
}

/// Score maps for one native-length window.
pub fn score_window<S: Scalar>(
    model: &Model,
    params: &ParamSet<S>,
    sm: &SampleMatrix<S>,
    features: &Tensor<S>,
) -> Result<ScoreMaps> {
    let tape = Tape::new();
    let bp = params.bind(&tape);
    let out = model.forward(&tape, &bp, features, sm, None)?;
    Ok(ScoreMaps::extract(&tape, &out))
}

fn suppress(cfg: &RunConfig, mut props: Vec<Proposal>) -> Result<Vec<Proposal>> {
    match cfg.suppress {
        Suppress::Nms => Ok(nms(&props, cfg.nms_threshold, cfg.max_proposals)?),
        Suppress::SoftNms => Ok(soft_nms(
            &props,
            cfg.soft_nms_sigma,
            cfg.score_floor,
            cfg.max_proposals,
        )?),
        Suppress::None => {
            props.sort_by(compare_proposals);
            props.truncate(cfg.max_proposals);
            Ok(props)
        }
    }
}

/// Proposals for one full video: window or resize to the native length,
/// enumerate and fuse per window, shift back to source coordinates, then
/// suppress across windows.
pub fn propose_video<S: Scalar>(
    cfg: &RunConfig,
    model: &Model,
    params: &ParamSet<S>,
    sm: &SampleMatrix<S>,
    f: &FeatureSequence<S>,
) -> Result<Vec<Proposal>> {
    let empty = GroundTruth {
        video_id: f.video_id.clone(),
        instances: vec![],
    };
    let mut pool = Vec::new();
    if f.t() == cfg.t {
        pool.extend(enumerate_proposals(&score_window(model, params, sm, &f.features)?));
    } else {
        match cfg.mode {
            Mode::Anet => {
                let (resized, _) = resize_linear(f, &empty, cfg.t)?;
                let back = f.t() as f64 / cfg.t as f64;
                for mut p in enumerate_proposals(&score_window(model, params, sm, &resized.features)?)
                {
                    p.t_s *= back;
                    p.t_e *= back;
                    pool.push(p);
                }
            }
            Mode::Thumos => {
                if f.t() < cfg.t {
                    bail!(
                        "video '{}' has T={} but the window is {}",
                        f.video_id,
                        f.t(),
                        cfg.t
                    );
                }
                for (w, _) in window_video(f, &empty, cfg.t, cfg.window_overlap)? {
                    let shift = (w.origin_offset - f.origin_offset) as f64;
                    for mut p in
                        enumerate_proposals(&score_window(model, params, sm, &w.features)?)
                    {
                        p.t_s += shift;
                        p.t_e += shift;
                        pool.push(p);
                    }
                }
            }
            Mode::Synthetic => bail!(
                "video '{}' has T={} but the model expects T={}",
                f.video_id,
                f.t(),
                cfg.t
            ),
        }
    }
    suppress(cfg, pool)
}

/// Run inference over feature files and produce proposal records. Times are
/// snippet indices, or seconds when `in_seconds` is set (snippet index times
/// the frame interval).
pub fn infer_cmd<S: Scalar>(
    ck: &Checkpoint<S>,
    feature_paths: &[PathBuf],
    in_seconds: bool,
) -> Result<Vec<ProposalRecord>> {
    let cfg = &ck.config;
    let model = Model::new(cfg.model_config())?;
    let sm = model.sample_matrix::<S>()?;
    let mut records = Vec::new();
    for path in feature_paths {
        let f = convert_seq::<S>(&load_features(path)?);
        let scale = if in_seconds { f.frame_interval as f64 } else { 1.0 };
        for p in propose_video(cfg, &model, &ck.params, &sm, &f)? {
            records.push(ProposalRecord {
                video_id: f.video_id.clone(),
                t_start: p.t_s * scale,
                t_end: p.t_e * scale,
                score: p.p_f,
                p_s: p.p_s,
                p_e: p.p_e,
                p_cc: p.p_cc,
                p_cr: p.p_cr,
            });
        }
    }
    Ok(records)
}

/// Pair proposals with annotations. Videos with no proposals still count,
/// with a warning; proposals for unknown videos are dropped with a warning.
pub fn build_video_evals(
    records: &[ProposalRecord],
    annotations: &[(GroundTruth, usize)],
) -> (Vec<VideoEval>, Vec<String>) {
    let mut by_id: HashMap<&str, Vec<Proposal>> = HashMap::new();
    for r in records {
        by_id.entry(r.video_id.as_str()).or_default().push(Proposal {
            t_s: r.t_start,
            t_e: r.t_end,
            p_f: r.score,
            p_s: r.p_s,
            p_e: r.p_e,
            p_cc: r.p_cc,
            p_cr: r.p_cr,
        });
    }
    let mut warnings = Vec::new();
    let mut evals = Vec::new();
    for (gt, _) in annotations {
        let props = match by_id.remove(gt.video_id.as_str()) {
            Some(mut p) => {
                p.sort_by(compare_proposals);
                p
            }
            None => {
                warnings.push(format!(
                    "video '{}' has no proposals; scoring it as empty",
                    gt.video_id
                ));
                Vec::new()
            }
        };
        evals.push(VideoEval {
            proposals: props,
            gts: gt.instances.clone(),
        });
    }
    for id in by_id.keys() {
        warnings.push(format!("proposals for unannotated video '{id}' ignored"));
    }
    (evals, warnings)
}

pub fn evaluate(
    records: &[ProposalRecord],
    annotations: &[(GroundTruth, usize)],
    ecfg: &EvalConfig,
) -> Result<(EvalReport, Vec<(usize, f64)>, Vec<String>)> {
    let (evals, warnings) = build_video_evals(records, annotations);
    let ar = |an: usize| ar_at_an(&evals, an, &ecfg.tiou_thresholds);
    let report = EvalReport {
        ar_1: ar(1)?,
        ar_5: ar(5)?,
        ar_10: ar(10)?,
        ar_50: ar(50)?,
        ar_100: ar(100)?,
        auc: auc(&evals, ecfg)?,
    };
    let curve = ar_curve(&evals, ecfg)?;
    Ok((report, curve, warnings))
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationCell {
    pub fusion: String,
    pub local_variant: String,
    pub first_loss: f64,
    pub last_loss: f64,
    pub auc: f64,
}

/// Train every fusion x local-variant combination on the same data and
/// report loss movement plus training-set AUC.
pub fn ablate<S: Scalar>(
    cfg: &RunConfig,
    videos: &[TrainVideo<S>],
    out_dir: &Path,
    quiet: bool,
) -> Result<Vec<AblationCell>> {
    use atag_core::gcn::LocalVariant;
    use atag_core::heads::FusionMode;
    let fusions = [FusionMode::Concat, FusionMode::Sum, FusionMode::Late];
    let variants = [
        LocalVariant::Adaptive,
        LocalVariant::GeneralGcn,
        LocalVariant::SelfAttnGcn,
        LocalVariant::Conv,
    ];
    let mut cells = Vec::new();
    for fusion in fusions {
        for variant in variants {
            let mut cell_cfg = cfg.clone();
            cell_cfg.fusion = fusion;
            cell_cfg.local_variant = variant;
            let cell_dir = out_dir.join(format!("{}_{}", fusion.name(), variant.name()));
            let outcome = train(&cell_cfg, videos, &cell_dir, true)?;
            if outcome.loss_curve.is_empty() {
                bail!(
                    "ablation cell {}/{} produced no finite epochs",
                    fusion.name(),
                    variant.name()
                );
            }
            let ck: Checkpoint<S> = Checkpoint::load(&outcome.checkpoint_path)?;
            let model = Model::new(cell_cfg.model_config())?;
            let sm = model.sample_matrix::<S>()?;
            let mut records = Vec::new();
            for v in videos {
                for p in propose_video(&cell_cfg, &model, &ck.params, &sm, &v.features)? {
                    records.push(ProposalRecord {
                        video_id: v.features.video_id.clone(),
                        t_start: p.t_s,
                        t_end: p.t_e,
                        score: p.p_f,
                        p_s: p.p_s,
                        p_e: p.p_e,
                        p_cc: p.p_cc,
                        p_cr: p.p_cr,
                    });
                }
            }
            let anns: Vec<(GroundTruth, usize)> =
                videos.iter().map(|v| (v.gt.clone(), v.features.t())).collect();
            let (report, _, _) = evaluate(&records, &anns, &cell_cfg.eval_config())?;
            let cell = AblationCell {
                fusion: fusion.name().to_string(),
                local_variant: variant.name().to_string(),
                first_loss: outcome.loss_curve[0].total,
                last_loss: outcome.loss_curve.last().unwrap().total,
                auc: report.auc,
            };
            if !quiet {
                println!(
                    "ablation {:>6} x {:<13} loss {:.4} -> {:.4}  auc {:.1}",
                    cell.fusion, cell.local_variant, cell.first_loss, cell.last_loss, cell.auc
                );
            }
            cells.push(cell);
        }
    }
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&cells)?,
    )?;
    Ok(cells)
}

pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub params_checked: usize,
    pub seconds: f64,
}

/// Finite-difference check of the full training loss at the configured
/// sizes, always in f64.
pub fn gradcheck_cmd(cfg: &RunConfig, tol: f64) -> Result<GradCheckOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config())?;
    let ps: ParamSet<f64> = model.init_params(cfg.seed);
    let sm = model.sample_matrix::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
    let x = Tensor::<f64>::uniform(vec![cfg.t, cfg.c], 1.0, &mut rng);
    let span = (cfg.t as f64 * 0.6).max(2.0);
    let s0 = cfg.t as f64 * 0.2;
    let gt = GroundTruth {
        video_id: "probe".into(),
        instances: vec![Instance::new(s0, s0 + span)],
    };
    let labels = LabelSet::<f64>::build(&gt, cfg.t, cfg.d);
    let valid = valid_mask::<f64>(cfg.d, cfg.t);
    let weights = cfg.loss_weights();
    let start = Instant::now();
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
        tol,
    )?;
    Ok(GradCheckOutcome {
        max_rel_err: report.max_rel_err,
        worst: report.worst.clone(),
        params_checked: ps.numel(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::preset(Mode::Synthetic);
        cfg.t = 16;
        cfg.c = 8;
        cfg.d = 8;
        cfg.heads = 2;
        cfg.n_samples = 4;
        cfg.boundary_hidden = 8;
        cfg.cc_hidden_3d = 6;
        cfg.cc_hidden_2d = 4;
        cfg.num_videos = 2;
        cfg.instance_len_min = 3;
        cfg.instance_len_max = 6;
        cfg.epochs = 2;
        cfg.lr_decay_period = 10;
        cfg
    }

    fn tiny_videos(cfg: &RunConfig) -> Vec<TrainVideo<f64>> {
        synth_generate::<f64>(&cfg.dataset_spec())
            .unwrap()
            .into_iter()
            .map(|v| TrainVideo {
                features: v.features,
                gt: v.gt,
            })
            .collect()
    }

    #[test]
    fn synth_writes_payloads_and_annotations() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let paths = synth_cmd(&cfg, dir.path()).unwrap();
        assert_eq!(paths.len(), cfg.num_videos + 1);
        let feature_paths: Vec<PathBuf> = paths[..cfg.num_videos].to_vec();
        let videos: Vec<TrainVideo<f64>> =
            load_train_set(&cfg, &feature_paths, &paths[cfg.num_videos]).unwrap();
        assert_eq!(videos.len(), cfg.num_videos);
        assert_eq!(videos[0].features.t(), cfg.t);
    }

    #[test]
    fn training_checkpoints_and_resumes_state() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let videos = tiny_videos(&cfg);
        let outcome = train(&cfg, &videos, dir.path(), true).unwrap();
        assert_eq!(outcome.loss_curve.len(), 2);
        assert!(outcome.halted_at.is_none());
        let ck: Checkpoint<f64> = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ck.epoch, 2);
        assert!(ck.opt.step > 0);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let videos = tiny_videos(&cfg);
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let a = train(&cfg, &videos, d1.path(), true).unwrap();
        let b = train(&cfg, &videos, d2.path(), true).unwrap();
        assert_eq!(a.loss_curve.last().unwrap().total, b.loss_curve.last().unwrap().total);
        assert_eq!(
            std::fs::read(&a.checkpoint_path).unwrap(),
            std::fs::read(&b.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn inference_rejects_wrong_length_in_synthetic_mode() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let videos = tiny_videos(&cfg);
        let outcome = train(&cfg, &videos, dir.path(), true).unwrap();
        let ck: Checkpoint<f64> = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        let model = Model::new(cfg.model_config()).unwrap();
        let sm = model.sample_matrix::<f64>().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let short = FeatureSequence::new(
            "short",
            Tensor::<f64>::uniform(vec![cfg.t - 2, cfg.c], 1.0, &mut rng),
            1,
        )
        .unwrap();
        assert!(propose_video(&cfg, &model, &ck.params, &sm, &short).is_err());
    }

    #[test]
    fn anet_mode_resizes_and_scales_back() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Anet;
        let videos = tiny_videos(&cfg);
        let outcome = train(&cfg, &videos, dir.path(), true).unwrap();
        let ck: Checkpoint<f64> = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        let model = Model::new(cfg.model_config()).unwrap();
        let sm = model.sample_matrix::<f64>().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let long_t = cfg.t * 2;
        let long = FeatureSequence::new(
            "long",
            Tensor::<f64>::uniform(vec![long_t, cfg.c], 1.0, &mut rng),
            1,
        )
        .unwrap();
        let props = propose_video(&cfg, &model, &ck.params, &sm, &long).unwrap();
        assert!(!props.is_empty());
        assert!(props.iter().all(|p| p.t_e <= long_t as f64 + 1e-9));
        // Times live on the source scale, so some end past the native T.
        assert!(props.iter().any(|p| p.t_e > cfg.t as f64));
    }

    #[test]
    fn thumos_mode_windows_and_shifts_back() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Thumos;
        let videos = tiny_videos(&cfg);
        let outcome = train(&cfg, &videos, dir.path(), true).unwrap();
        let ck: Checkpoint<f64> = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        let model = Model::new(cfg.model_config()).unwrap();
        let sm = model.sample_matrix::<f64>().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let long_t = cfg.t * 2;
        let long = FeatureSequence::new(
            "long",
            Tensor::<f64>::uniform(vec![long_t, cfg.c], 1.0, &mut rng),
            1,
        )
        .unwrap();
        let props = propose_video(&cfg, &model, &ck.params, &sm, &long).unwrap();
        assert!(props.iter().any(|p| p.t_s >= cfg.t as f64 - 1.0));
    }

    #[test]
    fn evaluation_warns_on_missing_videos() {
        let records = vec![ProposalRecord {
            video_id: "known".into(),
            t_start: 2.0,
            t_end: 8.0,
            score: 0.9,
            p_s: 0.9,
            p_e: 0.9,
            p_cc: 0.9,
            p_cr: 0.9,
        }];
        let anns = vec![
            (
                GroundTruth {
                    video_id: "known".into(),
                    instances: vec![Instance::new(2.0, 8.0)],
                },
                16,
            ),
            (
                GroundTruth {
                    video_id: "missing".into(),
                    instances: vec![Instance::new(1.0, 5.0)],
                },
                16,
            ),
        ];
        let ecfg = EvalConfig::activitynet_like();
        let (report, curve, warnings) = evaluate(&records, &anns, &ecfg).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("missing"));
        // One of two ground truths is matched perfectly.
        assert!((report.ar_100 - 50.0).abs() < 1e-9);
        assert_eq!(curve.len(), 100);
    }

    #[test]
    fn gradcheck_cmd_passes_at_small_size() {
        let mut cfg = tiny_cfg();
        cfg.t = 8;
        cfg.d = 6;
        cfg.delta = 2;
        let out = gradcheck_cmd(&cfg, 1e-4).unwrap();
        assert!(out.max_rel_err < 1e-4, "worst {:?}", out.worst);
    }
}
