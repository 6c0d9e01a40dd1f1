//! Feature sequences, ground truth, resizing, sliding windows, the
//! global/local channel split and the synthetic dataset generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One action instance in snippet units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub start: f64,
    pub end: f64,
}

impl Instance {
    pub fn new(start: f64, end: f64) -> Self {
        Instance { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Per-video ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub instances: Vec<Instance>,
}

impl GroundTruth {
    /// Check `0 <= start < end <= t` for every instance.
    pub fn validate(&self, t: usize) -> Result<()> {
        for inst in &self.instances {
            if !(inst.start >= 0.0 && inst.start < inst.end && inst.end <= t as f64) {
                return Err(CoreError::data(format!(
                    "invalid instance ({}, {}) for video {} with T={t}",
                    inst.start, inst.end, self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// A `T x C` snippet feature matrix with metadata.
#[derive(Debug, Clone)]
pub struct FeatureSequence<S: Scalar> {
    pub video_id: String,
    pub features: Tensor<S>,
    /// Frames per snippet in the source video.
    pub frame_interval: u32,
    /// Snippet index of this window's start within the source video.
    pub origin_offset: usize,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(video_id: impl Into<String>, features: Tensor<S>, frame_interval: u32) -> Result<Self> {
        let fs = FeatureSequence {
            video_id: video_id.into(),
            features,
            frame_interval,
            origin_offset: 0,
        };
        fs.check()?;
        Ok(fs)
    }

    fn check(&self) -> Result<()> {
        if self.features.shape().len() != 2 {
            return Err(CoreError::data("features must be a T x C matrix"));
        }
        if self.t() < 4 {
            return Err(CoreError::data(format!(
                "video {}: T={} below minimum 4",
                self.video_id,
                self.t()
            )));
        }
        if !self.features.is_finite() {
            return Err(CoreError::data(format!(
                "video {}: non-finite feature values",
                self.video_id
            )));
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.features.rows()
    }

    pub fn c(&self) -> usize {
        self.features.cols()
    }
}

/// Split `F` into global/local halves along the channel axis.
/// First half of channels feeds the transformer branch, second half the GCN.
pub fn split_channels<S: Scalar>(features: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    if features.shape().len() != 2 {
        return Err(CoreError::config("split_channels expects a 2-D tensor"));
    }
    let (t, c) = (features.rows(), features.cols());
    if c % 2 != 0 {
        return Err(CoreError::config(format!(
            "split_channels requires an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let mut g = Vec::with_capacity(t * half);
    let mut l = Vec::with_capacity(t * half);
    for i in 0..t {
        let row = &features.data()[i * c..(i + 1) * c];
        g.extend_from_slice(&row[..half]);
        l.extend_from_slice(&row[half..]);
    }
    Ok((Tensor::new(vec![t, half], g)?, Tensor::new(vec![t, half], l)?))
}

/// Concatenate the two channel halves back together (inverse of
/// [`split_channels`]).
pub fn concat_channels<S: Scalar>(g: &Tensor<S>, l: &Tensor<S>) -> Result<Tensor<S>> {
    if g.rows() != l.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "concat_channels",
            lhs: g.shape().to_vec(),
            rhs: l.shape().to_vec(),
        });
    }
    let (t, cg, cl) = (g.rows(), g.cols(), l.cols());
    let mut out = Vec::with_capacity(t * (cg + cl));
    for i in 0..t {
        out.extend_from_slice(&g.data()[i * cg..(i + 1) * cg]);
        out.extend_from_slice(&l.data()[i * cl..(i + 1) * cl]);
    }
    Tensor::new(vec![t, cg + cl], out)
}

/// Linearly interpolate each channel onto `t_target` uniform sample points
/// spanning the original extent; ground-truth coordinates are rescaled by
/// `t_target / t`.
pub fn resize_linear<S: Scalar>(
    f: &FeatureSequence<S>,
    gt: &GroundTruth,
    t_target: usize,
) -> Result<(FeatureSequence<S>, GroundTruth)> {
    if t_target < 2 {
        return Err(CoreError::config(format!("resize target {t_target} below 2")));
    }
    let (t, c) = (f.t(), f.c());
    if t < 2 {
        return Err(CoreError::data("resize_linear requires T >= 2"));
    }
    let features = if t_target == t {
        f.features.clone()
    } else {
        let mut out = Vec::with_capacity(t_target * c);
        let scale = (t - 1) as f64 / (t_target - 1) as f64;
        for i in 0..t_target {
            let pos = i as f64 * scale;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(t - 1);
            let frac = S::from_f64(pos - lo as f64);
            let one_m = S::one() - frac;
            for j in 0..c {
                out.push(f.features.at2(lo, j) * one_m + f.features.at2(hi, j) * frac);
            }
        }
        Tensor::new(vec![t_target, c], out)?
    };
    let ratio = t_target as f64 / t as f64;
    let gt_out = GroundTruth {
        video_id: gt.video_id.clone(),
        instances: gt
            .instances
            .iter()
            .map(|i| Instance::new(i.start * ratio, i.end * ratio))
            .collect(),
    };
    Ok((
        FeatureSequence {
            video_id: f.video_id.clone(),
            features,
            frame_interval: f.frame_interval,
            origin_offset: f.origin_offset,
        },
        gt_out,
    ))
}

/// Slide a window of `window_t` snippets over a long video with the given
/// overlap. The last window is right-aligned to cover the tail. Instances
/// are clipped to each window, shifted into window coordinates, and dropped
/// when their clipped length falls below one snippet.
pub fn window_video<S: Scalar>(
    f: &FeatureSequence<S>,
    gt: &GroundTruth,
    window_t: usize,
    overlap: f64,
) -> Result<Vec<(FeatureSequence<S>, GroundTruth)>> {
    if window_t < 4 {
        return Err(CoreError::config("window_t must be at least 4"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(CoreError::config(format!("overlap {overlap} outside [0,1)")));
    }
    let t = f.t();
    if t <= window_t {
        return Ok(vec![(f.clone(), gt.clone())]);
    }
    let stride = ((window_t as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut offsets = Vec::new();
    let mut off = 0usize;
    while off + window_t <= t {
        offsets.push(off);
        off += stride;
    }
    if offsets.last().map_or(true, |&last| last + window_t < t) {
        offsets.push(t - window_t);
    }
    let c = f.c();
    let mut out = Vec::with_capacity(offsets.len());
    for &o in &offsets {
        let data = f.features.data()[o * c..(o + window_t) * c].to_vec();
        let features = Tensor::new(vec![window_t, c], data)?;
        let instances = gt
            .instances
            .iter()
            .filter_map(|inst| {
                let s = inst.start.max(o as f64) - o as f64;
                let e = inst.end.min((o + window_t) as f64) - o as f64;
                (e - s >= 1.0).then_some(Instance::new(s, e))
            })
            .collect();
        out.push((
            FeatureSequence {
                video_id: f.video_id.clone(),
                features,
                frame_interval: f.frame_interval,
                origin_offset: f.origin_offset + o,
            },
            GroundTruth {
                video_id: gt.video_id.clone(),
                instances,
            },
        ));
    }
    Ok(out)
}

/// Configuration for the synthetic corpus used by the desk-scale tests.
///
/// Background snippets are drawn around cluster mean `-separation/2`, action
/// snippets around `+separation/2` (per channel, unit noise). With some
/// probability an action instance carries an embedded noise segment whose
/// features come from the background cluster but which is still labeled as
/// action.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub t: usize,
    pub c: usize,
    pub instances_per_video: (usize, usize),
    pub instance_len: (usize, usize),
    pub noise_prob: f64,
    pub noise_len: (usize, usize),
    pub separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_videos: 8,
            t: 32,
            c: 32,
            instances_per_video: (1, 2),
            instance_len: (8, 14),
            noise_prob: 0.5,
            noise_len: (3, 6),
            separation: 3.0,
            seed: 7,
        }
    }
}

/// One generated video: features, labels and the indices of embedded
/// noise snippets (background-like features inside an action).
#[derive(Debug, Clone)]
pub struct SynthVideo<S: Scalar> {
    pub features: FeatureSequence<S>,
    pub gt: GroundTruth,
    pub noise_snippets: Vec<usize>,
}

fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller using two uniforms
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a synthetic dataset; a pure function of `spec` (and its seed).
pub fn synth_generate<S: Scalar>(spec: &DatasetSpec) -> Result<Vec<SynthVideo<S>>> {
    if spec.t < 4 {
        return Err(CoreError::config("synthetic T must be at least 4"));
    }
    if spec.instance_len.0 < 2
        || spec.instance_len.0 > spec.instance_len.1
        || spec.instance_len.1 >= spec.t
    {
        return Err(CoreError::config(format!(
            "instance length range {:?} infeasible for T={}",
            spec.instance_len, spec.t
        )));
    }
    if spec.instances_per_video.0 > spec.instances_per_video.1 {
        return Err(CoreError::config("empty instances_per_video range"));
    }
    if !(0.0..=1.0).contains(&spec.noise_prob) {
        return Err(CoreError::config("noise_prob outside [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mu_b = -spec.separation / 2.0;
    let mu_a = spec.separation / 2.0;
    let mut out = Vec::with_capacity(spec.num_videos);
    for vid in 0..spec.num_videos {
        let n_inst = rng.gen_range(spec.instances_per_video.0..=spec.instances_per_video.1);
        // rejection-sample non-overlapping instances
        let mut instances: Vec<(usize, usize)> = Vec::new();
        let mut tries = 0;
        while instances.len() < n_inst && tries < 200 {
            tries += 1;
            let len = rng.gen_range(spec.instance_len.0..=spec.instance_len.1);
            let start = rng.gen_range(0..=spec.t - len);
            let end = start + len;
            if instances.iter().all(|&(s, e)| end <= s || start >= e) {
                instances.push((start, end));
            }
        }
        instances.sort_unstable();
        // per-snippet action flag
        let mut is_action = vec![false; spec.t];
        for &(s, e) in &instances {
            for flag in &mut is_action[s..e] {
                *flag = true;
            }
        }
        // embed noise segments strictly inside instances
        let mut noise_snippets = Vec::new();
        for &(s, e) in &instances {
            if rng.gen_range(0.0..1.0) >= spec.noise_prob {
                continue;
            }
            let interior = e.saturating_sub(s).saturating_sub(2);
            if interior == 0 || spec.noise_len.0 == 0 {
                continue;
            }
            let len = rng
                .gen_range(spec.noise_len.0..=spec.noise_len.1)
                .min(interior);
            let ns = rng.gen_range(s + 1..=e - 1 - len);
            noise_snippets.extend(ns..ns + len);
        }
        let mut data = Vec::with_capacity(spec.t * spec.c);
        for i in 0..spec.t {
            let background_like = !is_action[i] || noise_snippets.contains(&i);
            let mu = if background_like { mu_b } else { mu_a };
            for _ in 0..spec.c {
                data.push(S::from_f64(mu + sample_normal(&mut rng)));
            }
        }
        let video_id = format!("synth_{vid:04}");
        out.push(SynthVideo {
            features: FeatureSequence::new(
                video_id.clone(),
                Tensor::new(vec![spec.t, spec.c], data)?,
                1,
            )?,
            gt: GroundTruth {
                video_id,
                instances: instances
                    .iter()
                    .map(|&(s, e)| Instance::new(s as f64, e as f64))
                    .collect(),
            },
            noise_snippets,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[Vec<f64>]) -> FeatureSequence<f64> {
        FeatureSequence::new("v", Tensor::from_rows(rows), 1).unwrap()
    }

    fn no_gt() -> GroundTruth {
        GroundTruth {
            video_id: "v".into(),
            instances: vec![],
        }
    }

    #[test]
    fn split_concat_roundtrip() {
        let f = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let (g, l) = split_channels(&f).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(l.data(), &[3.0, 4.0, 7.0, 8.0]);
        assert_eq!(concat_channels(&g, &l).unwrap(), f);
    }

    #[test]
    fn split_odd_channels_errors() {
        let f = Tensor::<f64>::zeros(vec![4, 3]);
        assert!(matches!(split_channels(&f), Err(CoreError::Config(_))));
    }

    #[test]
    fn resize_identity_when_same_size() {
        let f = seq(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![0.5, -1.0], vec![0.0, 3.0]]);
        let (r, _) = resize_linear(&f, &no_gt(), 4).unwrap();
        assert_eq!(r.features, f.features);
    }

    #[test]
    fn resize_midpoint() {
        let f = FeatureSequence::<f64> {
            video_id: "v".into(),
            features: Tensor::from_rows(&[vec![0.0], vec![2.0]]),
            frame_interval: 1,
            origin_offset: 0,
        };
        let (r, _) = resize_linear(&f, &no_gt(), 3).unwrap();
        assert_eq!(r.features.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn resize_exact_on_affine_channels() {
        // channel value affine in time stays exact for any target length
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![3.0 * i as f64 + 1.0]).collect();
        let f = seq(&rows);
        for target in [2, 5, 13, 100] {
            let (r, _) = resize_linear(&f, &no_gt(), target).unwrap();
            let scale = 6.0 / (target - 1) as f64;
            for i in 0..target {
                let want = 3.0 * (i as f64 * scale) + 1.0;
                assert!((r.features.at2(i, 0) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn resize_rescales_ground_truth() {
        let f = seq(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]]);
        let gt = GroundTruth {
            video_id: "v".into(),
            instances: vec![Instance::new(1.0, 3.0)],
        };
        let (_, g) = resize_linear(&f, &gt, 8).unwrap();
        assert_eq!(g.instances[0], Instance::new(2.0, 6.0));
    }

    #[test]
    fn window_single_when_fits() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let f = seq(&rows);
        let ws = window_video(&f, &no_gt(), 8, 0.5).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].0.features, f.features);
    }

    #[test]
    fn window_offsets_and_instance_shift() {
        let rows: Vec<Vec<f64>> = (0..192).map(|i| vec![i as f64]).collect();
        let f = seq(&rows);
        let gt = GroundTruth {
            video_id: "v".into(),
            instances: vec![Instance::new(130.0, 140.0)],
        };
        let ws = window_video(&f, &gt, 128, 0.5).unwrap();
        let offsets: Vec<usize> = ws.iter().map(|(w, _)| w.origin_offset).collect();
        assert_eq!(offsets, vec![0, 64]);
        // instance appears only in the second window, shifted by 64
        assert!(ws[0].1.instances.is_empty());
        assert_eq!(ws[1].1.instances, vec![Instance::new(66.0, 76.0)]);
    }

    #[test]
    fn window_covers_every_snippet() {
        for t in [129usize, 150, 200, 255, 256, 300] {
            let rows: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64]).collect();
            let f = seq(&rows);
            let ws = window_video(&f, &no_gt(), 128, 0.5).unwrap();
            let mut covered = vec![false; t];
            for (w, _) in &ws {
                for i in w.origin_offset..w.origin_offset + w.t() {
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&x| x), "gap for T={t}");
        }
    }

    #[test]
    fn synth_deterministic_per_seed() {
        let spec = DatasetSpec::default();
        let a = synth_generate::<f64>(&spec).unwrap();
        let b = synth_generate::<f64>(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.features, y.features.features);
            assert_eq!(x.gt, y.gt);
            assert_eq!(x.noise_snippets, y.noise_snippets);
        }
    }

    #[test]
    fn synth_no_noise_when_probability_zero() {
        let spec = DatasetSpec {
            noise_prob: 0.0,
            ..DatasetSpec::default()
        };
        for v in synth_generate::<f64>(&spec).unwrap() {
            assert!(v.noise_snippets.is_empty());
        }
    }

    #[test]
    fn synth_infeasible_instance_length_errors() {
        let spec = DatasetSpec {
            instance_len: (40, 40),
            t: 32,
            ..DatasetSpec::default()
        };
        assert!(synth_generate::<f64>(&spec).is_err());
    }

    #[test]
    fn synth_instances_respect_invariants() {
        let spec = DatasetSpec {
            num_videos: 20,
            seed: 99,
            ..DatasetSpec::default()
        };
        for v in synth_generate::<f64>(&spec).unwrap() {
            v.gt.validate(spec.t).unwrap();
            // non-overlapping
            let mut sorted = v.gt.instances.clone();
            sorted.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
            for w in sorted.windows(2) {
                assert!(w[0].end <= w[1].start);
            }
        }
    }

    #[test]
    fn zero_separation_is_indistinguishable_to_linear_probe() {
        // least-squares probe on snippet features vs action label
        let spec = DatasetSpec {
            num_videos: 30,
            separation: 0.0,
            noise_prob: 0.0,
            seed: 5,
            ..DatasetSpec::default()
        };
        let videos = synth_generate::<f64>(&spec).unwrap();
        // ridge regression via normal equations on the channel means
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for v in &videos {
            let mut label = vec![0.0; spec.t];
            for inst in &v.gt.instances {
                for i in inst.start as usize..inst.end as usize {
                    label[i] = 1.0;
                }
            }
            for i in 0..spec.t {
                let row: Vec<f64> = (0..spec.c).map(|j| v.features.features.at2(i, j)).collect();
                xs.push(row);
                ys.push(if label[i] > 0.5 { 1.0 } else { -1.0 });
            }
        }
        // w = mean(x*y) per channel (diagonal approximation is enough as a probe)
        let c = spec.c;
        let n = xs.len() as f64;
        let mut w = vec![0.0; c];
        for (x, &y) in xs.iter().zip(&ys) {
            for j in 0..c {
                w[j] += x[j] * y / n;
            }
        }
        let mut correct = 0usize;
        for (x, &y) in xs.iter().zip(&ys) {
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            if (s >= 0.0) == (y > 0.0) {
                correct += 1;
            }
        }
        let acc = correct as f64 / n;
        assert!((acc - 0.5).abs() <= 0.1, "probe accuracy {acc}");
    }

    #[test]
    fn high_separation_is_linearly_separable() {
        let spec = DatasetSpec {
            num_videos: 10,
            separation: 4.0,
            noise_prob: 0.0,
            seed: 5,
            ..DatasetSpec::default()
        };
        let videos = synth_generate::<f64>(&spec).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for v in &videos {
            let mut label = vec![false; spec.t];
            for inst in &v.gt.instances {
                for i in inst.start as usize..inst.end as usize {
                    label[i] = true;
                }
            }
            for i in 0..spec.t {
                let mean: f64 =
                    (0..spec.c).map(|j| v.features.features.at2(i, j)).sum::<f64>() / spec.c as f64;
                if (mean > 0.0) == label[i] {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.9);
    }
}
