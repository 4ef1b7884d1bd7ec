//! The cleansing core: susceptibility scoring from denoised variants,
//! top-beta removal, retraining orchestration, the three metrics, and an
//! optional spectral-signature baseline for comparison.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::attacks::TestTrigger;
use crate::dataio::{LabeledDataset, PoisonMask};
use crate::denoise::{median_denoise, nlm_denoise, MedianParams, NlmParams};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, TrainConfig};

/// Which samples are scored and eligible for removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    WholeDataset,
    SingleClass(usize),
}

/// Which denoised variants feed the score (the single-baseline ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// s = |v - v1|_1 + |v - v2|_1 (NLM and median variants).
    Both,
    /// Median variant only: s = |v - v2|_1.
    MedianOnly,
    /// NLM variant only: s = |v - v1|_1.
    MeanOnly,
}

impl ScoreMode {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMode::Both => "both",
            ScoreMode::MedianOnly => "median-only",
            ScoreMode::MeanOnly => "mean-only",
        }
    }
}

/// Cleansing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanseConfig {
    /// Fraction of in-scope samples removed, in [0,1].
    pub beta: f64,
    pub scope: Scope,
    pub nlm: NlmParams,
    pub median: MedianParams,
    pub score_mode: ScoreMode,
}

impl CleanseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0,1]", self.beta)));
        }
        Ok(())
    }
}

impl Default for CleanseConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            scope: Scope::WholeDataset,
            nlm: NlmParams::default(),
            median: MedianParams::default(),
            score_mode: ScoreMode::Both,
        }
    }
}

/// One scored sample: the susceptibility and the three softmax vectors that
/// produced it (original, NLM variant, median variant).
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityRecord {
    pub sample_index: usize,
    pub score: f64,
    pub v: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Scores every in-scope sample with the pre-clean model: denoise with both
/// filters, run the three forward passes, and take L1 softmax distances.
/// Output order equals dataset order; scoring is pure per sample, so results
/// are bitwise independent of the parallelism degree.
pub fn score_dataset(
    ds: &LabeledDataset,
    params: &ModelParams,
    cfg: &CleanseConfig,
) -> Result<Vec<SusceptibilityRecord>> {
    cfg.validate()?;
    if !params.trained {
        return Err(Error::Usage("scoring requires a trained model".into()));
    }
    let in_scope: Vec<usize> = match cfg.scope {
        Scope::WholeDataset => (0..ds.len()).collect(),
        Scope::SingleClass(class) => {
            if class >= ds.num_classes {
                return Err(Error::Config(format!(
                    "scope class {class} >= num_classes {}",
                    ds.num_classes
                )));
            }
            ds.class_indices(class)
        }
    };
    in_scope
        .par_iter()
        .map(|&i| {
            let img = &ds.images[i];
            let variant_nlm = nlm_denoise(img, &cfg.nlm);
            let variant_median = median_denoise(img, &cfg.median);
            let v = model::forward_softmax(params, img)?;
            let v1 = model::forward_softmax(params, &variant_nlm)?;
            let v2 = model::forward_softmax(params, &variant_median)?;
            let score = match cfg.score_mode {
                ScoreMode::Both => l1_distance(&v, &v1) + l1_distance(&v, &v2),
                ScoreMode::MeanOnly => l1_distance(&v, &v1),
                ScoreMode::MedianOnly => l1_distance(&v, &v2),
            };
            Ok(SusceptibilityRecord { sample_index: i, score, v, v1, v2 })
        })
        .collect()
}

/// Removes the floor(beta * n_scope) highest-scoring samples. Ties break
/// toward the lower sample index (removed preferentially). Returns the
/// sanitized dataset, the realigned mask, and the removed indices sorted
/// ascending.
pub fn remove_top(
    ds: &LabeledDataset,
    mask: Option<&PoisonMask>,
    records: &[SusceptibilityRecord],
    cfg: &CleanseConfig,
) -> Result<(LabeledDataset, Option<PoisonMask>, Vec<usize>)> {
    cfg.validate()?;
    let n_scope = records.len();
    let count = ((cfg.beta * n_scope as f64).floor() as usize).min(n_scope);
    let mut order: Vec<&SusceptibilityRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| a.sample_index.cmp(&b.sample_index))
    });
    let mut removed: Vec<usize> = order[..count].iter().map(|r| r.sample_index).collect();
    removed.sort_unstable();

    let mut keep = vec![true; ds.len()];
    for &i in &removed {
        if i >= ds.len() {
            return Err(Error::Shape(format!("record index {i} outside dataset")));
        }
        keep[i] = false;
    }
    let images = ds
        .images
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(img, _)| img.clone())
        .collect();
    let labels =
        ds.labels.iter().zip(&keep).filter(|(_, &k)| k).map(|(&l, _)| l).collect();
    let sanitized = LabeledDataset::new(images, labels, ds.num_classes)?;
    let new_mask = mask.map(|m| {
        let flags = m.flags.iter().zip(&keep).filter(|(_, &k)| k).map(|(&f, _)| f).collect();
        PoisonMask::new(flags, m.target_class, m.attack_name.clone())
    });
    Ok((sanitized, new_mask, removed))
}

/// Backdoor detection rate: |removed ∩ flagged| / |flagged|.
pub fn compute_bdr(removed: &[usize], mask: &PoisonMask) -> Result<f64> {
    let flagged = mask.flagged_count();
    if flagged == 0 {
        return Err(Error::UndefinedMetric("BDR is undefined with zero flagged samples".into()));
    }
    let hit = removed.iter().filter(|&&i| i < mask.flags.len() && mask.flags[i]).count();
    Ok(hit as f64 / flagged as f64)
}

/// Attack success rate: the trigger is applied to every test image whose true
/// label differs from the target, and the fraction predicted as the target is
/// returned.
pub fn compute_asr(
    params: &ModelParams,
    clean_test: &LabeledDataset,
    trigger: &TestTrigger,
    target_class: usize,
) -> Result<f64> {
    if !params.trained {
        return Err(Error::Usage("ASR requires a trained model".into()));
    }
    let eligible: Vec<usize> =
        (0..clean_test.len()).filter(|&i| clean_test.labels[i] != target_class).collect();
    if eligible.is_empty() {
        return Err(Error::UndefinedMetric("no test images outside the target class".into()));
    }
    let hits: usize = eligible
        .par_iter()
        .map(|&i| {
            let triggered = trigger.apply(&clean_test.images[i])?;
            Ok((model::predict(params, &triggered)? == target_class) as usize)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / eligible.len() as f64)
}

/// Test-time attack description for ASR measurement.
#[derive(Debug, Clone)]
pub struct AttackContext {
    pub test_trigger: TestTrigger,
    pub target_class: usize,
}

/// Metrics before and after cleansing plus the run configuration echo.
#[derive(Debug, Clone)]
pub struct CleanseReport {
    pub attack_name: String,
    pub target_class: Option<usize>,
    pub beta: f64,
    pub scope: Scope,
    pub score_mode: ScoreMode,
    pub n_train: usize,
    pub n_scope: usize,
    pub removed_count: usize,
    pub bdr: Option<f64>,
    pub acc_pre: f64,
    pub acc_post: f64,
    pub asr_pre: Option<f64>,
    pub asr_post: Option<f64>,
    /// Path of the persisted per-sample score table, once written.
    pub score_table: Option<String>,
}

impl CleanseReport {
    /// Flat key=value serialization; field order is fixed so identical runs
    /// produce identical bytes.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("attack", self.attack_name.clone());
        if let Some(t) = self.target_class {
            push("target_class", t.to_string());
        }
        push("beta", format!("{:.6}", self.beta));
        push(
            "scope",
            match self.scope {
                Scope::WholeDataset => "whole".to_string(),
                Scope::SingleClass(c) => format!("class:{c}"),
            },
        );
        push("score_mode", self.score_mode.name().to_string());
        push("n_train", self.n_train.to_string());
        push("n_scope", self.n_scope.to_string());
        push("removed_count", self.removed_count.to_string());
        if let Some(b) = self.bdr {
            push("bdr", format!("{b:.6}"));
        }
        push("acc_pre", format!("{:.6}", self.acc_pre));
        push("acc_post", format!("{:.6}", self.acc_post));
        if let Some(a) = self.asr_pre {
            push("asr_pre", format!("{a:.6}"));
        }
        if let Some(a) = self.asr_post {
            push("asr_post", format!("{a:.6}"));
        }
        if let Some(t) = &self.score_table {
            push("score_table", t.clone());
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path.as_ref())?);
        f.write_all(self.to_key_values().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Everything a full pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub report: CleanseReport,
    pub records: Vec<SusceptibilityRecord>,
    pub pre_model: ModelParams,
    pub post_model: ModelParams,
    pub sanitized: LabeledDataset,
    pub sanitized_mask: Option<PoisonMask>,
    pub removed: Vec<usize>,
}

/// The full pipeline: pre-clean training, scoring, removal, retraining from a
/// fresh initialization with the same seeds, and metric computation.
pub fn run_ultraclean(
    ds: &LabeledDataset,
    mask: Option<&PoisonMask>,
    test_set: &LabeledDataset,
    attack: Option<&AttackContext>,
    train_cfg: &TrainConfig,
    cleanse_cfg: &CleanseConfig,
    model_seed: u64,
) -> Result<PipelineResult> {
    cleanse_cfg.validate()?;
    let shape = ds
        .sample_shape()
        .ok_or_else(|| Error::Usage("cannot run the pipeline on an empty dataset".into()))?;

    let fresh = model::init(shape, ds.num_classes, model_seed)?;
    let (pre_model, _) = model::train(&fresh, ds, train_cfg)?;
    let acc_pre = model::evaluate(&pre_model, test_set)?;
    let asr_pre = match attack {
        Some(ctx) => Some(compute_asr(&pre_model, test_set, &ctx.test_trigger, ctx.target_class)?),
        None => None,
    };

    let records = score_dataset(ds, &pre_model, cleanse_cfg)?;
    let (sanitized, sanitized_mask, removed) = remove_top(ds, mask, &records, cleanse_cfg)?;
    let bdr = match mask {
        Some(m) if m.flagged_count() > 0 => Some(compute_bdr(&removed, m)?),
        _ => None,
    };

    let fresh_post = model::init(shape, ds.num_classes, model_seed)?;
    let (post_model, _) = model::train(&fresh_post, &sanitized, train_cfg)?;
    let acc_post = model::evaluate(&post_model, test_set)?;
    let asr_post = match attack {
        Some(ctx) => {
            Some(compute_asr(&post_model, test_set, &ctx.test_trigger, ctx.target_class)?)
        }
        None => None,
    };

    let report = CleanseReport {
        attack_name: mask.map(|m| m.attack_name.clone()).unwrap_or_else(|| "none".into()),
        target_class: attack
            .map(|c| c.target_class)
            .or_else(|| mask.map(|m| m.target_class)),
        beta: cleanse_cfg.beta,
        scope: cleanse_cfg.scope,
        score_mode: cleanse_cfg.score_mode,
        n_train: ds.len(),
        n_scope: records.len(),
        removed_count: removed.len(),
        bdr,
        acc_pre,
        acc_post,
        asr_pre,
        asr_post,
        score_table: None,
    };
    Ok(PipelineResult {
        report,
        records,
        pre_model,
        post_model,
        sanitized,
        sanitized_mask,
        removed,
    })
}

/// Score-table CSV: header `index,score,label,flagged`, one row per in-scope
/// sample in dataset order, scores with 9 significant digits.
pub fn write_score_csv(
    records: &[SusceptibilityRecord],
    ds: &LabeledDataset,
    mask: Option<&PoisonMask>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    writeln!(out, "index,score,label,flagged")?;
    for rec in records {
        let i = rec.sample_index;
        let flagged = mask.map(|m| m.flags[i] as u8).unwrap_or(0);
        writeln!(out, "{},{:.8e},{},{}", i, rec.score, ds.labels[i], flagged)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Spectral-signature baseline
// ---------------------------------------------------------------------------

/// Scores one class's feature vectors: squared projection of each centered
/// feature onto the top right singular vector of the centered matrix
/// (computed by power iteration on A^T A via A^T (A v)).
pub fn spectral_scores_from_features(features: &[Vec<f64>]) -> Vec<f64> {
    let n = features.len();
    let dim = features[0].len();
    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // Deterministic start vector; 100 iterations is plenty at these sizes.
    let mut v: Vec<f64> = (0..dim).map(|i| ((i * 2654435761 + 1) % 1000) as f64 / 1000.0 + 0.5).collect();
    normalize(&mut v);
    for _ in 0..100 {
        let proj: Vec<f64> = centered.iter().map(|row| dot(row, &v)).collect();
        let mut next = vec![0.0f64; dim];
        for (row, &p) in centered.iter().zip(&proj) {
            for (nv, rv) in next.iter_mut().zip(row) {
                *nv += p * rv;
            }
        }
        if normalize(&mut next) == 0.0 {
            return vec![0.0; n]; // centered matrix is zero
        }
        v = next;
    }
    centered.iter().map(|row| dot(row, &v).powi(2)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Per-sample spectral-signature scores over the whole dataset, computed
/// class by class on the penultimate features.
pub fn spectral_baseline_score(ds: &LabeledDataset, params: &ModelParams) -> Result<Vec<f64>> {
    if !params.trained {
        return Err(Error::Usage("spectral baseline requires a trained model".into()));
    }
    let features: Vec<Vec<f64>> = ds
        .images
        .par_iter()
        .map(|img| model::features(params, img))
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0f64; ds.len()];
    for class in 0..ds.num_classes {
        let members = ds.class_indices(class);
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Usage(format!(
                "class {class} has fewer than 2 samples; spectral scores undefined"
            )));
        }
        let class_features: Vec<Vec<f64>> =
            members.iter().map(|&i| features[i].clone()).collect();
        let class_scores = spectral_scores_from_features(&class_features);
        for (&i, s) in members.iter().zip(class_scores) {
            scores[i] = s;
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{
        build_poisoned_dataset, AttackSpec, Placement, PoisonAmount, PoisonPlan, TriggerSpec,
    };
    use crate::dataio::{generate_synthetic, Image};
    use crate::model::init;

    fn trainable(seed: u64) -> (LabeledDataset, ModelParams) {
        let ds = generate_synthetic(seed, 15, 4, 16).unwrap();
        let params = init((16, 16, 3), 4, seed).unwrap();
        let cfg = TrainConfig { epochs: 3, rng_seed: seed, ..TrainConfig::default() };
        let (m, _) = model::train(&params, &ds, &cfg).unwrap();
        (ds, m)
    }

    fn quick_cfg() -> CleanseConfig {
        CleanseConfig {
            nlm: NlmParams::new(1, 2, 10.0, 10.0).unwrap(),
            ..CleanseConfig::default()
        }
    }

    #[test]
    fn constant_image_scores_zero() {
        let (_, model) = trainable(1);
        let images = vec![Image::constant(16, 16, 3, 0.5); 3];
        let ds = LabeledDataset::new(images, vec![0, 1, 2], 4).unwrap();
        let records = score_dataset(&ds, &model, &quick_cfg()).unwrap();
        for rec in &records {
            assert!(rec.score.abs() < 1e-12, "score {}", rec.score);
            assert_eq!(rec.v, rec.v1);
            assert_eq!(rec.v, rec.v2);
        }
    }

    #[test]
    fn scores_bounded_and_recomputable() {
        let (ds, model) = trainable(2);
        let records = score_dataset(&ds, &model, &quick_cfg()).unwrap();
        assert_eq!(records.len(), ds.len());
        for rec in &records {
            assert!(rec.score >= 0.0 && rec.score <= 4.0);
            // Independent recomputation from the stored vectors.
            let mut s = 0.0f64;
            for k in 0..rec.v.len() {
                s += (rec.v[k] - rec.v1[k]).abs();
            }
            for k in 0..rec.v.len() {
                s += (rec.v[k] - rec.v2[k]).abs();
            }
            assert!((s - rec.score).abs() < 1e-9);
        }
        // Output order is dataset order.
        for (k, rec) in records.iter().enumerate() {
            assert_eq!(rec.sample_index, k);
        }
    }

    #[test]
    fn score_modes_drop_one_term() {
        let (ds, model) = trainable(3);
        let both = score_dataset(&ds, &model, &quick_cfg()).unwrap();
        let mean_only = score_dataset(
            &ds,
            &model,
            &CleanseConfig { score_mode: ScoreMode::MeanOnly, ..quick_cfg() },
        )
        .unwrap();
        let median_only = score_dataset(
            &ds,
            &model,
            &CleanseConfig { score_mode: ScoreMode::MedianOnly, ..quick_cfg() },
        )
        .unwrap();
        for ((b, me), md) in both.iter().zip(&mean_only).zip(&median_only) {
            assert!((me.score - l1_distance(&b.v, &b.v1)).abs() < 1e-12);
            assert!((md.score - l1_distance(&b.v, &b.v2)).abs() < 1e-12);
            assert!((b.score - (me.score + md.score)).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_model_cannot_score() {
        let ds = generate_synthetic(4, 5, 2, 16).unwrap();
        let params = init((16, 16, 3), 2, 1).unwrap();
        assert!(score_dataset(&ds, &params, &quick_cfg()).is_err());
    }

    #[test]
    fn single_class_scope_restricts_records() {
        let (ds, model) = trainable(5);
        let cfg = CleanseConfig { scope: Scope::SingleClass(2), ..quick_cfg() };
        let records = score_dataset(&ds, &model, &cfg).unwrap();
        assert_eq!(records.len(), 15);
        assert!(records.iter().all(|r| ds.labels[r.sample_index] == 2));
    }

    fn fake_records(scores: &[f64]) -> Vec<SusceptibilityRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| SusceptibilityRecord {
                sample_index: i,
                score: s,
                v: vec![],
                v1: vec![],
                v2: vec![],
            })
            .collect()
    }

    fn dummy_dataset(n: usize) -> LabeledDataset {
        let images = vec![Image::constant(16, 16, 3, 0.5); n];
        LabeledDataset::new(images, vec![0; n], 2).unwrap()
    }

    #[test]
    fn removal_count_is_floored() {
        let n = 4772usize;
        let records = fake_records(&vec![1.0; n]);
        let ds = dummy_dataset(n);
        let cfg = CleanseConfig { beta: 0.3, ..quick_cfg() };
        let (sanitized, _, removed) = remove_top(&ds, None, &records, &cfg).unwrap();
        assert_eq!(removed.len(), 1431);
        assert_eq!(sanitized.len(), n - 1431);
    }

    #[test]
    fn beta_zero_removes_nothing() {
        let records = fake_records(&[0.5, 0.9, 0.1]);
        let ds = dummy_dataset(3);
        let cfg = CleanseConfig { beta: 0.0, ..quick_cfg() };
        let (sanitized, _, removed) = remove_top(&ds, None, &records, &cfg).unwrap();
        assert!(removed.is_empty());
        assert_eq!(sanitized.len(), 3);
    }

    #[test]
    fn ties_remove_lower_index_first() {
        let records = fake_records(&[0.5, 0.5, 0.5, 0.5]);
        let ds = dummy_dataset(4);
        let cfg = CleanseConfig { beta: 0.5, ..quick_cfg() };
        let (_, _, removed) = remove_top(&ds, None, &records, &cfg).unwrap();
        assert_eq!(removed, vec![0, 1]);
    }

    #[test]
    fn removal_matches_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.gen_range(1..60);
            let beta: f64 = rng.gen_range(0.0..=1.0);
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let records = fake_records(&scores);
            let ds = dummy_dataset(n);
            let cfg = CleanseConfig { beta, ..quick_cfg() };
            let (_, _, removed) = remove_top(&ds, None, &records, &cfg).unwrap();
            // Oracle: stable sort of (score desc, index asc), take floor(beta n).
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let k = ((beta * n as f64).floor() as usize).min(n);
            let mut expect = idx[..k].to_vec();
            expect.sort_unstable();
            assert_eq!(removed, expect);
        }
    }

    #[test]
    fn mask_realignment_preserves_flags() {
        let records = fake_records(&[0.9, 0.1, 0.8, 0.2]);
        let ds = dummy_dataset(4);
        let mask = PoisonMask::new(vec![true, false, true, false], 0, "badnets");
        let cfg = CleanseConfig { beta: 0.5, ..quick_cfg() };
        let (sanitized, new_mask, removed) = remove_top(&ds, Some(&mask), &records, &cfg).unwrap();
        assert_eq!(removed, vec![0, 2]);
        assert_eq!(sanitized.len(), 2);
        assert_eq!(new_mask.unwrap().flags, vec![false, false]);
    }

    #[test]
    fn bdr_definition() {
        let mask = PoisonMask::new(
            (0..100).map(|i| i < 100).collect::<Vec<bool>>(),
            0,
            "x",
        );
        let removed: Vec<usize> = (0..50).collect();
        assert_eq!(compute_bdr(&removed, &mask).unwrap(), 0.5);
        let all: Vec<usize> = (0..100).collect();
        assert_eq!(compute_bdr(&all, &mask).unwrap(), 1.0);
        let none: Vec<usize> = vec![];
        assert_eq!(compute_bdr(&none, &mask).unwrap(), 0.0);
    }

    #[test]
    fn bdr_undefined_without_flags() {
        let mask = PoisonMask::new(vec![false; 10], 0, "x");
        assert!(compute_bdr(&[1, 2], &mask).is_err());
    }

    #[test]
    fn asr_extremes_and_recount() {
        let ds = generate_synthetic(6, 10, 4, 16).unwrap();
        let trigger = TestTrigger::Patch(TriggerSpec::checkerboard(3, Placement::BottomRight));
        // Constant predictor: always target -> ASR 1; never target -> ASR 0.
        let mut always = init((16, 16, 3), 4, 1).unwrap();
        always.fc_b[1] = 100.0;
        always.trained = true;
        assert_eq!(compute_asr(&always, &ds, &trigger, 1).unwrap(), 1.0);
        assert_eq!(compute_asr(&always, &ds, &trigger, 2).unwrap(), 0.0);

        let (ds2, model) = trainable(7);
        let asr = compute_asr(&model, &ds2, &trigger, 0).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for i in 0..ds2.len() {
            if ds2.labels[i] == 0 {
                continue;
            }
            total += 1;
            let t = trigger.apply(&ds2.images[i]).unwrap();
            if model::predict(&model, &t).unwrap() == 0 {
                hits += 1;
            }
        }
        assert_eq!(asr, hits as f64 / total as f64);
    }

    #[test]
    fn asr_requires_eligible_images() {
        let images = vec![Image::constant(16, 16, 3, 0.5); 3];
        let ds = LabeledDataset::new(images, vec![1, 1, 1], 2).unwrap();
        let mut m = init((16, 16, 3), 2, 1).unwrap();
        m.trained = true;
        let trigger = TestTrigger::Patch(TriggerSpec::checkerboard(3, Placement::BottomRight));
        assert!(compute_asr(&m, &ds, &trigger, 1).is_err());
    }

    #[test]
    fn beta_zero_pipeline_is_identity_with_shared_seeds() {
        let ds = generate_synthetic(8, 12, 3, 16).unwrap();
        let test = generate_synthetic(9, 6, 3, 16).unwrap();
        let plan = PoisonPlan {
            attack: AttackSpec::BadNets {
                trigger: TriggerSpec::checkerboard(3, Placement::BottomRight),
            },
            target_class: 0,
            amount: PoisonAmount::Fraction(0.1),
            rng_seed: 3,
        };
        let (poisoned, mask) = build_poisoned_dataset(&ds, &plan, None).unwrap();
        let ctx = AttackContext {
            test_trigger: TestTrigger::Patch(TriggerSpec::checkerboard(
                3,
                Placement::BottomRight,
            )),
            target_class: 0,
        };
        let train_cfg = TrainConfig { epochs: 2, rng_seed: 5, ..TrainConfig::default() };
        let cfg = CleanseConfig { beta: 0.0, ..quick_cfg() };
        let result =
            run_ultraclean(&poisoned, Some(&mask), &test, Some(&ctx), &train_cfg, &cfg, 11)
                .unwrap();
        assert_eq!(result.report.removed_count, 0);
        assert_eq!(result.report.acc_pre, result.report.acc_post);
        assert_eq!(result.report.asr_pre, result.report.asr_post);
        assert_eq!(result.pre_model, result.post_model);
    }

    #[test]
    fn report_round_trips_key_values() {
        let report = CleanseReport {
            attack_name: "badnets".into(),
            target_class: Some(0),
            beta: 0.3,
            scope: Scope::WholeDataset,
            score_mode: ScoreMode::Both,
            n_train: 100,
            n_scope: 100,
            removed_count: 30,
            bdr: Some(0.9),
            acc_pre: 0.95,
            acc_post: 0.94,
            asr_pre: Some(0.99),
            asr_post: Some(0.01),
            score_table: Some("scores.csv".into()),
        };
        let text = report.to_key_values();
        assert!(text.contains("removed_count=30"));
        assert!(text.contains("bdr=0.900000"));
        assert!(text.contains("scope=whole"));
    }

    #[test]
    fn spectral_zero_for_identical_features() {
        let features = vec![vec![1.0, 2.0, 3.0]; 8];
        let scores = spectral_scores_from_features(&features);
        assert!(scores.iter().all(|&s| s.abs() < 1e-18));
    }

    #[test]
    fn spectral_invariant_to_constant_shift() {
        let features: Vec<Vec<f64>> =
            (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1, 1.0]).collect();
        let base = spectral_scores_from_features(&features);
        let shifted: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().map(|v| v + 7.5).collect())
            .collect();
        let out = spectral_scores_from_features(&shifted);
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6 * a.max(1.0));
        }
    }

    #[test]
    fn spectral_isolates_minority_cluster() {
        // 30 points near the origin, 10 points offset along a fixed direction.
        let mut features = Vec::new();
        for i in 0..30 {
            features.push(vec![0.01 * (i % 5) as f64, 0.02 * (i % 3) as f64, 0.0, 0.0]);
        }
        for i in 0..10 {
            features.push(vec![3.0 + 0.01 * i as f64, 3.0, 3.0, 3.0]);
        }
        let scores = spectral_scores_from_features(&features);
        let mut idx: Vec<usize> = (0..40).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let top10: Vec<usize> = idx[..10].to_vec();
        assert!(top10.iter().all(|&i| i >= 30), "top-10 {top10:?}");
    }

    #[test]
    fn spectral_rejects_tiny_classes() {
        let images = vec![Image::constant(16, 16, 3, 0.5); 3];
        let ds = LabeledDataset::new(images, vec![0, 0, 1], 2).unwrap();
        let mut m = init((16, 16, 3), 2, 1).unwrap();
        m.trained = true;
        assert!(spectral_baseline_score(&ds, &m).is_err());
    }
}
