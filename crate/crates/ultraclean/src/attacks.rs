//! Poisoned-dataset generation for the six canonical backdoor attacks.
//!
//! Dirty-label attacks (BadNets, Blended, Trojan) relabel victims from
//! non-target classes to the target; clean-label attacks (SIG, LCBD, HTBD)
//! keep true labels and rely on imperceptible modification. Every generator
//! is deterministic given its inputs and the plan's RNG seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Image, LabeledDataset, PoisonMask};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, Objective};

// ---------------------------------------------------------------------------
// Triggers
// ---------------------------------------------------------------------------

/// Where a patch trigger lands on the target image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    At { row: usize, col: usize },
}

/// A patch trigger: pattern pixels, per-pixel mask weights in [0,1], and a
/// placement. The mask is shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub pattern: Image,
    pub mask: Vec<f32>,
    pub placement: Placement,
}

impl TriggerSpec {
    pub fn new(pattern: Image, mask: Vec<f32>, placement: Placement) -> Result<Self> {
        if mask.len() != pattern.height * pattern.width {
            return Err(Error::Shape(format!(
                "mask length {} != pattern {}x{}",
                mask.len(),
                pattern.height,
                pattern.width
            )));
        }
        if !mask.iter().all(|m| (0.0..=1.0).contains(m)) {
            return Err(Error::Config("mask weights must be in [0,1]".into()));
        }
        Ok(Self { pattern, mask, placement })
    }

    /// Fully-masked pattern (M = 1 everywhere on the patch).
    pub fn opaque(pattern: Image, placement: Placement) -> Self {
        let mask = vec![1.0; pattern.height * pattern.width];
        Self { pattern, mask, placement }
    }

    /// Alternating white/black cells, white at the patch origin.
    pub fn checkerboard(size: usize, placement: Placement) -> Self {
        let mut pattern = Image::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                if (y + x) % 2 == 0 {
                    for c in 0..3 {
                        pattern.set(y, x, c, 1.0);
                    }
                }
            }
        }
        Self::opaque(pattern, placement)
    }

    /// Solid square of one value.
    pub fn solid_square(size: usize, value: f32, placement: Placement) -> Self {
        Self::opaque(Image::constant(size, size, 3, value.clamp(0.0, 1.0)), placement)
    }

    /// Seeded uniform-noise pattern.
    pub fn noise_pattern(size: usize, seed: u64, placement: Placement) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Self::opaque(Image::new(size, size, 3, data).expect("in-range noise"), placement)
    }

    /// Loads the pattern from a P6 PPM file; the mask is all ones.
    pub fn from_ppm(path: impl AsRef<std::path::Path>, placement: Placement) -> Result<Self> {
        Ok(Self::opaque(crate::dataio::import_ppm(path)?, placement))
    }

    /// Top-left corner of the patch on an image of the given size.
    pub fn resolve(&self, img_h: usize, img_w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (self.pattern.height, self.pattern.width);
        if ph > img_h || pw > img_w {
            return Err(Error::Config(format!(
                "trigger {ph}x{pw} does not fit a {img_h}x{img_w} image"
            )));
        }
        let (row, col) = match self.placement {
            Placement::TopLeft => (0, 0),
            Placement::TopRight => (0, img_w - pw),
            Placement::BottomLeft => (img_h - ph, 0),
            Placement::BottomRight => (img_h - ph, img_w - pw),
            Placement::At { row, col } => (row, col),
        };
        if row + ph > img_h || col + pw > img_w {
            return Err(Error::Config(format!(
                "trigger placed at ({row},{col}) exceeds a {img_h}x{img_w} image"
            )));
        }
        Ok((row, col))
    }

    fn pattern_value(&self, py: usize, px: usize, c: usize) -> f32 {
        self.pattern.get(py, px, c.min(self.pattern.channels - 1))
    }
}

/// Masked replacement: out = clamp(img (1-M) + T M).
pub fn apply_patch(img: &Image, spec: &TriggerSpec) -> Result<Image> {
    let (h, w, channels) = img.shape();
    let (row0, col0) = spec.resolve(h, w)?;
    let mut out = img.clone();
    for py in 0..spec.pattern.height {
        for px in 0..spec.pattern.width {
            let m = spec.mask[py * spec.pattern.width + px];
            if m == 0.0 {
                continue;
            }
            for c in 0..channels {
                let bg = img.get(row0 + py, col0 + px, c);
                let t = spec.pattern_value(py, px, c);
                out.set(row0 + py, col0 + px, c, bg * (1.0 - m) + t * m);
            }
        }
    }
    Ok(out)
}

/// Whole-image blend: out = clamp(alpha T + (1-alpha) img).
pub fn blend(img: &Image, trigger: &Image, alpha: f64) -> Result<Image> {
    if img.shape() != trigger.shape() {
        return Err(Error::Shape(format!(
            "blend shapes differ: {:?} vs {:?}",
            img.shape(),
            trigger.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    let raw: Vec<f64> = img
        .data()
        .iter()
        .zip(trigger.data())
        .map(|(&b, &t)| alpha * t as f64 + (1.0 - alpha) * b as f64)
        .collect();
    let (h, w, c) = img.shape();
    Ok(Image::from_clamped(h, w, c, &raw))
}

// ---------------------------------------------------------------------------
// SIG
// ---------------------------------------------------------------------------

/// Sinusoidal trigger: amplitude in 0–255 units and horizontal frequency in
/// cycles per image width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigSpec {
    pub delta: f64,
    pub freq: usize,
}

impl SigSpec {
    pub fn new(delta: f64, freq: usize) -> Result<Self> {
        if delta < 0.0 {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        if freq < 1 {
            return Err(Error::Config("freq must be >= 1".into()));
        }
        Ok(Self { delta, freq })
    }
}

/// Signed offset field T(i,j) = (delta/255) sin(2 pi j f / m); constant along
/// rows, |T| <= delta/255 everywhere.
pub fn sig_field(rows: usize, cols: usize, spec: &SigSpec) -> Vec<f64> {
    let amplitude = spec.delta / 255.0;
    let mut field = vec![0.0f64; rows * cols];
    for j in 0..cols {
        let v = amplitude
            * (2.0 * std::f64::consts::PI * (j * spec.freq) as f64 / cols as f64).sin();
        for i in 0..rows {
            field[i * cols + j] = v;
        }
    }
    field
}

/// Adds the sinusoidal field to every channel and clamps.
pub fn sig_apply(img: &Image, spec: &SigSpec) -> Image {
    let (h, w, c) = img.shape();
    let field = sig_field(h, w, spec);
    let mut raw = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let offset = field[y * w + x];
            for ch in 0..c {
                raw[(y * w + x) * c + ch] = img.get(y, x, ch) as f64 + offset;
            }
        }
    }
    Image::from_clamped(h, w, c, &raw)
}

// ---------------------------------------------------------------------------
// Optimization budgets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    LInf,
}

/// Perturbation budget for the PGD-style attacks. `epsilon` and `step_size`
/// are quoted in 0–255 units and divided by 255 at the pixel boundary; the
/// L2 norm is taken over the flattened image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub norm: Norm,
    pub steps: usize,
    pub step_size: f64,
}

/// Budget presets mirroring the common evaluation grids.
pub const L2_EPSILON_PRESETS: [f64; 3] = [300.0, 600.0, 1200.0];
pub const LINF_EPSILON_PRESETS: [f64; 3] = [8.0, 16.0, 32.0];

impl AttackBudget {
    pub fn new(epsilon: f64, norm: Norm, steps: usize, step_size: f64) -> Result<Self> {
        if epsilon < 0.0 {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        if steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(step_size > 0.0) {
            return Err(Error::Config("step_size must be > 0".into()));
        }
        Ok(Self { epsilon, norm, steps, step_size })
    }

    /// L-infinity budget with the default 40-step schedule.
    pub fn linf(epsilon: f64) -> Self {
        Self { epsilon, norm: Norm::LInf, steps: 40, step_size: epsilon / 40.0 * 2.5 }
    }

    /// L2 budget with the default 40-step schedule.
    pub fn l2(epsilon: f64) -> Self {
        Self { epsilon, norm: Norm::L2, steps: 40, step_size: epsilon / 40.0 * 2.5 }
    }

    /// HTBD default: tight L-infinity ball, many small steps.
    pub fn htbd_default() -> Self {
        Self { epsilon: 16.0, norm: Norm::LInf, steps: 200, step_size: 1.0 }
    }
}

fn require_trained(model: &ModelParams) -> Result<()> {
    if !model.trained {
        return Err(Error::Usage("attack requires a trained model".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// LCBD (adversarial-example variant)
// ---------------------------------------------------------------------------

/// PGD ascent on the cross-entropy of the true label, then the patch trigger.
///
/// The perturbation is projected after every step: per-coordinate clamping
/// for L-infinity, rescaling onto the ball for L2, followed by the [0,1]
/// domain clamp. The returned image satisfies the budget exactly in f32.
pub fn lcbd_ae_poison(
    img: &Image,
    label: usize,
    model: &ModelParams,
    budget: &AttackBudget,
    trigger: &TriggerSpec,
) -> Result<Image> {
    let adv = lcbd_perturb(img, label, model, budget)?;
    apply_patch(&adv, trigger)
}

/// The hard-to-classify image before the trigger overlay; exposed so the
/// projection and ascent properties can be tested in isolation.
pub fn lcbd_perturb(
    img: &Image,
    label: usize,
    model: &ModelParams,
    budget: &AttackBudget,
) -> Result<Image> {
    require_trained(model)?;
    let (h, w, c) = img.shape();
    let eps = budget.epsilon / 255.0;
    let alpha = budget.step_size / 255.0;
    let x0: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut delta = vec![0.0f64; x0.len()];
    for _ in 0..budget.steps {
        let current = Image::from_clamped(h, w, c, &add(&x0, &delta));
        let grad = model::input_gradient(model, &current, &Objective::LabelLoss { label })?;
        match budget.norm {
            Norm::LInf => {
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d += alpha * g.signum();
                    *d = d.clamp(-eps, eps);
                }
            }
            Norm::L2 => {
                let gnorm = l2_norm(&grad);
                if gnorm > 0.0 {
                    for (d, g) in delta.iter_mut().zip(&grad) {
                        *d += alpha * g / gnorm;
                    }
                }
                let dnorm = l2_norm(&delta);
                if dnorm > eps {
                    let scale = eps / dnorm;
                    delta.iter_mut().for_each(|d| *d *= scale);
                }
            }
        }
        // Keep x0 + delta inside the pixel domain.
        for (d, &x) in delta.iter_mut().zip(&x0) {
            *d = (x + *d).clamp(0.0, 1.0) - x;
        }
    }
    let mut out = Image::from_clamped(h, w, c, &add(&x0, &delta));
    if budget.norm == Norm::LInf {
        clamp_linf_f32(&mut out, img, eps as f32);
    }
    Ok(out)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Re-clamps in f32 space so the L-infinity bound holds exactly after the
/// f64 -> f32 conversion: rounded interval endpoints can overshoot by an
/// ulp, so nudge back toward the anchor until |v - a| <= eps holds.
fn clamp_linf_f32(out: &mut Image, anchor: &Image, eps: f32) {
    let (h, w, c) = anchor.shape();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let a = anchor.get(y, x, ch);
                let mut v = out.get(y, x, ch).clamp(a - eps, a + eps);
                while (v - a).abs() > eps {
                    v = if v > a { v.next_down() } else { v.next_up() };
                }
                out.set(y, x, ch, v);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trojan
// ---------------------------------------------------------------------------

/// The output unit with the largest absolute incoming weight mass; ties
/// break toward the lowest class index.
pub fn trojan_select_target(model: &ModelParams) -> usize {
    let feat = model.feature_len();
    let mut best = 0usize;
    let mut best_sum = f64::NEG_INFINITY;
    for y in 0..model.num_classes {
        let sum: f64 =
            model.fc_w[y * feat..(y + 1) * feat].iter().map(|w| w.abs() as f64).sum();
        if sum > best_sum {
            best_sum = sum;
            best = y;
        }
    }
    best
}

fn trojan_composite(img: &Image, pattern: &[f64], spec: &TriggerSpec, transparency: f64) -> Image {
    let (h, w, channels) = img.shape();
    let (row0, col0) = spec.resolve(h, w).expect("validated earlier");
    let (ph, pw) = (spec.pattern.height, spec.pattern.width);
    let mut raw: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    for py in 0..ph {
        for px in 0..pw {
            let m = spec.mask[py * pw + px] as f64 * transparency;
            if m == 0.0 {
                continue;
            }
            for c in 0..channels {
                let i = ((row0 + py) * w + col0 + px) * channels + c;
                let t = pattern[(py * pw + px) * channels + c];
                raw[i] = raw[i] * (1.0 - m) + t * m;
            }
        }
    }
    Image::from_clamped(h, w, channels, &raw)
}

/// Trojan poisoning with a per-step log of the target unit's pre-softmax
/// activation (entry 0 is the initial composite, one entry per step after).
pub fn trojan_poison_traced(
    img: &Image,
    model: &ModelParams,
    spec: &TriggerSpec,
    transparency: f64,
    steps: usize,
    step_size: f64,
) -> Result<(Image, Vec<f64>)> {
    require_trained(model)?;
    if !(0.0..=1.0).contains(&transparency) {
        return Err(Error::Config(format!("transparency {transparency} outside [0,1]")));
    }
    let (h, w, channels) = img.shape();
    spec.resolve(h, w)?;
    let target = trojan_select_target(model);
    let (ph, pw) = (spec.pattern.height, spec.pattern.width);
    let (row0, col0) = spec.resolve(h, w)?;

    // Optimized trigger region, replicated across channels when needed.
    let mut pattern: Vec<f64> = (0..ph * pw * channels)
        .map(|i| spec.pattern_value(i / channels / pw, (i / channels) % pw, i % channels) as f64)
        .collect();
    let objective = Objective::UnitActivation { unit: target, target: 10.0 };
    let mut trace = Vec::with_capacity(steps + 1);
    let mut composite = trojan_composite(img, &pattern, spec, transparency);
    trace.push(model::forward_logits(model, &composite)?[target]);
    for _ in 0..steps {
        let grad = model::input_gradient(model, &composite, &objective)?;
        for py in 0..ph {
            for px in 0..pw {
                let m = spec.mask[py * pw + px] as f64 * transparency;
                if m == 0.0 {
                    continue;
                }
                for c in 0..channels {
                    let gi = ((row0 + py) * w + col0 + px) * channels + c;
                    let ti = (py * pw + px) * channels + c;
                    pattern[ti] = (pattern[ti] - step_size * grad[gi] * m).clamp(0.0, 1.0);
                }
            }
        }
        composite = trojan_composite(img, &pattern, spec, transparency);
        trace.push(model::forward_logits(model, &composite)?[target]);
    }
    Ok((composite, trace))
}

/// Trojan poisoning: the trigger region is optimized by gradient descent to
/// drive the selected unit's pre-softmax value toward 10.0, then composited
/// at the given transparency. The caller flips the label.
pub fn trojan_poison(
    img: &Image,
    model: &ModelParams,
    spec: &TriggerSpec,
    transparency: f64,
    steps: usize,
    step_size: f64,
) -> Result<Image> {
    trojan_poison_traced(img, model, spec, transparency, steps, step_size).map(|(img, _)| img)
}

// ---------------------------------------------------------------------------
// HTBD (feature collision)
// ---------------------------------------------------------------------------

/// Feature-collision poisoning: starting from the target-class image, walk
/// the penultimate-feature distance to the triggered source image downhill,
/// staying inside the L-infinity ball around the start and inside [0,1].
pub fn htbd_poison(
    target_img: &Image,
    source_img: &Image,
    model: &ModelParams,
    trigger: &TriggerSpec,
    budget: &AttackBudget,
) -> Result<Image> {
    require_trained(model)?;
    if target_img.shape() != source_img.shape() {
        return Err(Error::Shape("HTBD target and source shapes differ".into()));
    }
    let (h, w, c) = target_img.shape();
    let eps = budget.epsilon / 255.0;
    let alpha = budget.step_size / 255.0;
    let patched_source = apply_patch(source_img, trigger)?;
    let reference = model::features(model, &patched_source)?;
    let anchor: Vec<f64> = target_img.data().iter().map(|&v| v as f64).collect();
    let mut current = anchor.clone();
    for _ in 0..budget.steps {
        let img = Image::from_clamped(h, w, c, &current);
        let grad =
            model::input_gradient(model, &img, &Objective::FeatureDistance { reference: &reference })?;
        for ((v, g), &a) in current.iter_mut().zip(&grad).zip(&anchor) {
            *v = (*v - alpha * g.signum()).clamp(a - eps, a + eps).clamp(0.0, 1.0);
        }
    }
    let mut out = Image::from_clamped(h, w, c, &current);
    clamp_linf_f32(&mut out, target_img, eps as f32);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Poison plans
// ---------------------------------------------------------------------------

/// How many samples to poison: a fraction of the victim pool or an absolute
/// count. Dirty-label fractions are taken of the whole dataset, clean-label
/// fractions of the target class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoisonAmount {
    Fraction(f64),
    Count(usize),
}

/// Attack-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    BadNets { trigger: TriggerSpec },
    Blended { trigger: Image, alpha: f64 },
    Trojan { trigger: TriggerSpec, transparency: f64, steps: usize, step_size: f64 },
    Sig(SigSpec),
    Lcbd { budget: AttackBudget, trigger: TriggerSpec },
    Htbd { trigger: TriggerSpec, budget: AttackBudget },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::BadNets { .. } => "badnets",
            AttackSpec::Blended { .. } => "blended",
            AttackSpec::Trojan { .. } => "trojan",
            AttackSpec::Sig(_) => "sig",
            AttackSpec::Lcbd { .. } => "lcbd",
            AttackSpec::Htbd { .. } => "htbd",
        }
    }

    /// Dirty-label attacks relabel victims; clean-label attacks do not.
    pub fn dirty_label(&self) -> bool {
        matches!(
            self,
            AttackSpec::BadNets { .. } | AttackSpec::Blended { .. } | AttackSpec::Trojan { .. }
        )
    }

    fn needs_model(&self) -> bool {
        matches!(
            self,
            AttackSpec::Lcbd { .. } | AttackSpec::Trojan { .. } | AttackSpec::Htbd { .. }
        )
    }
}

/// A complete poisoning recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPlan {
    pub attack: AttackSpec,
    pub target_class: usize,
    pub amount: PoisonAmount,
    pub rng_seed: u64,
}

impl PoisonPlan {
    fn poison_count(&self, ds: &LabeledDataset, target: usize) -> usize {
        match self.amount {
            PoisonAmount::Count(k) => k,
            PoisonAmount::Fraction(f) => {
                let base = if self.attack.dirty_label() {
                    ds.len()
                } else {
                    ds.class_indices(target).len()
                };
                (f * base as f64).floor() as usize
            }
        }
    }
}

/// Builds the poisoned training set and its ground-truth mask.
///
/// Victims are drawn uniformly without replacement from the eligible class
/// via the plan's seeded RNG. HTBD appends its optimized images instead of
/// modifying victims in place.
pub fn build_poisoned_dataset(
    ds: &LabeledDataset,
    plan: &PoisonPlan,
    model: Option<&ModelParams>,
) -> Result<(LabeledDataset, PoisonMask)> {
    if plan.target_class >= ds.num_classes {
        return Err(Error::Config(format!(
            "target class {} >= num_classes {}",
            plan.target_class, ds.num_classes
        )));
    }
    if let PoisonAmount::Fraction(f) = plan.amount {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("poison fraction {f} outside (0,1]")));
        }
    }
    let model = if plan.attack.needs_model() {
        let m = model.ok_or_else(|| {
            Error::Usage(format!("attack {} requires a trained model", plan.attack.name()))
        })?;
        require_trained(m)?;
        Some(m)
    } else {
        None
    };

    // Trojan picks its own target unit; the mask records the effective class.
    let target = match &plan.attack {
        AttackSpec::Trojan { .. } => trojan_select_target(model.unwrap()),
        _ => plan.target_class,
    };

    let eligible: Vec<usize> = if plan.attack.dirty_label() {
        (0..ds.len()).filter(|&i| ds.labels[i] != target).collect()
    } else {
        ds.class_indices(target)
    };
    let count = plan.poison_count(ds, target);
    if count > eligible.len() {
        return Err(Error::Config(format!(
            "{count} poisons requested but only {} eligible samples",
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    let mut pool = eligible;
    // Partial Fisher-Yates: the first `count` entries are the victims.
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut victims: Vec<usize> = pool[..count].to_vec();
    victims.sort_unstable();

    let mut images = ds.images.clone();
    let mut labels = ds.labels.clone();
    let mut flags = vec![false; ds.len()];

    match &plan.attack {
        AttackSpec::BadNets { trigger } => {
            for &i in &victims {
                images[i] = apply_patch(&images[i], trigger)?;
                labels[i] = target;
                flags[i] = true;
            }
        }
        AttackSpec::Blended { trigger, alpha } => {
            for &i in &victims {
                images[i] = blend(&images[i], trigger, *alpha)?;
                labels[i] = target;
                flags[i] = true;
            }
        }
        AttackSpec::Trojan { trigger, transparency, steps, step_size } => {
            let m = model.unwrap();
            for &i in &victims {
                images[i] =
                    trojan_poison(&images[i], m, trigger, *transparency, *steps, *step_size)?;
                labels[i] = target;
                flags[i] = true;
            }
        }
        AttackSpec::Sig(spec) => {
            for &i in &victims {
                images[i] = sig_apply(&images[i], spec);
                flags[i] = true;
            }
        }
        AttackSpec::Lcbd { budget, trigger } => {
            let m = model.unwrap();
            for &i in &victims {
                images[i] = lcbd_ae_poison(&images[i], labels[i], m, budget, trigger)?;
                flags[i] = true;
            }
        }
        AttackSpec::Htbd { trigger, budget } => {
            let m = model.unwrap();
            let source_classes: Vec<usize> =
                (0..ds.num_classes).filter(|&c| c != target).collect();
            if source_classes.is_empty() {
                return Err(Error::Config("HTBD needs at least one non-target class".into()));
            }
            for &t_idx in &victims {
                let class = source_classes[rng.gen_range(0..source_classes.len())];
                let members = ds.class_indices(class);
                let s_idx = members[rng.gen_range(0..members.len())];
                let poison = htbd_poison(&ds.images[t_idx], &ds.images[s_idx], m, trigger, budget)?;
                images.push(poison);
                labels.push(target);
                flags.push(true);
            }
        }
    }

    let poisoned = LabeledDataset::new(images, labels, ds.num_classes)?;
    let mask = PoisonMask::new(flags, target, plan.attack.name());
    Ok((poisoned, mask))
}

/// A test-time trigger application, used for ASR evaluation.
#[derive(Debug, Clone)]
pub enum TestTrigger {
    Patch(TriggerSpec),
    Blend { trigger: Image, alpha: f64 },
    Sig(SigSpec),
    /// Trojan re-optimizes its trigger per test image against the attacker's
    /// own model, exactly as the poisons were built.
    Trojan {
        spec: TriggerSpec,
        transparency: f64,
        steps: usize,
        step_size: f64,
        attacker: Box<ModelParams>,
    },
}

impl TestTrigger {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            TestTrigger::Patch(spec) => apply_patch(img, spec),
            TestTrigger::Blend { trigger, alpha } => blend(img, trigger, *alpha),
            TestTrigger::Sig(spec) => Ok(sig_apply(img, spec)),
            TestTrigger::Trojan { spec, transparency, steps, step_size, attacker } => {
                trojan_poison(img, attacker, spec, *transparency, *steps, *step_size)
            }
        }
    }
}
