//! Locating the step `k` where noised ground truth and noised auxiliary
//! predictions become indistinguishable: a closed-form KL criterion and a
//! trained step-conditioned classifier.

use std::fmt::Write as _;

use rand::Rng;
use shallowdiff_autodiff::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Tape, Var};

use crate::diffusion::forward_sample;
use crate::error::{CoreError, Result};
use crate::grid::{Grid, NoiseDraw};
use crate::nn;
use crate::schedule::Schedule;

/// Fraction of steps in `[k′, T]` that must sit under the threshold.
pub const MARGIN_FRACTION: f64 = 0.95;

/// `KL(q(M_t|M_0) ‖ q(M̃_t|M̃_0)) = ᾱ_t / (2(1−ᾱ_t)) · ‖M̃_0 − M_0‖²`.
pub fn kl_trajectory(m0: &Grid, m0_tilde: &Grid, t: usize, s: &Schedule) -> Result<f64> {
    s.check_step(t, 1)?;
    m0.ensure_same_shape(m0_tilde, "kl_trajectory")?;
    Ok(0.5 * s.snr(t) * m0.sq_dist(m0_tilde))
}

/// `KL(N(√ᾱ_T·m0, (1−ᾱ_T)I) ‖ N(0, I))`.
pub fn kl_prior(m0: &Grid, s: &Schedule) -> Result<f64> {
    let big_t = s.steps();
    let ab = s.alpha_bar[big_t];
    let v = s.one_minus_alpha_bar[big_t];
    if v <= 0.0 || ab >= 1.0 {
        return Err(CoreError::InvalidSchedule("alpha_bar_T = 1, prior KL undefined".into()));
    }
    let per = v - 1.0 - v.ln();
    Ok(0.5 * m0.values().iter().map(|m| per + ab * m * m).sum::<f64>())
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut xs: Vec<f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / n
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSelection {
    pub k: usize,
    /// False when no step satisfied the criterion and `T` was returned.
    pub crossed: bool,
}

/// Smallest `t` with mean trajectory KL at or below mean prior KL.
pub fn select_k_kl(pairs: &[(Grid, Grid)], s: &Schedule) -> Result<KlSelection> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut d = Vec::with_capacity(pairs.len());
    let mut prior = Vec::with_capacity(pairs.len());
    for (m, mt) in pairs {
        m.ensure_same_shape(mt, "select_k_kl pair")?;
        d.push(m.sq_dist(mt));
        prior.push(kl_prior(m, s)?);
    }
    let d = stable_mean(d);
    let prior = stable_mean(prior);
    for t in 1..=s.steps() {
        if 0.5 * s.snr(t) * d <= prior {
            return Ok(KlSelection { k: t, crossed: true });
        }
    }
    Ok(KlSelection {
        k: s.steps(),
        crossed: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            layers: 5,
            kernel: 3,
            bins: 16,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.bins == 0 {
            return Err(CoreError::InvalidConfig("classifier extents must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "classifier kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Step-conditioned residual convolutional classifier: `BP(M_t, t)` is the
/// probability that `M_t` comes from ground truth rather than the auxiliary
/// decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryClassifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
}

/// Keeps probabilities strictly inside (0, 1).
const PROB_EPS: f64 = 1e-12;

impl BoundaryClassifier {
    pub fn init<G: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut G) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut p = ParamStore::new();
        nn::init_step_mlp(&mut p, "bp.step", c, rng);
        nn::init_conv(&mut p, "bp.conv0", c, cfg.bins, cfg.kernel, rng);
        for i in 1..cfg.layers {
            nn::init_conv(&mut p, &format!("bp.conv{i}"), c, c, cfg.kernel, rng);
        }
        nn::init_linear_zero(&mut p, "bp.out", c, 1);
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: ClassifierConfig, params: ParamStore) -> Result<Self> {
        let probe = Self::init(cfg.clone(), &mut crate::rng::stream(0, 0))?;
        for (name, a) in probe.params.iter() {
            match params.get(name) {
                Some(b) if b.shape() == a.shape() => {}
                _ => return Err(CoreError::Format(format!("missing or misshapen parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    /// Logit graph for one `[frames × bins]` grid at step `t`.
    pub fn logit_graph(&self, tape: &mut Tape, m_t: &Grid, t: usize) -> Result<Var> {
        if m_t.bins() != self.cfg.bins {
            return Err(CoreError::ShapeMismatch {
                what: "classifier input",
                expected: (m_t.frames(), self.cfg.bins),
                found: m_t.dims(),
            });
        }
        let p = &self.params;
        let c = self.cfg.channels;
        let x = tape.constant(m_t.to_array());
        let x = tape.transpose(x)?;
        let h = nn::conv(tape, p, "bp.conv0", x, 1)?;
        let e = nn::step_mlp(tape, p, "bp.step", t, c)?;
        let e = tape.reshape(e, &[c])?;
        let h = tape.add_col(h, e)?;
        let mut h = tape.relu(h)?;
        for i in 1..self.cfg.layers {
            let r = nn::conv(tape, p, &format!("bp.conv{i}"), h, 1)?;
            let r = tape.relu(r)?;
            h = tape.add(h, r)?;
        }
        let pooled = tape.row_means(h)?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let logit = nn::linear(tape, p, "bp.out", pooled)?;
        Ok(tape.reshape(logit, &[1])?)
    }

    pub fn prob(&self, m_t: &Grid, t: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logit_graph(&mut tape, m_t, t)?;
        let z = tape.value(l).item();
        Ok(shallowdiff_autodiff::sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

/// Trains the classifier with binary cross-entropy: `M_t` labelled 1,
/// `M̃_t` labelled 0, with `t` uniform on `0..=T` and independent noise for
/// each side. Returns the mean loss per step.
pub fn bp_train<G: Rng + ?Sized>(
    clf: &mut BoundaryClassifier,
    pairs: &[(Grid, Grid)],
    s: &Schedule,
    cfg: &BpTrainConfig,
    rng: &mut G,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = Gradients::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..pairs.len());
            let t = rng.random_range(0..=s.steps());
            let (m, mt) = &pairs[i];
            let real = forward_sample(m, t, &NoiseDraw::sample(m.frames(), m.bins(), rng), s)?;
            let fake = forward_sample(mt, t, &NoiseDraw::sample(mt.frames(), mt.bins(), rng), s)?;
            let mut tape = Tape::new();
            let lr = clf.logit_graph(&mut tape, &real.grid, t)?;
            let lf = clf.logit_graph(&mut tape, &fake.grid, t)?;
            // -log σ(lr) - log(1 - σ(lf)) = softplus(-lr) + softplus(lf)
            let nlr = tape.scale(lr, -1.0)?;
            let a = tape.softplus(nlr)?;
            let b = tape.softplus(lf)?;
            let sum = tape.add(a, b)?;
            let loss = tape.scale(sum, 0.5)?;
            let loss = tape.sum(loss)?;
            total += tape.value(loss).item();
            tape.backward(loss)?;
            grads.accumulate(&tape.param_grads());
        }
        let mean = total / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(CoreError::Divergence(format!("classifier loss non-finite at step {step}")));
        }
        grads.scale(1.0 / cfg.batch as f64);
        adam_step(&mut clf.params, &grads, &cfg.adam, &mut state)?;
        losses.push(mean);
    }
    Ok(losses)
}

/// Fraction of correctly classified samples at step `t`, over both the
/// ground-truth and auxiliary sides of every pair.
pub fn accuracy_at<G: Rng + ?Sized>(
    clf: &BoundaryClassifier,
    pairs: &[(Grid, Grid)],
    t: usize,
    s: &Schedule,
    rng: &mut G,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (m, mt) in pairs {
        let real = forward_sample(m, t, &NoiseDraw::sample(m.frames(), m.bins(), rng), s)?;
        let fake = forward_sample(mt, t, &NoiseDraw::sample(mt.frames(), mt.bins(), rng), s)?;
        if clf.prob(&real.grid, t)? > 0.5 {
            correct += 1;
        }
        if clf.prob(&fake.grid, t)? < 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (2 * pairs.len()) as f64)
}

/// Classifier statistics of one item at steps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginProfile {
    pub bp_real: Vec<f64>,
    pub bp_fake: Vec<f64>,
}

impl MarginProfile {
    pub fn margins(&self) -> Vec<f64> {
        self.bp_real
            .iter()
            .zip(&self.bp_fake)
            .map(|(a, b)| (a - b).abs())
            .collect()
    }
}

/// Evaluates `BP` on noised versions of one pair at every step, averaging
/// `draws` independent noise samples per side.
pub fn margin_profile<G: Rng + ?Sized>(
    clf: &BoundaryClassifier,
    m: &Grid,
    m_tilde: &Grid,
    s: &Schedule,
    draws: usize,
    rng: &mut G,
) -> Result<MarginProfile> {
    m.ensure_same_shape(m_tilde, "margin_profile pair")?;
    let draws = draws.max(1);
    let mut bp_real = Vec::with_capacity(s.steps());
    let mut bp_fake = Vec::with_capacity(s.steps());
    for t in 1..=s.steps() {
        let (mut r, mut f) = (0.0, 0.0);
        for _ in 0..draws {
            let real = forward_sample(m, t, &NoiseDraw::sample(m.frames(), m.bins(), rng), s)?;
            let fake = forward_sample(m_tilde, t, &NoiseDraw::sample(m.frames(), m.bins(), rng), s)?;
            r += clf.prob(&real.grid, t)?;
            f += clf.prob(&fake.grid, t)?;
        }
        bp_real.push(r / draws as f64);
        bp_fake.push(f / draws as f64);
    }
    Ok(MarginProfile { bp_real, bp_fake })
}

/// Earliest `k′` in `1..=T` such that at least 95% of steps `t ∈ [k′, T]`
/// have `margins[t−1] < tau`. `margins` is indexed by `t − 1`.
pub fn earliest_k(margins: &[f64], tau: f64) -> Option<usize> {
    let big_t = margins.len();
    // under[i] = number of steps in [i+1, T] below tau
    let mut under = vec![0usize; big_t + 1];
    for i in (0..big_t).rev() {
        under[i] = under[i + 1] + usize::from(margins[i] < tau);
    }
    (1..=big_t).find(|&k| {
        let n = big_t - k + 1;
        under[k - 1] as f64 >= MARGIN_FRACTION * n as f64 - 1e-9
    })
}

/// Averages per-item `k′`, rounding half up and clamping to `[1, T]`.
/// Items with no admissible `k′` are left out of the average.
pub fn aggregate_k(per_item: &[Option<usize>], tau: f64, big_t: usize) -> Result<usize> {
    let found: Vec<usize> = per_item.iter().flatten().copied().collect();
    if found.is_empty() {
        return Err(CoreError::NoBoundary { tau });
    }
    let mean = found.iter().sum::<usize>() as f64 / found.len() as f64;
    Ok(((mean + 0.5).floor() as usize).clamp(1, big_t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryRow {
    pub t: usize,
    pub bp_real: f64,
    pub bp_fake: f64,
    pub margin: f64,
    pub kl_traj: f64,
    pub kl_prior: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryReport {
    pub rows: Vec<BoundaryRow>,
    /// `None` when no item satisfies the margin rule.
    pub k_classifier: Option<usize>,
    pub k_kl: usize,
    pub kl_crossed: bool,
    pub tau: f64,
    /// Per-item `k′`; `None` where the 95% rule was never met.
    pub per_item_k: Vec<Option<usize>>,
}

impl BoundaryReport {
    /// The classifier's `k`, or `NoBoundary` when no item admitted one.
    pub fn classifier_k(&self) -> Result<usize> {
        self.k_classifier.ok_or(CoreError::NoBoundary { tau: self.tau })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,bp_real,bp_fake,margin,kl_traj,kl_prior\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.t, r.bp_real, r.bp_fake, r.margin, r.kl_traj, r.kl_prior
            );
        }
        s
    }
}

/// Runs both selection procedures over `pairs` and tabulates per-step
/// dataset averages.
pub fn boundary_report<G: Rng + ?Sized>(
    clf: &BoundaryClassifier,
    pairs: &[(Grid, Grid)],
    tau: f64,
    draws: usize,
    s: &Schedule,
    rng: &mut G,
) -> Result<BoundaryReport> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::InvalidConfig(format!("threshold must lie in (0, 1), got {tau}")));
    }
    let big_t = s.steps();
    let n = pairs.len() as f64;
    let mut real = vec![0.0; big_t];
    let mut fake = vec![0.0; big_t];
    let mut margin = vec![0.0; big_t];
    let mut per_item_k = Vec::with_capacity(pairs.len());
    for (m, mt) in pairs {
        let prof = margin_profile(clf, m, mt, s, draws, rng)?;
        let mg = prof.margins();
        per_item_k.push(earliest_k(&mg, tau));
        for i in 0..big_t {
            real[i] += prof.bp_real[i] / n;
            fake[i] += prof.bp_fake[i] / n;
            margin[i] += mg[i] / n;
        }
    }
    let prior = stable_mean(pairs.iter().map(|(m, _)| kl_prior(m, s)).collect::<Result<_>>()?);
    let dist = stable_mean(pairs.iter().map(|(m, mt)| m.sq_dist(mt)).collect());
    let rows = (1..=big_t)
        .map(|t| BoundaryRow {
            t,
            bp_real: real[t - 1],
            bp_fake: fake[t - 1],
            margin: margin[t - 1],
            kl_traj: 0.5 * s.snr(t) * dist,
            kl_prior: prior,
        })
        .collect();
    let k_classifier = match aggregate_k(&per_item_k, tau, big_t) {
        Ok(k) => Some(k),
        Err(CoreError::NoBoundary { .. }) => None,
        Err(e) => return Err(e),
    };
    let sel = select_k_kl(pairs, s)?;
    Ok(BoundaryReport {
        rows,
        k_classifier,
        k_kl: sel.k,
        kl_crossed: sel.crossed,
        tau,
        per_item_k,
    })
}
