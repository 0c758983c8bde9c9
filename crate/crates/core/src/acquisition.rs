//! Choosing the next hyperparameter to evaluate: expected improvement and
//! confidence bounds on the surrogate posterior, the exploit-first policy
//! for the first target iteration, warm-start selection from source
//! histories, and a random-candidates-plus-local-ascent maximizer, all
//! over a bounded search box with log-scale and integer dimensions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogates::FittedSurrogate;

/// Candidates scored per posterior batch; bounds the memory the Gram
/// block of a single batched prediction can take.
const CANDIDATE_CHUNK: usize = 4096;
/// Central-difference step for acquisition gradients, in standardized
/// coordinates.
const GRAD_H: f64 = 1e-4;
/// Initial ascent step, in standardized coordinates.
const ASCENT_INIT_STEP: f64 = 0.1;
/// Backtracking halts once the step shrinks below this.
const ASCENT_MIN_STEP: f64 = 1e-12;
/// Step halvings allowed per ascent iteration.
const ASCENT_BACKTRACKS: usize = 30;

/// How a dimension is searched: linear in native units, or linear in log
/// units (the usual choice for scale-like hyperparameters).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// One searchable hyperparameter dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub scale: Scale,
    /// Integer-valued dimension: continuous proposals are rounded up to
    /// the nearest integer.
    #[serde(default)]
    pub integer: bool,
}

impl Dimension {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Dimension { name: name.into(), lower, upper, scale: Scale::Linear, integer: false }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        Dimension { name: name.into(), lower, upper, scale: Scale::Log, integer: false }
    }

    pub fn integer(name: &str, lower: f64, upper: f64) -> Self {
        Dimension { name: name.into(), lower, upper, scale: Scale::Linear, integer: true }
    }

    fn to_search(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log => x.ln(),
        }
    }

    fn from_search(&self, t: f64) -> f64 {
        match self.scale {
            Scale::Linear => t,
            Scale::Log => t.exp(),
        }
    }
}

/// The search box: per-dimension bounds and scales plus standardization
/// stats (mean and standard deviation of each dimension in search scale,
/// estimated from the pooled source evaluations), so surrogates see
/// inputs with roughly zero mean and unit variance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperparameterSpace {
    dims: Vec<Dimension>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl HyperparameterSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Contract("search space needs at least one dimension".into()));
        }
        for d in &dims {
            if !(d.lower < d.upper) {
                return Err(Error::Contract(format!(
                    "dimension {}: lower bound {} must be below upper bound {}",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale == Scale::Log && d.lower <= 0.0 {
                return Err(Error::Contract(format!(
                    "dimension {}: log scale requires a positive lower bound, got {}",
                    d.name, d.lower
                )));
            }
        }
        let n = dims.len();
        Ok(HyperparameterSpace { dims, mean: vec![0.0; n], std: vec![1.0; n] })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    /// Estimate standardization stats from native-unit θs (population
    /// moments in search scale). A dimension constant across the pool
    /// keeps unit std so the transform stays invertible.
    pub fn set_standardization(&mut self, thetas: &[Vec<f64>]) -> Result<()> {
        if thetas.is_empty() {
            return Err(Error::Contract("standardization needs at least one θ".into()));
        }
        let n = thetas.len() as f64;
        for (j, d) in self.dims.iter().enumerate() {
            let vals: Vec<f64> = thetas
                .iter()
                .map(|t| d.to_search(t[j].clamp(d.lower, d.upper)))
                .collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.mean[j] = mean;
            self.std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    /// Standardize by the moments of the uniform distribution over the
    /// box: mean (lo+hi)/2 and std (hi−lo)/√12 per dimension in search
    /// scale. The fallback when no source evaluations exist to estimate
    /// moments from.
    pub fn set_standardization_uniform(&mut self) {
        for (j, d) in self.dims.iter().enumerate() {
            let (lo, hi) = (d.to_search(d.lower), d.to_search(d.upper));
            self.mean[j] = 0.5 * (lo + hi);
            self.std[j] = (hi - lo) / 12f64.sqrt();
        }
    }

    /// Native units to standardized search coordinates. Out-of-bounds
    /// input is clamped first; the flag reports whether clamping happened.
    pub fn transform(&self, native: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = self
            .dims
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let x = native[j].clamp(d.lower, d.upper);
                if x != native[j] {
                    clamped = true;
                }
                (d.to_search(x) - self.mean[j]) / self.std[j]
            })
            .collect();
        (out, clamped)
    }

    /// Standardized search coordinates back to native units, clamped to
    /// bounds; the flag reports whether clamping happened.
    pub fn untransform(&self, std_coords: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = self
            .dims
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let x = d.from_search(std_coords[j] * self.std[j] + self.mean[j]);
                let c = x.clamp(d.lower, d.upper);
                if c != x {
                    clamped = true;
                }
                c
            })
            .collect();
        (out, clamped)
    }

    /// Round integer dimensions up to the nearest integer and clamp; the
    /// identity for θs already on the grid.
    pub fn finalize(&self, mut native: Vec<f64>) -> Vec<f64> {
        for (j, d) in self.dims.iter().enumerate() {
            if d.integer {
                native[j] = native[j].ceil();
            }
            native[j] = native[j].clamp(d.lower, d.upper);
        }
        native
    }

    /// Uniform draw over the box in search scale, in native units.
    pub fn sample_native(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| {
                let (lo, hi) = (d.to_search(d.lower), d.to_search(d.upper));
                d.from_search(rng.gen_range(lo..hi)).clamp(d.lower, d.upper)
            })
            .collect()
    }

    /// Uniform draw over the box in search scale, in standardized
    /// coordinates.
    pub fn sample_std(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.dims
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let (lo, hi) = (d.to_search(d.lower), d.to_search(d.upper));
                (rng.gen_range(lo..hi) - self.mean[j]) / self.std[j]
            })
            .collect()
    }

    /// Bounds of the box in standardized coordinates.
    pub fn std_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .dims
            .iter()
            .enumerate()
            .map(|(j, d)| (d.to_search(d.lower) - self.mean[j]) / self.std[j])
            .collect();
        let hi = self
            .dims
            .iter()
            .enumerate()
            .map(|(j, d)| (d.to_search(d.upper) - self.mean[j]) / self.std[j])
            .collect();
        (lo, hi)
    }
}

/// Tuning constants for proposal generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    /// Exploration margin inside expected improvement.
    pub xi: f64,
    /// Confidence-bound width; 2.58 is the two-sided 99% normal quantile.
    pub kappa: f64,
    /// Random candidates scored per proposal.
    pub candidates: usize,
    /// Top candidates kept as starts for local refinement.
    pub refine_starts: usize,
    /// Ascent iterations allowed per refinement start.
    pub refine_iters: usize,
    /// Candidate-stage EI maximum below which the proposal switches to
    /// the upper confidence bound.
    pub ei_zero: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            xi: 0.01,
            kappa: 2.58,
            candidates: 300_000,
            refine_starts: 10,
            refine_iters: 100,
            ei_zero: 1e-10,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi <= 0.0
            || self.kappa <= 0.0
            || self.candidates == 0
            || self.refine_starts == 0
            || self.refine_iters == 0
            || self.ei_zero <= 0.0
        {
            return Err(Error::Contract("acquisition constants must all be positive".into()));
        }
        Ok(())
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Expected improvement of a Gaussian posterior over the incumbent:
/// σ·(g·Φ(g) + φ(g)) with g = (μ − z_max − ξ)/σ, and max(0, μ − z_max − ξ)
/// in the noiseless σ = 0 limit.
pub fn expected_improvement(mean: f64, variance: f64, z_max: f64, xi: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gap = mean - z_max - xi;
    if sigma == 0.0 {
        return gap.max(0.0);
    }
    let g = gap / sigma;
    (sigma * (g * normal_cdf(g) + normal_pdf(g))).max(0.0)
}

/// Which side of the confidence interval to report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Lower,
    Upper,
}

/// μ − κσ (lower) or μ + κσ (upper).
pub fn confidence_bound(mean: f64, variance: f64, kappa: f64, direction: Direction) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    match direction {
        Direction::Lower => mean - kappa * sigma,
        Direction::Upper => mean + kappa * sigma,
    }
}

/// Which rule produced a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionRule {
    /// First-iteration exploit: lower confidence bound over the full box.
    LcbFullSpace,
    /// First-iteration exploit for BLR kinds: lower confidence bound over
    /// the per-source-task best θs.
    LcbSourceBest,
    ExpectedImprovement,
    /// The candidate-stage EI maximum was numerically zero; switched to
    /// the upper confidence bound.
    UcbFallback,
    /// No posterior worth exploiting (or a numeric failure); θ drawn
    /// uniformly over the box.
    Random,
}

impl AcquisitionRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::LcbFullSpace => "lcb_full_space",
            Self::LcbSourceBest => "lcb_source_best",
            Self::ExpectedImprovement => "expected_improvement",
            Self::UcbFallback => "ucb_fallback",
            Self::Random => "random",
        }
    }
}

/// A proposed hyperparameter point in native units, plus how it was found.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub theta: Vec<f64>,
    pub rule: AcquisitionRule,
    /// Acquisition value at the returned point (NaN for random draws).
    pub acquisition: f64,
    /// Best acquisition over the random candidate stage, before local
    /// refinement; never above `acquisition` for non-random rules.
    pub candidate_max: f64,
    /// The surrogate failed numerically and θ fell back to random.
    pub numeric_fallback: bool,
    /// The final θ needed clamping back into bounds.
    pub clamped: bool,
}

/// The acquisition surface being maximized.
#[derive(Clone, Copy)]
enum Stage {
    Lcb,
    Ei { z_max: f64 },
    Ucb,
}

fn acq_value(stage: Stage, cfg: &AcquisitionConfig, mean: f64, sigma: f64) -> f64 {
    match stage {
        Stage::Lcb => mean - cfg.kappa * sigma,
        Stage::Ucb => mean + cfg.kappa * sigma,
        Stage::Ei { z_max } => expected_improvement(mean, sigma * sigma, z_max, cfg.xi),
    }
}

/// Posterior mean and σ for a batch of standardized rows.
fn posterior_rows(
    surrogate: &FittedSurrogate,
    rows: &ArrayView2<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mean, var) = surrogate.predict(rows)?;
    let sigmas = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok((mean.to_vec(), sigmas))
}

/// A scored candidate point in standardized coordinates.
#[derive(Clone, Debug)]
struct CandidateScore {
    value: f64,
    sigma: f64,
    index: usize,
    theta: Vec<f64>,
}

impl CandidateScore {
    /// Selection order: higher value first, then smaller posterior σ
    /// (exploit semantics under exact ties), then earlier index.
    fn beats(&self, other: &CandidateScore) -> bool {
        if self.value != other.value {
            return self.value > other.value;
        }
        if self.sigma != other.sigma {
            return self.sigma < other.sigma;
        }
        self.index < other.index
    }
}

/// Fixed-capacity tracker of the best-scoring candidates, kept sorted
/// best-first. Non-finite values are dropped.
struct TopCandidates {
    k: usize,
    entries: Vec<CandidateScore>,
}

impl TopCandidates {
    fn new(k: usize) -> Self {
        TopCandidates { k, entries: Vec::with_capacity(k + 1) }
    }

    fn push(&mut self, c: CandidateScore) {
        if !c.value.is_finite() {
            return;
        }
        let pos = self.entries.iter().position(|e| c.beats(e)).unwrap_or(self.entries.len());
        if pos >= self.k {
            return;
        }
        self.entries.insert(pos, c);
        self.entries.truncate(self.k);
    }
}

/// Projected gradient ascent with backtracking on the acquisition
/// surface, in standardized coordinates clamped to the search box.
/// Gradients are central differences, so only posterior evaluations are
/// needed. Starts at a scored candidate and only ever accepts
/// improvements, so the refined value never falls below the start value.
fn refine_ascent(
    surrogate: &FittedSurrogate,
    stage: Stage,
    cfg: &AcquisitionConfig,
    start: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let d = start.len();
    let clamp = |x: &mut Vec<f64>| {
        for j in 0..d {
            x[j] = x[j].clamp(lo[j], hi[j]);
        }
    };
    let value_at = |x: &[f64]| -> Result<f64> {
        let row = ArrayView2::from_shape((1, d), x)
            .expect("row view over a d-length slice always matches");
        let (m, s) = posterior_rows(surrogate, &row)?;
        Ok(acq_value(stage, cfg, m[0], s[0]))
    };

    let mut x = start;
    clamp(&mut x);
    let mut fx = value_at(&x)?;
    let mut step = ASCENT_INIT_STEP;
    for _ in 0..cfg.refine_iters {
        let mut probes = Array2::zeros((2 * d, d));
        for j in 0..d {
            for i in 0..d {
                probes[[2 * j, i]] = x[i];
                probes[[2 * j + 1, i]] = x[i];
            }
            probes[[2 * j, j]] += GRAD_H;
            probes[[2 * j + 1, j]] -= GRAD_H;
        }
        let (m, s) = posterior_rows(surrogate, &probes.view())?;
        let grad: Vec<f64> = (0..d)
            .map(|j| {
                let up = acq_value(stage, cfg, m[2 * j], s[2 * j]);
                let down = acq_value(stage, cfg, m[2 * j + 1], s[2 * j + 1]);
                (up - down) / (2.0 * GRAD_H)
            })
            .collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            break;
        }
        let mut improved = false;
        let mut s_try = step;
        for _ in 0..ASCENT_BACKTRACKS {
            let mut cand: Vec<f64> =
                (0..d).map(|j| x[j] + s_try * grad[j] / norm).collect();
            clamp(&mut cand);
            let fc = value_at(&cand)?;
            if fc > fx {
                x = cand;
                fx = fc;
                step = (s_try * 2.0).min(1.0);
                improved = true;
                break;
            }
            s_try *= 0.5;
            if s_try < ASCENT_MIN_STEP {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    Ok((x, fx))
}

/// Score `cfg.candidates` uniform draws over the box, keep the best
/// `refine_starts` (for EI, a shadow UCB ranking is kept in the same pass
/// so the fallback costs no second scan), locally refine them, and return
/// the best refined point. Reduction is index-ordered, so the result is
/// deterministic for a given RNG stream regardless of chunking.
fn maximize_over_box(
    surrogate: &FittedSurrogate,
    space: &HyperparameterSpace,
    cfg: &AcquisitionConfig,
    stage: Stage,
    rng: &mut impl Rng,
) -> Result<Proposal> {
    let d = space.dim();
    let mut primary = TopCandidates::new(cfg.refine_starts);
    let mut shadow_ucb = TopCandidates::new(cfg.refine_starts);
    let ei_stage = matches!(stage, Stage::Ei { .. });

    let mut index = 0;
    while index < cfg.candidates {
        let chunk = CANDIDATE_CHUNK.min(cfg.candidates - index);
        let mut rows = Array2::zeros((chunk, d));
        for r in 0..chunk {
            let s = space.sample_std(rng);
            for j in 0..d {
                rows[[r, j]] = s[j];
            }
        }
        let (means, sigmas) = posterior_rows(surrogate, &rows.view())?;
        for r in 0..chunk {
            let theta = rows.row(r).to_vec();
            primary.push(CandidateScore {
                value: acq_value(stage, cfg, means[r], sigmas[r]),
                sigma: sigmas[r],
                index: index + r,
                theta: theta.clone(),
            });
            if ei_stage {
                shadow_ucb.push(CandidateScore {
                    value: acq_value(Stage::Ucb, cfg, means[r], sigmas[r]),
                    sigma: sigmas[r],
                    index: index + r,
                    theta,
                });
            }
        }
        index += chunk;
    }

    let (rule, final_stage, tops) = if ei_stage {
        let max_ei = primary.entries.first().map_or(0.0, |c| c.value);
        if max_ei < cfg.ei_zero {
            (AcquisitionRule::UcbFallback, Stage::Ucb, shadow_ucb)
        } else {
            (AcquisitionRule::ExpectedImprovement, stage, primary)
        }
    } else {
        (AcquisitionRule::LcbFullSpace, stage, primary)
    };
    if tops.entries.is_empty() {
        return Err(Error::Numeric(
            "no finite acquisition value over the candidate stage".into(),
        ));
    }
    let candidate_max = tops.entries[0].value;

    let (lo, hi) = space.std_bounds();
    let mut winner: Option<(Vec<f64>, f64, usize)> = None;
    for c in &tops.entries {
        let (x, v) = refine_ascent(surrogate, final_stage, cfg, c.theta.clone(), &lo, &hi)?;
        let take = match &winner {
            None => true,
            Some((_, bv, bi)) => v > *bv || (v == *bv && c.index < *bi),
        };
        if take {
            winner = Some((x, v, c.index));
        }
    }
    let (x, v, _) = winner.expect("at least one refinement start exists");
    let (native, clamped) = space.untransform(&x);
    Ok(Proposal {
        theta: space.finalize(native),
        rule,
        acquisition: v,
        candidate_max,
        numeric_fallback: false,
        clamped,
    })
}

/// Maximize the lower confidence bound over a finite θ set (the BLR
/// first-iteration rule). No refinement: the set is the search space.
fn lcb_over_set(
    surrogate: &FittedSurrogate,
    space: &HyperparameterSpace,
    cfg: &AcquisitionConfig,
    set: &[Vec<f64>],
) -> Result<Proposal> {
    let d = space.dim();
    let mut rows = Array2::zeros((set.len(), d));
    for (r, theta) in set.iter().enumerate() {
        if theta.len() != d {
            return Err(Error::Contract(format!(
                "source-best θ has {} dimensions, the space has {d}",
                theta.len()
            )));
        }
        let (std_coords, _) = space.transform(theta);
        for j in 0..d {
            rows[[r, j]] = std_coords[j];
        }
    }
    let (means, sigmas) = posterior_rows(surrogate, &rows.view())?;
    let mut best = TopCandidates::new(1);
    for r in 0..set.len() {
        best.push(CandidateScore {
            value: acq_value(Stage::Lcb, cfg, means[r], sigmas[r]),
            sigma: sigmas[r],
            index: r,
            theta: Vec::new(),
        });
    }
    let top = best
        .entries
        .first()
        .ok_or_else(|| Error::Numeric("no finite LCB value over the source-best set".into()))?;
    Ok(Proposal {
        theta: space.finalize(set[top.index].clone()),
        rule: AcquisitionRule::LcbSourceBest,
        acquisition: top.value,
        candidate_max: top.value,
        numeric_fallback: false,
        clamped: false,
    })
}

/// A uniform draw over the box (in search scale), packaged as a proposal.
pub fn random_proposal(
    space: &HyperparameterSpace,
    rng: &mut impl Rng,
    numeric_fallback: bool,
) -> Proposal {
    Proposal {
        theta: space.finalize(space.sample_native(rng)),
        rule: AcquisitionRule::Random,
        acquisition: f64::NAN,
        candidate_max: f64::NAN,
        numeric_fallback,
        clamped: false,
    }
}

/// Propose the next θ to evaluate, in native units.
///
/// Policy: with no conditioning observations at all, the draw is uniform
/// (nothing to exploit). On the first target iteration, GP kinds maximize
/// the lower confidence bound over the full box and BLR kinds maximize it
/// over `source_best`, the best θ from each source task; EI is never used
/// before a target observation exists, since the incumbent would be
/// undefined. Later iterations maximize EI against the best target z seen
/// so far, switching to UCB when EI is numerically zero everywhere. A
/// numeric failure inside the surrogate turns the proposal into a flagged
/// uniform draw rather than an error.
///
/// `target_history` carries (θ native, z) pairs in the units the
/// surrogate was trained on; `iteration` is 1-based.
pub fn propose_next(
    surrogate: &FittedSurrogate,
    space: &HyperparameterSpace,
    target_history: &[(Vec<f64>, f64)],
    source_best: &[Vec<f64>],
    cfg: &AcquisitionConfig,
    iteration: usize,
    rng: &mut impl Rng,
) -> Result<Proposal> {
    cfg.validate()?;
    if surrogate.n_observations() == 0 {
        return Ok(random_proposal(space, rng, false));
    }
    let first = iteration <= 1 || target_history.is_empty();
    let attempt = if first {
        if surrogate.kind.is_gp() {
            maximize_over_box(surrogate, space, cfg, Stage::Lcb, rng)
        } else if source_best.is_empty() {
            return Ok(random_proposal(space, rng, false));
        } else {
            lcb_over_set(surrogate, space, cfg, source_best)
        }
    } else {
        let z_max =
            target_history.iter().map(|(_, z)| *z).fold(f64::NEG_INFINITY, f64::max);
        maximize_over_box(surrogate, space, cfg, Stage::Ei { z_max }, rng)
    };
    match attempt {
        Ok(p) => Ok(p),
        Err(Error::Numeric(_)) => Ok(random_proposal(space, rng, true)),
        Err(e) => Err(e),
    }
}

/// θs to evaluate before the optimization loop starts: the best `m_each`
/// evaluations from each of the `m_tasks` most similar source tasks.
#[derive(Clone, Debug)]
pub struct WarmStart {
    /// Ordered most-similar task first, best z first within a task.
    pub thetas: Vec<Vec<f64>>,
    /// Exact duplicates dropped (first occurrence kept).
    pub duplicates_removed: usize,
}

/// Select warm-start θs from source histories ranked by similarity to the
/// target (task-kernel values for GP kinds, negated metafeature distances
/// for the frozen-vector variant). Tasks with fewer than `m_each`
/// evaluations contribute all they have.
pub fn warm_start_select(
    similarities: &[f64],
    histories: &[&[(Vec<f64>, f64)]],
    m_tasks: usize,
    m_each: usize,
) -> Result<WarmStart> {
    if similarities.len() != histories.len() {
        return Err(Error::Contract(format!(
            "{} similarities for {} histories",
            similarities.len(),
            histories.len()
        )));
    }
    if m_tasks == 0 || m_each == 0 || m_tasks > histories.len() {
        return Err(Error::Contract(format!(
            "warm start wants {m_tasks} of {} tasks, {m_each} evals each",
            histories.len()
        )));
    }
    if histories.iter().any(|h| h.is_empty()) {
        return Err(Error::Contract("every source history must be nonempty".into()));
    }
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(m_tasks * m_each);
    let mut duplicates_removed = 0;
    for &t in order.iter().take(m_tasks) {
        let mut evals: Vec<&(Vec<f64>, f64)> = histories[t].iter().collect();
        evals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for (theta, _) in evals.iter().take(m_each) {
            if thetas.contains(theta) {
                duplicates_removed += 1;
            } else {
                thetas.push(theta.clone());
            }
        }
    }
    Ok(WarmStart { thetas, duplicates_removed })
}

/// The single best θ from each nonempty history, in task order: the
/// finite candidate set for the BLR first-iteration rule. Ties keep the
/// earliest evaluation.
pub fn best_theta_per_task(histories: &[&[(Vec<f64>, f64)]]) -> Vec<Vec<f64>> {
    histories
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| {
            let mut best = &h[0];
            for e in &h[1..] {
                if e.1 > best.1 {
                    best = e;
                }
            }
            best.0.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Dataset;
    use crate::surrogates::{fit_surrogate, FitConfig, SurrogateKind, TaskRecord};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_space() -> HyperparameterSpace {
        HyperparameterSpace::new(vec![
            Dimension::linear("a", -8.0, 8.0),
            Dimension::log("c", 2f64.powi(-7), 2f64.powi(10)),
            Dimension::integer("k", 1.0, 32.0),
        ])
        .unwrap()
    }

    fn small_cfg() -> AcquisitionConfig {
        AcquisitionConfig { candidates: 2000, refine_iters: 40, ..AcquisitionConfig::default() }
    }

    #[test]
    fn ei_at_zero_gap_is_sigma_over_sqrt_2pi() {
        let v = expected_improvement(1.01, 1.0, 1.0, 0.01);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ei_noiseless_limit() {
        assert_eq!(expected_improvement(0.5, 0.0, 0.6, 0.01), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 0.5, 0.01), 0.0);
        let v = expected_improvement(1.0, 0.0, 0.6, 0.01);
        assert!((v - 0.39).abs() < 1e-12);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let analytic = expected_improvement(0.5, 0.04, 0.6, 0.01);
        let normal = rand_distr::Normal::new(0.5, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mc: f64 = (0..n)
            .map(|_| (rng.sample(normal) - 0.61f64).max(0.0))
            .sum::<f64>()
            / n as f64;
        assert!(
            (analytic - mc).abs() / mc < 1e-2,
            "analytic {analytic} vs Monte Carlo {mc}"
        );
    }

    #[test]
    fn confidence_bound_examples() {
        assert!((confidence_bound(0.0, 1.0, 2.58, Direction::Lower) + 2.58).abs() < 1e-15);
        assert_eq!(confidence_bound(0.7, 0.0, 2.58, Direction::Lower), 0.7);
        assert_eq!(confidence_bound(0.7, 0.0, 2.58, Direction::Upper), 0.7);
    }

    proptest! {
        #[test]
        fn ei_monotone_in_mean(
            mean in -3.0..3.0f64,
            sigma in 0.01..2.0f64,
            z_max in -1.0..1.0f64,
            delta in 0.0..2.0f64,
        ) {
            let lo = expected_improvement(mean, sigma * sigma, z_max, 0.01);
            let hi = expected_improvement(mean + delta, sigma * sigma, z_max, 0.01);
            prop_assert!(hi >= lo - 1e-12);
        }

        #[test]
        fn ei_monotone_in_sigma_below_incumbent(
            gap in 0.0..3.0f64,
            sigma in 0.01..2.0f64,
            z_max in -1.0..1.0f64,
            extra in 0.0..2.0f64,
        ) {
            let mean = z_max + 0.01 - gap;
            let lo = expected_improvement(mean, sigma * sigma, z_max, 0.01);
            let hi = expected_improvement(mean, (sigma + extra).powi(2), z_max, 0.01);
            prop_assert!(hi >= lo - 1e-12);
        }

        #[test]
        fn lcb_ucb_bracket_mean(mean in -5.0..5.0f64, var in 0.0..4.0f64) {
            let lcb = confidence_bound(mean, var, 2.58, Direction::Lower);
            let ucb = confidence_bound(mean, var, 2.58, Direction::Upper);
            prop_assert!(lcb <= mean && mean <= ucb);
        }

        #[test]
        fn transform_round_trip(
            raw in proptest::collection::vec(0.0..1.0f64, 3),
            stats_seed in 0u64..1000,
        ) {
            let mut space = test_space();
            let mut rng = ChaCha8Rng::seed_from_u64(stats_seed);
            let pool: Vec<Vec<f64>> = (0..8).map(|_| space.sample_native(&mut rng)).collect();
            space.set_standardization(&pool).unwrap();
            let native: Vec<f64> = space
                .dims()
                .iter()
                .zip(&raw)
                .map(|(d, r)| d.lower + r * (d.upper - d.lower))
                .collect();
            let (std_coords, clamped) = space.transform(&native);
            prop_assert!(!clamped);
            let (back, _) = space.untransform(&std_coords);
            for (a, b) in native.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transform_centers_source_mean_and_is_linear_in_log() {
        let mut space = test_space();
        let pool = vec![vec![-2.0, 1.0, 4.0], vec![6.0, 16.0, 12.0]];
        space.set_standardization(&pool).unwrap();
        let mean_native = vec![2.0, 4.0, 8.0];
        let (t, _) = space.transform(&mean_native);
        assert!(t[0].abs() < 1e-12);
        assert!(t[1].abs() < 1e-12, "log dim centers at the geometric mean");

        let (a, _) = space.transform(&[0.0, 2.0, 1.0]);
        let (b, _) = space.transform(&[0.0, 8.0, 1.0]);
        let (c, _) = space.transform(&[0.0, 32.0, 1.0]);
        assert!((b[1] - a[1] - (c[1] - b[1])).abs() < 1e-10, "equal log steps stay equal");
    }

    #[test]
    fn out_of_bounds_transform_clamps_and_flags() {
        let space = test_space();
        let (t, clamped) = space.transform(&[9.5, 1.0, 40.0]);
        assert!(clamped);
        let (native, _) = space.untransform(&t);
        assert_eq!(native[0], 8.0);
        assert_eq!(native[2], 32.0);
    }

    #[test]
    fn finalize_rounds_integer_dims_up() {
        let space = test_space();
        let theta = space.finalize(vec![0.3, 1.0, 3.2]);
        assert_eq!(theta[2], 4.0);
        let same = space.finalize(theta.clone());
        assert_eq!(same, theta);
    }

    #[test]
    fn sampling_is_uniform_in_search_scale() {
        let space = test_space();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mean_log: f64 =
            (0..n).map(|_| space.sample_native(&mut rng)[1].ln()).sum::<f64>() / n as f64;
        let (lo, hi) = ((2f64).powi(-7).ln(), (2f64).powi(10).ln());
        assert!(
            (mean_log - (lo + hi) / 2.0).abs() < 0.05 * (hi - lo),
            "log-dim draws center on the midpoint of the log range"
        );
    }

    #[test]
    fn candidate_ordering_prefers_low_sigma_then_low_index() {
        let mut top = TopCandidates::new(2);
        top.push(CandidateScore { value: 1.0, sigma: 0.9, index: 0, theta: vec![] });
        top.push(CandidateScore { value: 1.0, sigma: 0.2, index: 5, theta: vec![] });
        top.push(CandidateScore { value: f64::NAN, sigma: 0.0, index: 1, theta: vec![] });
        top.push(CandidateScore { value: 1.0, sigma: 0.2, index: 3, theta: vec![] });
        assert_eq!(top.entries.len(), 2);
        assert_eq!(top.entries[0].index, 3, "equal value and σ: earlier index wins");
        assert_eq!(top.entries[1].index, 5);
    }

    #[test]
    fn zero_observation_surrogate_proposes_random() {
        let surrogate = FittedSurrogate::constant_for_tests(0.0, 1.0, 3, 0);
        let space = test_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = propose_next(
            &surrogate,
            &space,
            &[],
            &[],
            &AcquisitionConfig::default(),
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.rule, AcquisitionRule::Random);
        assert!(!p.numeric_fallback);
        for (j, d) in space.dims().iter().enumerate() {
            assert!(p.theta[j] >= d.lower && p.theta[j] <= d.upper);
        }
    }

    #[test]
    fn flat_posterior_below_incumbent_takes_ucb_branch() {
        let surrogate = FittedSurrogate::constant_for_tests(0.0, 1e-12, 3, 5);
        let space = test_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let history = vec![(vec![0.0, 1.0, 2.0], 10.0)];
        let p = propose_next(&surrogate, &space, &history, &[], &small_cfg(), 2, &mut rng)
            .unwrap();
        assert_eq!(p.rule, AcquisitionRule::UcbFallback);
        assert!(p.acquisition >= p.candidate_max - 1e-12);
        for (j, d) in space.dims().iter().enumerate() {
            assert!(p.theta[j] >= d.lower && p.theta[j] <= d.upper);
        }
        assert_eq!(p.theta[2], p.theta[2].ceil());
    }

    #[test]
    fn proposals_are_deterministic_given_seed() {
        let surrogate = FittedSurrogate::constant_for_tests(1.0, 0.2, 3, 4);
        let space = test_space();
        let history = vec![(vec![0.0, 1.0, 2.0], 0.5)];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            propose_next(&surrogate, &space, &history, &[], &small_cfg(), 3, &mut rng)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.rule, AcquisitionRule::ExpectedImprovement);
    }

    /// A 1-d objective peaked at θ* = 2, observed on a grid in one source
    /// task whose dataset (and manual vector) the target shares exactly.
    /// The learned task similarity is then 1, the posterior mean peaks at
    /// the source optimum, and the first-iteration LCB proposal lands on
    /// it without any target data.
    #[test]
    fn first_iteration_lcb_exploits_identical_source_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((24, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(24, |i| f64::tanh(x[[i, 0]] * 0.7));
        let data = Dataset::regression(x, y).unwrap().normalized();

        let mut space = HyperparameterSpace::new(vec![Dimension::linear("t", -8.0, 8.0)])
            .unwrap();
        let grid: Vec<f64> = (0..17).map(|i| -8.0 + i as f64).collect();
        space.set_standardization(&grid.iter().map(|&g| vec![g]).collect::<Vec<_>>()).unwrap();

        let mut source = TaskRecord::new(data.clone(), 24, 1.0);
        source.manual_vector = Some(vec![0.3, 0.7]);
        for &g in &grid {
            let (std_theta, _) = space.transform(&[g]);
            source.push_eval(std_theta, (-(g - 2.0f64).powi(2) / 2.0).exp());
        }
        let mut target = TaskRecord::new(data, 24, 1.0);
        target.manual_vector = Some(vec![0.3, 0.7]);

        let mut cfg = FitConfig::new(SurrogateKind::ManualGP, 1, 5);
        cfg.max_steps = 300;
        let fitted = fit_surrogate(&[source, target], &cfg, None).unwrap();
        let sims = fitted.task_similarities().unwrap();
        assert!(sims[0] >= 0.99, "identical tasks should look identical: {}", sims[0]);

        let mut prop_rng = ChaCha8Rng::seed_from_u64(8);
        let acq = AcquisitionConfig { candidates: 4000, ..AcquisitionConfig::default() };
        let p = propose_next(&fitted, &space, &[], &[], &acq, 1, &mut prop_rng).unwrap();
        assert_eq!(p.rule, AcquisitionRule::LcbFullSpace);
        assert!(
            (p.theta[0] - 2.0).abs() <= 0.2,
            "LCB should land near the source optimum, got {}",
            p.theta[0]
        );
        assert!(p.acquisition >= p.candidate_max - 1e-12);
    }

    #[test]
    fn blr_first_iteration_picks_from_source_best_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tasks = Vec::new();
        for t in 0..3 {
            let x = Array2::from_shape_fn((14, 2), |_| rng.gen_range(-1.0..1.0));
            let y = Array1::from_shape_fn(14, |i| (x[[i, 0]] + 0.1 * t as f64).tanh());
            let data = Dataset::regression(x, y).unwrap().normalized();
            let mut rec = TaskRecord::new(data, 14, 1.0);
            rec.manual_vector = Some(vec![0.2 * t as f64, 1.0 - 0.2 * t as f64]);
            if t < 2 {
                for k in 0..5 {
                    let theta = vec![-1.0 + k as f64 * 0.5 + 0.1 * t as f64];
                    let z = 0.3 + 0.1 * k as f64 + 0.05 * t as f64;
                    rec.push_eval(theta, z);
                }
            }
            tasks.push(rec);
        }
        let histories: Vec<&[(Vec<f64>, f64)]> =
            tasks[..2].iter().map(|t| t.history.as_slice()).collect();
        let source_best = best_theta_per_task(&histories);
        assert_eq!(source_best, vec![vec![1.0], vec![1.1]]);

        let mut cfg = FitConfig::new(SurrogateKind::ManualBLR, 2, 9);
        cfg.max_steps = 80;
        cfg.feature_width = 8;
        let fitted = fit_surrogate(&tasks, &cfg, None).unwrap();

        let space = HyperparameterSpace::new(vec![Dimension::linear("t", -2.0, 2.0)]).unwrap();
        let mut prop_rng = ChaCha8Rng::seed_from_u64(2);
        let p = propose_next(
            &fitted,
            &space,
            &[],
            &source_best,
            &small_cfg(),
            1,
            &mut prop_rng,
        )
        .unwrap();
        assert_eq!(p.rule, AcquisitionRule::LcbSourceBest);
        assert!(source_best.contains(&p.theta));
    }

    #[test]
    fn warm_start_matches_brute_force_ordering() {
        let h0: Vec<(Vec<f64>, f64)> =
            vec![(vec![1.0], 0.2), (vec![2.0], 0.9), (vec![3.0], 0.5), (vec![4.0], 0.7)];
        let h1: Vec<(Vec<f64>, f64)> = vec![(vec![5.0], 0.4), (vec![6.0], 0.6)];
        let h2: Vec<(Vec<f64>, f64)> =
            vec![(vec![7.0], 0.95), (vec![8.0], 0.1), (vec![9.0], 0.8), (vec![2.0], 0.85)];
        let histories: Vec<&[(Vec<f64>, f64)]> = vec![&h0, &h1, &h2];
        let sims = [0.5, 0.2, 0.9];

        let ws = warm_start_select(&sims, &histories, 3, 3).unwrap();
        let expect: Vec<Vec<f64>> = vec![
            vec![7.0],
            vec![2.0],
            vec![9.0],
            vec![4.0],
            vec![3.0],
            vec![6.0],
            vec![5.0],
        ];
        assert_eq!(ws.thetas, expect, "task 2 first, then 0, then 1; best z first inside");
        assert_eq!(ws.duplicates_removed, 1, "θ=2 appears in tasks 0 and 2");

        let top1 = warm_start_select(&sims, &histories, 1, 1).unwrap();
        assert_eq!(top1.thetas, vec![vec![7.0]]);
        assert_eq!(top1.duplicates_removed, 0);

        let two = warm_start_select(&[0.9, 0.1], &histories[..2].to_vec(), 1, 3).unwrap();
        assert!(two.thetas.iter().all(|t| t[0] <= 4.0), "only the similar task contributes");

        let short = warm_start_select(&sims, &histories, 2, 3).unwrap();
        assert_eq!(short.thetas.len(), 5, "task 1 has only 2 evals to give");
    }

    #[test]
    fn warm_start_contract_violations() {
        let h: Vec<(Vec<f64>, f64)> = vec![(vec![1.0], 0.5)];
        let empty: Vec<(Vec<f64>, f64)> = Vec::new();
        let histories: Vec<&[(Vec<f64>, f64)]> = vec![&h, &empty];
        assert!(matches!(
            warm_start_select(&[0.5, 0.5], &histories, 2, 1),
            Err(Error::Contract(_))
        ));
        let ok: Vec<&[(Vec<f64>, f64)]> = vec![&h];
        assert!(matches!(
            warm_start_select(&[0.5], &ok, 2, 1),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            warm_start_select(&[0.5, 0.5], &ok, 1, 1),
            Err(Error::Contract(_))
        ));
    }
}
