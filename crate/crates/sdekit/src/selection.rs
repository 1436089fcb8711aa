//! Information criteria, model-space search, and their calibration math.
//!
//! Selection asks a sharper question than fitting: out of the 2^n0 subsets
//! of a basis library, which one generated the data? Every criterion here
//! answers by penalizing the fitted quasi log-likelihood, so all of them
//! are compared by value and only differences ever matter.
//!
//! The penalty is where they part ways. AIC charges 1 per parameter, which
//! is exactly the median spurious gain of one superfluous function, so it
//! overfits with probability P(chi^2_1 > 2) ~ 0.157 per candidate. The
//! [`Criterion::Pastis`] penalty ln(n0/p) instead dominates the expected
//! maximum of all n0 spurious gains, which extreme-value theory places
//! near ln n0; the residual failure rate is [`predicted_error_rate`].
//!
//! Search is a seeded stochastic hill climb ([`greedy_search`]) over
//! single add-or-remove moves, with [`exhaustive_search`] as the oracle on
//! small libraries and [`stlsq`] as the thresholding baseline.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFunction, BasisLibrary, ModelBasis};
use crate::error::{Error, Result};
use crate::estimators::{diffusion_simple, BuildOpts, FitCache};
use crate::num::{erf, Scalar};
use crate::rng::{rng_for, stream};
use crate::trajectory::Trajectory;

/// Euler-Mascheroni constant, the mean of a standard Gumbel variate.
const EULER_GAMMA: f64 = 0.5772156649015329;

/// A model-scoring rule: penalized fit quality, always maximized.
///
/// The plain criteria score the left-endpoint fit. The two robust variants
/// bind a different estimator and likelihood so the criterion survives the
/// regime that breaks the plain fit: [`Criterion::PastisDt`] scores the
/// midpoint fit under the sampling-interval-corrected likelihood, and
/// [`Criterion::PastisSigma`] the lagged fit under the measurement-noise
/// immune likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum Criterion<T: Scalar> {
    /// Likelihood minus the parameter count.
    Aic,
    /// Likelihood minus (n_B / 2) ln tau. Note the penalty is negative for
    /// tau < 1: BIC is not uniformly stricter than AIC.
    Bic,
    /// BIC plus `gamma` times the log-count of models of the same size,
    /// gamma in [0, 1].
    Ebic { gamma: T },
    /// Mean held-out likelihood over contiguous time folds.
    Cv { folds: usize },
    /// Likelihood minus n_B ln(n0 / p): the penalty calibrated against the
    /// maximum spurious gain over the whole library, with tail mass `p`.
    Pastis { p: T },
    /// PASTIS on the midpoint estimator, robust to coarse sampling.
    PastisDt { p: T },
    /// PASTIS on the lagged estimator, robust to measurement noise.
    PastisSigma { p: T },
}

impl<T: Scalar> Criterion<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Criterion::Ebic { gamma } => {
                if gamma < T::zero() || gamma > T::one() {
                    return Err(Error::domain("EBIC gamma must lie in [0, 1]"));
                }
            }
            Criterion::Cv { folds } => {
                if folds < 2 {
                    return Err(Error::invalid("cross-validation needs at least 2 folds"));
                }
            }
            Criterion::Pastis { p }
            | Criterion::PastisDt { p }
            | Criterion::PastisSigma { p } => {
                if p <= T::zero() || p >= T::one() {
                    return Err(Error::domain("the PASTIS parameter p must lie in (0, 1)"));
                }
            }
            Criterion::Aic | Criterion::Bic => {}
        }
        Ok(())
    }

    /// Stable lowercase label, used in reports and result tables.
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
            Criterion::Ebic { .. } => "ebic",
            Criterion::Cv { .. } => "cv",
            Criterion::Pastis { .. } => "pastis",
            Criterion::PastisDt { .. } => "pastis_dt",
            Criterion::PastisSigma { .. } => "pastis_sigma",
        }
    }

    /// Amount subtracted from the fitted likelihood of an n_b-parameter
    /// model. Zero for the empty model under every variant.
    fn penalty(&self, n_b: usize, n0: usize, tau: T) -> T {
        let nb = T::from_usize(n_b).unwrap();
        let half = T::of(0.5);
        match *self {
            Criterion::Aic => nb,
            Criterion::Bic => nb * half * tau.ln(),
            Criterion::Ebic { gamma } => nb * half * tau.ln() + gamma * ln_choose(n0, n_b),
            Criterion::Cv { .. } => T::zero(),
            Criterion::Pastis { p } | Criterion::PastisDt { p } | Criterion::PastisSigma { p } => {
                nb * (T::from_usize(n0).unwrap() / p).ln()
            }
        }
    }
}

/// ln C(n, k) as a sum of logs; exact to rounding for any library size.
fn ln_choose<T: Scalar>(n: usize, k: usize) -> T {
    let mut acc = T::zero();
    for i in 0..k {
        acc += T::from_usize(n - i).unwrap().ln() - T::from_usize(i + 1).unwrap().ln();
    }
    acc
}

/// Outcome of a model-space search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SelectionResult<T: Scalar> {
    pub chosen: ModelBasis,
    /// Criterion value of `chosen`; the maximum over every model in `trace`.
    pub score: T,
    /// Accepted states per restart, each starting with the initial model.
    pub trace: Vec<Vec<(ModelBasis, T)>>,
    pub restarts: usize,
    pub seed: u64,
}

/// Set agreement between a selected model and the generating one, all
/// rates normalized by the union size so they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AccuracyReport<T: Scalar> {
    pub exact_match: bool,
    pub true_positive: T,
    pub false_positive: T,
    pub false_negative: T,
}

enum Engine<T: Scalar> {
    Plain(FitCache<T>),
    Cv(Vec<Fold<T>>),
}

struct Fold<T: Scalar> {
    train: FitCache<T>,
    test: FitCache<T>,
}

/// Memoized criterion evaluation for one trajectory.
///
/// Building one costs a full pass over the data (several for CV); scoring a
/// model afterwards costs one small linear solve, so search loops can probe
/// thousands of models cheaply. Models whose Gram is singular score minus
/// infinity, which excludes them from any comparison without aborting the
/// search. Scores are pure functions of the model, so memoization can never
/// change a search outcome, only its cost.
pub struct Scorer<T: Scalar> {
    criterion: Criterion<T>,
    engine: Engine<T>,
    n0: usize,
    memo: HashMap<ModelBasis, T>,
}

impl<T: Scalar> Scorer<T> {
    pub fn new(
        traj: &Trajectory<T>,
        library: &BasisLibrary,
        criterion: Criterion<T>,
    ) -> Result<Self> {
        criterion.validate()?;
        let engine = match criterion {
            Criterion::Cv { folds } => Engine::Cv(build_folds(traj, library, folds, None)?),
            Criterion::PastisDt { .. } => {
                Engine::Plain(FitCache::trapeze(traj, library)?)
            }
            Criterion::PastisSigma { .. } => Engine::Plain(FitCache::shift(traj, library)?),
            _ => Engine::Plain(FitCache::aml(traj, library)?),
        };
        Ok(Scorer {
            criterion,
            engine,
            n0: library.len(),
            memo: HashMap::new(),
        })
    }

    /// Criterion value of one model, memoized.
    pub fn score(&mut self, model: &ModelBasis) -> Result<T> {
        if let Some(&s) = self.memo.get(model) {
            return Ok(s);
        }
        let s = match &self.engine {
            Engine::Plain(cache) => criterion_value(cache, &self.criterion, self.n0, model)?,
            Engine::Cv(folds) => cv_mean(folds, model)?,
        };
        self.memo.insert(model.clone(), s);
        Ok(s)
    }

    /// Number of distinct models scored so far.
    pub fn models_scored(&self) -> usize {
        self.memo.len()
    }
}

fn criterion_value<T: Scalar>(
    cache: &FitCache<T>,
    criterion: &Criterion<T>,
    n0: usize,
    model: &ModelBasis,
) -> Result<T> {
    match cache.score(model) {
        Ok(f) => Ok(f.log_likelihood - criterion.penalty(model.len(), n0, cache.tau())),
        Err(Error::SingularGram) => Ok(T::of(f64::NEG_INFINITY)),
        Err(e) => Err(e),
    }
}

fn cv_mean<T: Scalar>(folds: &[Fold<T>], model: &ModelBasis) -> Result<T> {
    let mut acc = T::zero();
    for fold in folds {
        let fitted = match fold.train.score(model) {
            Ok(f) => f,
            Err(Error::SingularGram) => return Ok(T::of(f64::NEG_INFINITY)),
            Err(e) => return Err(e),
        };
        acc += fold.test.evaluate(model, &fitted.coefficients)?;
    }
    Ok(acc / T::from_usize(folds.len()).unwrap())
}

/// Contiguous time blocks; the train cache of fold f excludes exactly the
/// increments the test cache keeps, so no increment straddles the split and
/// nothing is shared but the trajectory-wide weight.
fn build_folds<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    k: usize,
    subset: Option<&ModelBasis>,
) -> Result<Vec<Fold<T>>> {
    let rows = traj.len().saturating_sub(1);
    if rows / k < 2 {
        return Err(Error::InsufficientData {
            what: "cross-validation folds of at least two increments",
            needed: 2 * k + 1,
            got: traj.len(),
        });
    }
    let shared = diffusion_simple(traj)?;
    let weight = shared.weight()?;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let lo = f * rows / k;
        let hi = (f + 1) * rows / k;
        let train = FitCache::build_aml(
            traj,
            library,
            subset,
            BuildOpts {
                rows: None,
                exclude: Some((lo, hi)),
                weight: Some((weight.clone(), shared.clone())),
            },
        )?;
        let test = FitCache::build_aml(
            traj,
            library,
            subset,
            BuildOpts {
                rows: Some((lo, hi)),
                exclude: None,
                weight: Some((weight.clone(), shared.clone())),
            },
        )?;
        folds.push(Fold { train, test });
    }
    Ok(folds)
}

/// Criterion value of a single model. One-shot companion of [`Scorer`],
/// restricting all moment computation to the model's own functions.
pub fn score<T: Scalar>(
    criterion: &Criterion<T>,
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
) -> Result<T> {
    criterion.validate()?;
    match *criterion {
        Criterion::Cv { folds } => cv_score(traj, library, model, folds),
        Criterion::PastisDt { .. } => {
            let cache = FitCache::build_trapeze(traj, library, Some(model), BuildOpts::default())?;
            criterion_value(&cache, criterion, library.len(), model)
        }
        Criterion::PastisSigma { .. } => {
            let cache = FitCache::build_shift(traj, library, Some(model), BuildOpts::default())?;
            criterion_value(&cache, criterion, library.len(), model)
        }
        _ => {
            let cache = FitCache::build_aml(traj, library, Some(model), BuildOpts::default())?;
            criterion_value(&cache, criterion, library.len(), model)
        }
    }
}

/// Mean held-out log-likelihood of `model` over `k` contiguous folds. The
/// weight comes from the whole trajectory so folds score on a common scale.
pub fn cv_score<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    k: usize,
) -> Result<T> {
    Criterion::<T>::Cv { folds: k }.validate()?;
    let folds = build_folds(traj, library, k, Some(model))?;
    cv_mean(&folds, model)
}

/// Stochastic hill climb over single add-or-remove moves.
///
/// Runs n0 + 2 restarts: from the empty model, from the full library, and
/// from n0 subsets drawn with each function included at probability 1/2.
/// Each restart proposes a uniformly random toggle, accepts only strict
/// improvements, and stops after 2 n0 consecutive rejections, so every
/// move has been proposed about twice in expectation since the last
/// acceptance. Restarts share the memo table; the best final state wins,
/// with ties broken toward fewer functions, then lexicographically.
///
/// The master seed feeds one generator on a dedicated stream; per-restart
/// generators are seeded from its successive draws, so each restart's walk
/// is independent of scheduling and the whole search is reproducible.
pub fn greedy_search<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    criterion: &Criterion<T>,
    seed: u64,
) -> Result<SelectionResult<T>> {
    let n0 = library.len();
    if n0 == 0 {
        return Err(Error::invalid("cannot search an empty library"));
    }
    let mut scorer = Scorer::new(traj, library, *criterion)?;
    let mut master = rng_for(seed, stream::SEARCH);
    let restart_seeds: Vec<u64> = (0..n0 + 2).map(|_| master.random()).collect();
    let mut best: Option<(ModelBasis, T)> = None;
    let mut trace = Vec::with_capacity(n0 + 2);
    for (r, &rs) in restart_seeds.iter().enumerate() {
        let mut rng = rng_for(rs, stream::SEARCH);
        let mut current = match r {
            0 => ModelBasis::empty(),
            1 => ModelBasis::full(n0),
            _ => (0..n0).filter(|_| rng.random::<bool>()).collect(),
        };
        let mut current_score = scorer.score(&current)?;
        let mut accepted = vec![(current.clone(), current_score)];
        let mut stall = 0;
        while stall < 2 * n0 {
            let cand = current.toggled(rng.random_range(0..n0));
            let s = scorer.score(&cand)?;
            if s > current_score {
                current = cand;
                current_score = s;
                accepted.push((current.clone(), current_score));
                stall = 0;
            } else {
                stall += 1;
            }
        }
        if improves(&current, current_score, &best) {
            best = Some((current.clone(), current_score));
        }
        trace.push(accepted);
    }
    let (chosen, score) = best.expect("at least one restart ran");
    Ok(SelectionResult {
        chosen,
        score,
        trace,
        restarts: n0 + 2,
        seed,
    })
}

/// Scores every subset of the library. The oracle for small instances;
/// cost doubles per function, so it is capped rather than left to run
/// for hours on a miscall.
pub fn exhaustive_search<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    criterion: &Criterion<T>,
) -> Result<SelectionResult<T>> {
    let n0 = library.len();
    if n0 == 0 {
        return Err(Error::invalid("cannot search an empty library"));
    }
    if n0 > 24 {
        return Err(Error::invalid(
            "exhaustive search is limited to 24 basis functions",
        ));
    }
    let mut scorer = Scorer::new(traj, library, *criterion)?;
    let mut best: Option<(ModelBasis, T)> = None;
    for mask in 0u64..(1u64 << n0) {
        let model: ModelBasis = (0..n0).filter(|i| mask >> i & 1 == 1).collect();
        let s = scorer.score(&model)?;
        if improves(&model, s, &best) {
            best = Some((model, s));
        }
    }
    let (chosen, score) = best.expect("the empty model is always scored");
    Ok(SelectionResult {
        trace: vec![vec![(chosen.clone(), score)]],
        chosen,
        score,
        restarts: 0,
        seed: 0,
    })
}

/// Strictly-better-or-preferred-tie ordering shared by both searches.
fn improves<T: Scalar>(cand: &ModelBasis, s: T, best: &Option<(ModelBasis, T)>) -> bool {
    match best {
        None => true,
        Some((b, bs)) => {
            s > *bs
                || (s == *bs
                    && (cand.len() < b.len()
                        || (cand.len() == b.len() && cand.indices() < b.indices())))
        }
    }
}

/// Sequentially thresholded least squares: fit the active set with the
/// usual weighted regression, drop every function whose coefficient falls
/// below `threshold` in magnitude, refit, and repeat until stable (or
/// `max_iter`). The empty set is a valid outcome.
pub fn stlsq<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    threshold: T,
    max_iter: usize,
) -> Result<ModelBasis> {
    if threshold < T::zero() {
        return Err(Error::invalid("threshold must be non-negative"));
    }
    let cache = FitCache::aml(traj, library)?;
    let mut active = ModelBasis::full(library.len());
    for _ in 0..max_iter {
        if active.is_empty() {
            break;
        }
        let fit = cache.score(&active)?;
        let kept: ModelBasis = active
            .indices()
            .iter()
            .zip(&fit.coefficients)
            .filter(|(_, &a)| a.abs() >= threshold)
            .map(|(&i, _)| i)
            .collect();
        if kept == active {
            break;
        }
        active = kept;
    }
    Ok(active)
}

/// Set agreement between `selected` and `truth`. Two empty models count
/// as an exact match with all rates zero.
pub fn accuracy<T: Scalar>(selected: &ModelBasis, truth: &ModelBasis) -> AccuracyReport<T> {
    let inter = selected.intersection_size(truth);
    let union = selected.union_size(truth);
    if union == 0 {
        return AccuracyReport {
            exact_match: true,
            true_positive: T::zero(),
            false_positive: T::zero(),
            false_negative: T::zero(),
        };
    }
    let u = T::from_usize(union).unwrap();
    AccuracyReport {
        exact_match: selected == truth,
        true_positive: T::from_usize(inter).unwrap() / u,
        false_positive: T::from_usize(selected.len() - inter).unwrap() / u,
        false_negative: T::from_usize(truth.len() - inter).unwrap() / u,
    }
}

/// CDF of the largest spurious likelihood gain among `n` independent
/// superfluous candidates: each gain is chi^2_1 / 2, so the maximum has
/// CDF erf(sqrt(z))^n.
pub fn max_gain_cdf<T: Scalar>(z: T, n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::domain("the maximum needs at least one candidate"));
    }
    if z < T::zero() {
        return Err(Error::domain("likelihood gains are non-negative"));
    }
    Ok(erf(z.sqrt()).powi(n as i32))
}

/// Which asymptotic expansion of the Gumbel location to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelOrder {
    /// ln n, the leading term.
    First,
    /// ln n - ln(ln n)/2 - ln(pi)/2, accurate already at moderate n.
    Refined,
}

/// Location of the Gumbel distribution approximating [`max_gain_cdf`].
pub fn gumbel_location<T: Scalar>(n: usize, order: GumbelOrder) -> Result<T> {
    match order {
        GumbelOrder::First => {
            if n == 0 {
                return Err(Error::domain("the maximum needs at least one candidate"));
            }
            Ok(T::from_usize(n).unwrap().ln())
        }
        GumbelOrder::Refined => {
            if n < 3 {
                return Err(Error::domain(
                    "the refined location needs at least three candidates",
                ));
            }
            let ln_n = T::from_usize(n).unwrap().ln();
            Ok(ln_n - T::of(0.5) * ln_n.ln() - T::of(0.5) * T::pi().ln())
        }
    }
}

/// Mean of the Gumbel-approximated maximum gain: location plus the
/// Euler-Mascheroni constant.
pub fn expected_max_gain<T: Scalar>(n: usize, order: GumbelOrder) -> Result<T> {
    Ok(gumbel_location::<T>(n, order)? + T::of(EULER_GAMMA))
}

/// Probability that the PASTIS penalty ln(n0/p) is beaten by at least one
/// of the n0 - n_star spurious gains: 1 - erf(sqrt(ln(n0/p)))^(n0 - n_star).
/// This is the criterion's predicted asymptotic error rate.
pub fn predicted_error_rate<T: Scalar>(p: T, n0: usize, n_star: usize) -> Result<T> {
    if p <= T::zero() || p >= T::one() {
        return Err(Error::domain("p must lie in (0, 1)"));
    }
    if n_star >= n0 {
        return Err(Error::domain(
            "the library must be larger than the true model",
        ));
    }
    // p < 1 <= n0 makes ln(n0/p) positive, so the square root is safe.
    let ln_ratio = (T::from_usize(n0).unwrap() / p).ln();
    Ok(T::one() - erf(ln_ratio.sqrt()).powi((n0 - n_star) as i32))
}

/// Kolmogorov-Smirnov distance between a sample and a reference CDF.
pub fn ks_statistic<T: Scalar>(samples: &[T], cdf: impl Fn(T) -> T) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::InsufficientData {
            what: "Kolmogorov-Smirnov statistic",
            needed: 1,
            got: 0,
        });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("sample contains NaN"));
    let n = T::from_usize(xs.len()).unwrap();
    let mut sup = T::zero();
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = T::from_usize(i).unwrap() / n;
        let hi = T::from_usize(i + 1).unwrap() / n;
        sup = sup.max((f - lo).abs()).max((f - hi).abs());
    }
    Ok(sup)
}

/// Monte-Carlo estimate of how often AIC keeps a superfluous term.
///
/// Simulates a one-dimensional relaxation process, offers one spurious
/// candidate (the quadratic) next to the true linear term, and counts the
/// fraction of runs where the likelihood gain beats the AIC penalty of 1.
/// The asymptotic value is P(chi^2_1 > 2) = erfc(1) ~ 0.157.
pub fn aic_overfit_probability_check<T: Scalar>(runs: usize, seed: u64) -> Result<T>
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    overfit_fraction(T::one(), runs, seed)
}

/// Fraction of seeded runs whose one-superfluous-term gain exceeds `gate`.
fn overfit_fraction<T: Scalar>(gate: T, runs: usize, seed: u64) -> Result<T>
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    use crate::sde::{simulate, BurnIn, DriftSpec, NoiseSpec};
    if runs < 100 {
        return Err(Error::invalid(
            "too few runs to estimate an overfit probability; use at least 100",
        ));
    }
    let drift = DriftSpec::Ou {
        a: nalgebra::DMatrix::from_element(1, 1, T::one()),
    };
    let noise = NoiseSpec::AdditiveScalar { d: T::one() };
    let library = BasisLibrary::new(vec![
        BasisFunction::monomial(0, vec![1])?,
        BasisFunction::monomial(0, vec![2])?,
    ])?;
    let truth = ModelBasis::new(vec![0])?;
    let padded = ModelBasis::new(vec![0, 1])?;
    let mut master = rng_for(seed, stream::SEARCH);
    let mut hits = 0usize;
    for _ in 0..runs {
        let run_seed: u64 = master.random();
        let traj = simulate(
            &drift,
            &noise,
            &[T::zero()],
            T::of(0.01),
            10_000,
            run_seed,
            BurnIn::Default,
        )?
        .trajectory;
        let cache = FitCache::aml(&traj, &library)?;
        let gain = cache.score(&padded)?.log_likelihood - cache.score(&truth)?.log_likelihood;
        if gain > gate {
            hits += 1;
        }
    }
    Ok(T::from_usize(hits).unwrap() / T::from_usize(runs).unwrap())
}
