//! Synthetic binary classification tasks with a random-Fourier-feature
//! latent function. Each task draws its own weight vector over a shared
//! feature map, so tasks built with the same bandwidths still realize
//! distinct decision surfaces.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embeddings::Dataset;
use crate::error::{Error, Result};

/// Number of random Fourier features in the latent map.
pub const RFF_FREQUENCIES: usize = 200;
/// Weight redraws allowed before giving up on a degenerate task.
const BETA_RESAMPLE_LIMIT: usize = 10;
/// The latent function is rescaled to exactly this logit range.
const LOGIT_RANGE: (f64, f64) = (-6.0, 6.0);

/// Frozen latent model of one generated task: the feature map, the weight
/// vector, and the affine rescaling that pins its logits to [−6, 6].
#[derive(Debug, Clone)]
pub struct RffModel {
    frequencies: Array2<f64>,
    phases: Array1<f64>,
    coefficients: Array1<f64>,
    bandwidths: Vec<f64>,
    latent_lo: f64,
    latent_hi: f64,
}

impl RffModel {
    /// Feature map φ(x) = √(2/D)·cos(Ux̃ + b) with x̃ the bandwidth-scaled
    /// input, one row per input row.
    pub fn features(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let d = self.frequencies.nrows();
        let mut scaled = x.to_owned();
        for (mut col, &bw) in scaled.columns_mut().into_iter().zip(&self.bandwidths) {
            col.mapv_inplace(|v| v / bw);
        }
        let mut phi = scaled.dot(&self.frequencies.t());
        let amp = (2.0 / d as f64).sqrt();
        for mut row in phi.rows_mut() {
            row += &self.phases;
            row.mapv_inplace(|v| amp * v.cos());
        }
        phi
    }

    /// Class-1 probability at each input row.
    pub fn probabilities(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        let raw = self.features(x).dot(&self.coefficients);
        let span = self.latent_hi - self.latent_lo;
        let (lo, hi) = LOGIT_RANGE;
        raw.mapv(|v| {
            let g = lo + (hi - lo) * (v - self.latent_lo) / span;
            0.5 * (1.0 + (0.5 * g).tanh())
        })
    }
}

/// One generated task: datasets for fitting and scoring plus the model
/// that produced them.
#[derive(Debug, Clone)]
pub struct RffTask {
    pub model: RffModel,
    pub train: Dataset,
    pub test: Dataset,
    /// Fraction of class-1 labels over both splits.
    pub label_rate: f64,
    /// Weight redraws that were needed to get both classes in both splits.
    pub beta_resamples: usize,
}

/// Generate a binary classification task of `s` training and `s` test
/// points: inputs are standard normal, scaled per dimension by
/// `bandwidths`, pushed through a 200-feature random Fourier map with a
/// fresh weight vector, min-max rescaled to logits in [−6, 6], and
/// labeled by a Bernoulli draw on the resulting probabilities. A weight
/// vector whose labels leave either split single-class is redrawn, up to
/// ten times.
pub fn gen_rff_logistic_task<R: Rng + ?Sized>(
    bandwidths: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<RffTask> {
    if s < 2 {
        return Err(Error::Contract(format!("need at least 2 points per split, got {s}")));
    }
    if bandwidths.is_empty() {
        return Err(Error::Contract("need at least one input dimension".into()));
    }
    if bandwidths.iter().any(|&b| b <= 0.0 || !b.is_finite()) {
        return Err(Error::Contract("bandwidths must be positive and finite".into()));
    }

    let p = bandwidths.len();
    let n = 2 * s;
    let x = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
    let frequencies =
        Array2::from_shape_fn((RFF_FREQUENCIES, p), |_| rng.sample::<f64, _>(StandardNormal));
    let phases = Array1::from_shape_fn(RFF_FREQUENCIES, |_| {
        rng.gen_range(0.0..2.0 * std::f64::consts::PI)
    });

    let mut model = RffModel {
        frequencies,
        phases,
        coefficients: Array1::zeros(RFF_FREQUENCIES),
        bandwidths: bandwidths.to_vec(),
        latent_lo: 0.0,
        latent_hi: 1.0,
    };
    let phi = model.features(&x.view());

    for attempt in 0..BETA_RESAMPLE_LIMIT {
        let beta =
            Array1::from_shape_fn(RFF_FREQUENCIES, |_| rng.sample::<f64, _>(StandardNormal));
        let raw = phi.dot(&beta);
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi - lo).is_finite() || hi - lo < 1e-12 {
            continue;
        }
        model.coefficients = beta;
        model.latent_lo = lo;
        model.latent_hi = hi;

        let probs = model.probabilities(&x.view());
        let labels: Vec<usize> =
            probs.iter().map(|&pr| usize::from(rng.gen::<f64>() < pr)).collect();

        let split_ok = |range: std::ops::Range<usize>| {
            let ones = labels[range.clone()].iter().filter(|&&l| l == 1).count();
            ones > 0 && ones < range.len()
        };
        if !split_ok(0..s) || !split_ok(s..n) {
            continue;
        }

        let train = Dataset::classification(
            x.slice(ndarray::s![..s, ..]).to_owned(),
            labels[..s].to_vec(),
            2,
        )?;
        let test = Dataset::classification(
            x.slice(ndarray::s![s.., ..]).to_owned(),
            labels[s..].to_vec(),
            2,
        )?;
        let label_rate = labels.iter().sum::<usize>() as f64 / n as f64;
        return Ok(RffTask { model, train, test, label_rate, beta_resamples: attempt });
    }
    Err(Error::Generation(format!(
        "no weight draw produced two-class splits in {BETA_RESAMPLE_LIMIT} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn features_are_amplitude_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = gen_rff_logistic_task(&[1.0, 2.0], 100, &mut rng).unwrap();
        let phi = task.model.features(&task.train.x.view());
        let bound = (2.0 / RFF_FREQUENCIES as f64).sqrt() + 1e-12;
        assert!(phi.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn logits_span_exactly_minus_six_to_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = gen_rff_logistic_task(&[0.5, 1.0, 4.0], 200, &mut rng).unwrap();
        let x_all = ndarray::concatenate(
            Axis(0),
            &[task.train.x.view(), task.test.x.view()],
        )
        .unwrap();
        let probs = task.model.probabilities(&x_all.view());
        let logits: Vec<f64> =
            probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        let lo = logits.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - -6.0).abs() < 1e-9, "min logit {lo}");
        assert!((hi - 6.0).abs() < 1e-9, "max logit {hi}");
    }

    #[test]
    fn both_splits_contain_both_classes() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = gen_rff_logistic_task(&[1.0], 50, &mut rng).unwrap();
            for split in [&task.train, &task.test] {
                let labels = split.labels.as_ref().unwrap();
                let ones: usize = labels.iter().sum();
                assert!(ones > 0 && ones < labels.len());
            }
            assert!(task.label_rate > 0.0 && task.label_rate < 1.0);
        }
    }

    #[test]
    fn same_bandwidths_still_give_distinct_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bw = [1.0, 1.0];
        let a = gen_rff_logistic_task(&bw, 100, &mut rng).unwrap();
        let b = gen_rff_logistic_task(&bw, 100, &mut rng).unwrap();
        let fresh = Array2::from_shape_fn((500, 2), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let pa = a.model.probabilities(&fresh.view());
        let pb = b.model.probabilities(&fresh.view());
        let gap = (&pa - &pb).mapv(f64::abs).mean().unwrap();
        assert!(gap > 0.05, "mean probability gap {gap}");
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = gen_rff_logistic_task(&[2.0], 40, &mut r1).unwrap();
        let b = gen_rff_logistic_task(&[2.0], 40, &mut r2).unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.labels, b.test.labels);
        assert_eq!(a.beta_resamples, b.beta_resamples);
    }

    #[test]
    fn rejects_degenerate_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            gen_rff_logistic_task(&[1.0], 1, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            gen_rff_logistic_task(&[], 10, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            gen_rff_logistic_task(&[-1.0], 10, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
