//! Per-step ELBO bookkeeping shared by the 1D and scene models.

use rand::Rng;
use rand_distr::StandardNormal;

/// Reconstruction and KL contribution of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    pub recon: f64,
    pub kl: f64,
    /// Sampled from the prior and excluded from the sums.
    pub dropped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveReport {
    pub steps: Vec<StepTerms>,
    pub total: f64,
}

impl ObjectiveReport {
    pub fn from_steps(steps: Vec<StepTerms>) -> Self {
        let total = steps
            .iter()
            .filter(|s| !s.dropped)
            .fold(0.0, |acc, s| acc + (s.recon - s.kl));
        Self { steps, total }
    }

    pub fn recon(&self) -> f64 {
        self.steps.iter().filter(|s| !s.dropped).map(|s| s.recon).sum()
    }

    pub fn kl(&self) -> f64 {
        self.steps.iter().filter(|s| !s.dropped).map(|s| s.kl).sum()
    }
}

/// `L_SNP + alpha * L_PD`; `pd` is absent when alpha is zero and the
/// dropout rollout was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedReport {
    pub snp: ObjectiveReport,
    pub pd: Option<ObjectiveReport>,
    pub alpha: f64,
    pub combined: f64,
}

impl CombinedReport {
    pub fn new(snp: ObjectiveReport, pd: Option<ObjectiveReport>, alpha: f64) -> Self {
        let combined = match &pd {
            Some(pd) if alpha != 0.0 => snp.total + alpha * pd.total,
            _ => snp.total,
        };
        Self {
            snp,
            pd,
            alpha,
            combined,
        }
    }
}

/// Draws the dropout set: each step is posterior-sampled with probability
/// `p_posterior`. `true` marks membership of the prior-sampled set.
pub fn pd_mask<R: Rng + ?Sized>(steps: usize, p_posterior: f64, rng: &mut R) -> Vec<bool> {
    (0..steps)
        .map(|_| !rng.random_bool(p_posterior.clamp(0.0, 1.0)))
        .collect()
}

/// Standard-normal reparameterization noise, one block per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub steps: Vec<Vec<f64>>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(steps: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            steps: (0..steps)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
        }
    }

    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self {
            steps: vec![vec![0.0; dim]; steps],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn totals_skip_dropped_steps() {
        let r = ObjectiveReport::from_steps(vec![
            StepTerms {
                recon: -1.0,
                kl: 0.5,
                dropped: false,
            },
            StepTerms {
                recon: -7.0,
                kl: 3.0,
                dropped: true,
            },
        ]);
        assert_eq!(r.total, -1.5);
        let all_dropped = ObjectiveReport::from_steps(vec![StepTerms {
            recon: -1.0,
            kl: 1.0,
            dropped: true,
        }]);
        assert_eq!(all_dropped.total, 0.0);
    }

    #[test]
    fn combined_with_zero_alpha_is_snp() {
        let snp = ObjectiveReport::from_steps(vec![StepTerms {
            recon: -2.25,
            kl: 0.125,
            dropped: false,
        }]);
        let pd = ObjectiveReport::from_steps(vec![]);
        let c = CombinedReport::new(snp.clone(), Some(pd), 0.0);
        assert_eq!(c.combined, snp.total);
    }

    #[test]
    fn mask_single_step_and_determinism() {
        let a = pd_mask(20, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = pd_mask(20, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let one = pd_mask(1, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(one.len(), 1);
    }
}
