//! Training objectives, pose curriculum and the joint synthetic + single-view
//! training loop.

mod embedder;
mod losses;
mod optim;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::RelativePose;

pub use embedder::{cosine, GradientHistogramEmbedder, SemanticEmbedder};
pub use losses::{
    combine_self_training, cycle_first_pass, cycle_loss_var, cycle_second_pass_var, input_view_loss_var,
    multi_view_loss_var, select_hard_negative, self_training_loss_var, semantic_loss_var, supervised_loss_var,
    LossContext, SelfTrainComponents, SemanticOutcome,
};
pub use optim::{clip_global_norm, global_norm, learning_rate, AdamW, OptimizerConfig};
pub use train::{
    batch_index, checkpoint_info, fit, read_checkpoint, train_step, write_checkpoint, Backends, Checkpoint, FitOptions,
    FitOutcome, StepMetrics, TrainConfig, TrainState, CHECKPOINT_FILE, LOG_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual term inside the supervised loss.
    pub lambda_perceptual: f64,
    pub lambda_in: f64,
    pub lambda_pix: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_perceptual: 1.0, lambda_in: 0.3, lambda_pix: 5.0, lambda_sem: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_perceptual, self.lambda_in, self.lambda_pix, self.lambda_sem];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid(format!("loss weights must be finite and non-negative: {all:?}"));
        }
        Ok(())
    }

    pub fn self_training_enabled(&self) -> bool {
        self.lambda_in > 0.0 || self.lambda_pix > 0.0 || self.lambda_sem > 0.0
    }
}

/// Curriculum endpoints for the cycle-pose range, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumRange {
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub phi_min_deg: f64,
    pub phi_max_deg: f64,
}

impl Default for CurriculumRange {
    fn default() -> Self {
        CurriculumRange { theta_min_deg: 15.0, theta_max_deg: 90.0, phi_min_deg: 15.0, phi_max_deg: 90.0 }
    }
}

impl CurriculumRange {
    /// Constant range at the final width.
    pub fn fixed(theta_deg: f64, phi_deg: f64) -> Self {
        CurriculumRange {
            theta_min_deg: theta_deg,
            theta_max_deg: theta_deg,
            phi_min_deg: phi_deg,
            phi_max_deg: phi_deg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub j: usize,
    pub j_max: usize,
    pub range: CurriculumRange,
}

impl CurriculumState {
    pub fn new(j: usize, j_max: usize, range: CurriculumRange) -> Result<Self> {
        let s = CurriculumState { j, j_max, range };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.range;
        if self.j_max == 0 {
            return invalid("curriculum needs j_max > 0");
        }
        if self.j > self.j_max {
            return invalid(format!("iteration {} beyond j_max {}", self.j, self.j_max));
        }
        if !(0.0 <= r.theta_min_deg && r.theta_min_deg <= r.theta_max_deg && r.theta_max_deg <= 180.0)
            || !(0.0 <= r.phi_min_deg && r.phi_min_deg <= r.phi_max_deg && r.phi_max_deg <= 90.0)
        {
            return invalid(format!("bad curriculum endpoints {r:?}"));
        }
        Ok(())
    }
}

/// Maximum azimuth and elevation offsets at the state's iteration.
pub fn curriculum_bounds(state: &CurriculumState) -> Result<(f64, f64)> {
    state.validate()?;
    let t = state.j as f64 / state.j_max as f64;
    let r = &state.range;
    Ok((t * (r.theta_max_deg - r.theta_min_deg) + r.theta_min_deg, t * (r.phi_max_deg - r.phi_min_deg) + r.phi_min_deg))
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

pub fn sample_cycle_pose(state: &CurriculumState, rng: &mut impl Rng) -> Result<RelativePose> {
    let (theta, phi) = curriculum_bounds(state)?;
    Ok(RelativePose { azimuth_deg: symmetric(rng, theta), elevation_deg: symmetric(rng, phi) })
}

pub const SEMANTIC_AZIMUTH_DEG: f64 = 120.0;
pub const SEMANTIC_ELEVATION_DEG: f64 = 45.0;

pub fn sample_semantic_poses(m: usize, rng: &mut impl Rng) -> Result<Vec<RelativePose>> {
    if m == 0 {
        return invalid("semantic loss needs at least one view");
    }
    Ok((0..m)
        .map(|_| RelativePose {
            azimuth_deg: symmetric(rng, SEMANTIC_AZIMUTH_DEG),
            elevation_deg: symmetric(rng, SEMANTIC_ELEVATION_DEG),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleMode {
    /// The intermediate render is a constant input to the second pass.
    #[default]
    StopGradient,
    EndToEnd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticMode {
    /// Only the least similar of the rendered views is penalized.
    #[default]
    HardNegative,
    /// Mean over every rendered view.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NaiveSem,
    E2eCycle,
    NoCurriculum,
    NoSelftrain,
    InputLossOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NaiveSem,
        Ablation::E2eCycle,
        Ablation::NoCurriculum,
        Ablation::NoSelftrain,
        Ablation::InputLossOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NaiveSem => "naive-sem",
            Ablation::E2eCycle => "e2e-cycle",
            Ablation::NoCurriculum => "no-curriculum",
            Ablation::NoSelftrain => "no-selftrain",
            Ablation::InputLossOnly => "input-loss-only",
        }
    }

    pub fn parse(name: &str) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .map_or_else(|| invalid(format!("unknown ablation {name:?}")), Ok)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(j: usize, j_max: usize) -> CurriculumState {
        CurriculumState::new(j, j_max, CurriculumRange::default()).unwrap()
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(curriculum_bounds(&state(0, 2000)).unwrap(), (15.0, 15.0));
        assert_eq!(curriculum_bounds(&state(2000, 2000)).unwrap(), (90.0, 90.0));
        assert_eq!(curriculum_bounds(&state(1000, 2000)).unwrap(), (52.5, 52.5));
        let bad = CurriculumState { j: 0, j_max: 0, range: CurriculumRange::default() };
        assert!(curriculum_bounds(&bad).is_err());
    }

    #[test]
    fn cycle_pose_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s0 = state(0, 100);
        for _ in 0..10_000 {
            let p = sample_cycle_pose(&s0, &mut rng).unwrap();
            assert!(p.azimuth_deg.abs() <= 15.0 && p.elevation_deg.abs() <= 15.0);
        }
        let s = state(100, 100);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_cycle_pose(&s, &mut rng).unwrap().azimuth_deg).sum::<f64>() / n as f64;
        let sigma = 180.0 / 12f64.sqrt();
        assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        let a: Vec<_> = (0..5).map(|_| sample_cycle_pose(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn semantic_poses_ignore_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = sample_semantic_poses(10_000, &mut rng).unwrap();
        assert!(poses.iter().all(|p| p.azimuth_deg.abs() <= 120.0 && p.elevation_deg.abs() <= 45.0));
        assert_eq!(sample_semantic_poses(4, &mut rng).unwrap().len(), 4);
        assert!(sample_semantic_poses(0, &mut rng).is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("bogus").is_err());
    }

    proptest! {
        #[test]
        fn bounds_monotone_in_j(j_max in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let (lo, hi) = (a.min(b).min(j_max), a.max(b).min(j_max));
            let (t0, p0) = curriculum_bounds(&state(lo, j_max)).unwrap();
            let (t1, p1) = curriculum_bounds(&state(hi, j_max)).unwrap();
            prop_assert!(t0 <= t1 && p0 <= p1);
        }

        #[test]
        fn sampled_poses_within_bounds(j_max in 1usize..1000, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let s = state((frac * j_max as f64) as usize, j_max);
            let (t, p) = curriculum_bounds(&s).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let pose = sample_cycle_pose(&s, &mut rng).unwrap();
                prop_assert!(pose.azimuth_deg.abs() <= t && pose.elevation_deg.abs() <= p);
            }
        }
    }
}
