//! Momentum-SGD forging of multi-prompt fooling images.
//!
//! The update is classical momentum with `v_0 = 0`:
//!
//! ```text
//! v <- m * v - lr * grad_x L
//! x <- x + v
//! ```
//!
//! Pixels are never clamped during optimization; the pixel-guard loss is the
//! only thing keeping them near the box.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_prompts, normalize, prompt_scores, EncoderBackend, ImageTensor, PromptSet};
use crate::losses::{breakdown_for, loss_and_pixel_grad, Bounds, LossBreakdown, LossWeights};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from a user-supplied image.
    #[default]
    FromImage,
    /// I.i.d. uniform noise over `[bounds.lower, bounds.upper]`.
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub weights: LossWeights,
    pub bounds: Bounds,
    pub seed: u64,
    pub init_mode: InitMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7.0,
            momentum: 0.5,
            iterations: 1000,
            weights: LossWeights::default(),
            bounds: Bounds::default(),
            seed: 0,
            init_mode: InitMode::FromImage,
        }
    }
}

impl OptimizerConfig {
    /// Settings of the long refinement stage that follows the default one:
    /// 50,000 iterations at learning rate 0.1, same momentum. Chain it as a
    /// second [`forge_image`] call; momentum state is not carried over.
    pub fn extended_stage(&self) -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 50_000,
            ..*self
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errs.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        errs.extend(self.weights.validate());
        errs.extend(self.bounds.validate());
        errs
    }
}

/// Trace of one forging run.
///
/// Only the id, config and per-iteration breakdowns are serialized; images
/// are stored separately as PNG and the duration is not persisted so that
/// records of identical runs are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub id: String,
    pub config: OptimizerConfig,
    /// `iterations + 1` entries; entry `i` is evaluated before step `i`.
    pub breakdowns: Vec<LossBreakdown>,
    #[serde(skip)]
    pub initial: ImageTensor,
    #[serde(skip)]
    pub final_image: ImageTensor,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl RunRecord {
    pub fn first(&self) -> &LossBreakdown {
        &self.breakdowns[0]
    }

    pub fn last(&self) -> &LossBreakdown {
        self.breakdowns.last().expect("at least one breakdown")
    }
}

/// Uniform noise image drawn from the init-noise stream of `seed`.
pub fn uniform_noise(height: usize, width: usize, bounds: &Bounds, seed: u64) -> ImageTensor {
    let mut rng = rng::stream(seed, Stream::InitNoise);
    let data = (0..height * width * 3)
        .map(|_| {
            if bounds.lower == bounds.upper {
                bounds.lower
            } else {
                rng.random_range(bounds.lower..bounds.upper)
            }
        })
        .collect();
    ImageTensor::new(height, width, data).expect("finite bounds")
}

/// Fraction of pixel components outside `bounds`.
pub fn out_of_bounds_fraction(x: &ImageTensor, bounds: &Bounds) -> f64 {
    x.as_slice().iter().filter(|&&v| !bounds.contains(v)).count() as f64 / x.len() as f64
}

/// Minimize the weighted total loss from `init` for `cfg.iterations` steps.
pub fn forge_image(
    backend: &dyn EncoderBackend,
    init: &ImageTensor,
    prompts: &PromptSet,
    cfg: &OptimizerConfig,
) -> Result<(ImageTensor, RunRecord)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    backend.check_image(init)?;
    let text = encode_prompts(backend, prompts)?;
    let start = Instant::now();

    let mut x = init.clone();
    let mut velocity = vec![0.0; x.len()];
    let mut breakdowns = Vec::with_capacity(cfg.iterations + 1);
    let backend_err = |iteration: usize| {
        move |e: Error| Error::Backend {
            iteration,
            source: Box::new(e),
        }
    };

    for it in 0..cfg.iterations {
        let (bd, grad) = loss_and_pixel_grad(backend, &x, &text, &cfg.bounds, &cfg.weights).map_err(backend_err(it))?;
        if !bd.total.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                last_finite: Box::new(x),
            });
        }
        breakdowns.push(bd);

        let before = x.clone();
        for ((xi, vi), gi) in x.as_mut_slice().iter_mut().zip(&mut velocity).zip(grad.as_slice()) {
            *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
            *xi += *vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence {
                iteration: it + 1,
                last_finite: Box::new(before),
            });
        }
    }

    let g = backend.encode_image(&x).map_err(backend_err(cfg.iterations))?;
    let last = breakdown_for(&g, &text, &x, &cfg.bounds, &cfg.weights).map_err(backend_err(cfg.iterations))?;
    if !last.total.is_finite() {
        return Err(Error::Divergence {
            iteration: cfg.iterations,
            last_finite: Box::new(x),
        });
    }
    breakdowns.push(last);

    let record = RunRecord {
        id: "run".into(),
        config: *cfg,
        breakdowns,
        initial: init.clone(),
        final_image: x.clone(),
        elapsed: start.elapsed(),
    };
    Ok((x, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterCheckResult {
    pub prompts: Vec<String>,
    /// `s(x_fo, c_k) - s(x_k, c_k)` per pair.
    pub margins: Vec<f64>,
    pub satisfied: Vec<bool>,
}

impl MasterCheckResult {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&b| b)
    }
}

/// Compare a candidate master image against each prompt's own image.
pub fn check_master(
    backend: &dyn EncoderBackend,
    x_fo: &ImageTensor,
    pairs: &[(String, ImageTensor)],
) -> Result<MasterCheckResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("master check needs at least one pair".into()));
    }
    let g_fo = normalize(&backend.encode_image(x_fo)?)?;
    let mut prompts = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    for (prompt, x_k) in pairs {
        let f = normalize(&backend.encode_text(prompt)?)?;
        let g_k = normalize(&backend.encode_image(x_k)?)?;
        let margin = crate::embedding::clip_score(&g_fo, &f)? - crate::embedding::clip_score(&g_k, &f)?;
        prompts.push(prompt.trim().to_owned());
        margins.push(margin);
    }
    let satisfied = margins.iter().map(|&m| m > 0.0).collect();
    Ok(MasterCheckResult {
        prompts,
        margins,
        satisfied,
    })
}

/// Run `n` independent jobs on a pool of `workers` threads, keeping results
/// in job order. Exclusive backends get a single worker.
pub(crate) fn run_jobs<T, F>(backend: &dyn EncoderBackend, workers: usize, n: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let threads = if backend.exclusive() { 1 } else { workers.max(1) };
    if threads == 1 {
        return (0..n).map(job).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&job).collect()),
        Err(e) => {
            log::warn!("could not build a {threads}-thread pool ({e}), running serially");
            (0..n).map(job).collect()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub run_id: String,
    pub lower: f64,
    pub upper: f64,
    /// Mean per-prompt similarity of the final image; `None` if the run failed.
    pub mean_score: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

/// One forging run per `(lower, upper)` grid cell with everything else in
/// `cfg` held fixed. Cells are ordered lower-major.
pub fn bound_sweep(
    backend: &dyn EncoderBackend,
    init: &ImageTensor,
    prompts: &PromptSet,
    cfg: &OptimizerConfig,
    grid_lower: &[f64],
    grid_upper: &[f64],
    workers: usize,
) -> Result<Vec<SweepCell>> {
    let mut errs = Vec::new();
    if grid_lower.is_empty() || grid_upper.is_empty() {
        errs.push("sweep grids must be non-empty".to_string());
    }
    for &l in grid_lower {
        if !(-1.0..=0.0).contains(&l) {
            errs.push(format!("grid lower value {l} outside [-1, 0]"));
        }
    }
    for &u in grid_upper {
        if !(0.0..=1.0).contains(&u) {
            errs.push(format!("grid upper value {u} outside [0, 1]"));
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let cells: Vec<(f64, f64)> = grid_lower
        .iter()
        .flat_map(|&l| grid_upper.iter().map(move |&u| (l, u)))
        .collect();
    Ok(run_jobs(backend, workers, cells.len(), |i| {
        let (lower, upper) = cells[i];
        let run_id = format!("cell-{i:03}");
        let cell_cfg = OptimizerConfig {
            bounds: Bounds { lower, upper },
            ..*cfg
        };
        match forge_image(backend, init, prompts, &cell_cfg) {
            Ok((_, mut record)) => {
                record.id = run_id.clone();
                SweepCell {
                    run_id,
                    lower,
                    upper,
                    mean_score: Some(record.last().mean_sim()),
                    error: None,
                    record: Some(record),
                }
            }
            Err(e) => SweepCell {
                run_id,
                lower,
                upper,
                mean_score: None,
                error: Some(e.to_string()),
                record: None,
            },
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Full,
    NoPixelGuard,
    NoVariance,
    AlignmentOnly,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Full,
        AblationArm::NoPixelGuard,
        AblationArm::NoVariance,
        AblationArm::AlignmentOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoPixelGuard => "no_pixel_guard",
            AblationArm::NoVariance => "no_variance",
            AblationArm::AlignmentOnly => "alignment_only",
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            AblationArm::Full => base,
            AblationArm::NoPixelGuard => LossWeights { beta: 0.0, ..base },
            AblationArm::NoVariance => LossWeights { alpha: 0.0, ..base },
            AblationArm::AlignmentOnly => LossWeights { alpha: 0.0, beta: 0.0 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ablation {
    /// Indexed like [`AblationArm::ALL`].
    pub runs: Vec<(AblationArm, RunRecord)>,
}

impl Ablation {
    pub fn get(&self, arm: AblationArm) -> &RunRecord {
        &self.runs.iter().find(|(a, _)| *a == arm).expect("all arms present").1
    }

    /// Final breakdown of an arm with every term measured under the base
    /// weights' bounds (terms are recorded even when their weight is zero).
    pub fn final_breakdown(&self, arm: AblationArm) -> &LossBreakdown {
        self.get(arm).last()
    }
}

/// Four runs from the same init and seed, differing only in zeroed weights.
pub fn ablate(
    backend: &dyn EncoderBackend,
    init: &ImageTensor,
    prompts: &PromptSet,
    cfg: &OptimizerConfig,
    workers: usize,
) -> Result<Ablation> {
    let results = run_jobs(backend, workers, AblationArm::ALL.len(), |i| {
        let arm = AblationArm::ALL[i];
        let arm_cfg = OptimizerConfig {
            weights: arm.weights(cfg.weights),
            ..*cfg
        };
        forge_image(backend, init, prompts, &arm_cfg).map(|(_, mut record)| {
            record.id = arm.name().to_owned();
            (arm, record)
        })
    });
    Ok(Ablation {
        runs: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Mean similarity of an image over a prompt set.
pub fn mean_score(backend: &dyn EncoderBackend, x: &ImageTensor, prompts: &PromptSet) -> Result<f64> {
    let text = encode_prompts(backend, prompts)?;
    let s = prompt_scores(backend, x, &text)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{BackendDescriptor, ToyEncoder};

    fn toy() -> ToyEncoder {
        ToyEncoder::new(BackendDescriptor::toy()).unwrap()
    }

    fn prompts() -> PromptSet {
        PromptSet::new(["Sunflowers by Vincent van Gogh", "The Starry Night", "Mona Lisa"]).unwrap()
    }

    fn cfg(lr: f64, iterations: usize) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            iterations,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 1);
        let (out, rec) = forge_image(&enc, &init, &prompts(), &cfg(7.0, 0)).unwrap();
        assert_eq!(out, init);
        assert_eq!(rec.breakdowns.len(), 1);
    }

    #[test]
    fn vanishing_learning_rate_keeps_init() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 2);
        let (out, _) = forge_image(&enc, &init, &prompts(), &cfg(1e-30, 50)).unwrap();
        let max = out
            .as_slice()
            .iter()
            .zip(init.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6);
    }

    #[test]
    fn single_prompt_similarity_rises() {
        let enc = toy();
        let p = PromptSet::new(["a red fox in the snow"]).unwrap();
        let init = uniform_noise(8, 8, &Bounds::default(), 3);
        let (_, rec) = forge_image(&enc, &init, &p, &cfg(0.5, 500)).unwrap();
        assert!(rec.last().mean_sim() > rec.first().mean_sim());
        assert_eq!(rec.breakdowns.len(), 501);
    }

    #[test]
    fn forging_is_deterministic() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 4);
        let (a, ra) = forge_image(&enc, &init, &prompts(), &cfg(0.5, 100)).unwrap();
        let (b, rb) = forge_image(&enc, &init, &prompts(), &cfg(0.5, 100)).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    }

    #[test]
    fn small_steps_descend() {
        let enc = toy();
        for seed in 0..5 {
            let init = uniform_noise(8, 8, &Bounds::default(), seed);
            for lr in [0.05, 0.2, 0.5] {
                let (_, rec) = forge_image(&enc, &init, &prompts(), &cfg(lr, 200)).unwrap();
                assert!(rec.last().total <= rec.first().total, "seed {seed} lr {lr}");
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 5);
        let c = OptimizerConfig {
            learning_rate: 1e308,
            momentum: 0.99,
            iterations: 50,
            ..OptimizerConfig::default()
        };
        match forge_image(&enc, &init, &prompts(), &c) {
            Err(Error::Divergence { last_finite, .. }) => assert!(last_finite.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let enc = toy();
        let init = ImageTensor::zeros(4, 4);
        assert!(matches!(
            forge_image(&enc, &init, &prompts(), &cfg(1.0, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            momentum: 1.0,
            ..OptimizerConfig::default()
        };
        match forge_image(&enc, &ImageTensor::zeros(8, 8), &prompts(), &bad) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn master_check_self_comparison_has_zero_margins() {
        let enc = toy();
        let x = uniform_noise(8, 8, &Bounds::default(), 6);
        let pairs: Vec<_> = prompts().iter().map(|p| (p.to_owned(), x.clone())).collect();
        let res = check_master(&enc, &x, &pairs).unwrap();
        assert!(res.margins.iter().all(|&m| m == 0.0));
        assert!(!res.all_satisfied());
        assert!(check_master(&enc, &x, &[]).is_err());
    }

    #[test]
    fn master_check_loses_to_longer_forged_image() {
        let enc = toy();
        let prompt = "The Great Wave off Kanagawa";
        let p = PromptSet::new([prompt]).unwrap();
        let init = uniform_noise(8, 8, &Bounds::default(), 7);
        let (short, _) = forge_image(&enc, &init, &p, &cfg(0.5, 5)).unwrap();
        let (long, _) = forge_image(&enc, &init, &p, &cfg(0.5, 400)).unwrap();
        let res = check_master(&enc, &short, &[(prompt.to_owned(), long.clone())]).unwrap();
        assert!(res.margins[0] < 0.0);
        let swapped = check_master(&enc, &long, &[(prompt.to_owned(), short)]).unwrap();
        assert_eq!(swapped.margins[0], -res.margins[0]);
    }

    #[test]
    fn degenerate_sweep_matches_direct_forge() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 8);
        let c = cfg(0.5, 30);
        let cells = bound_sweep(&enc, &init, &prompts(), &c, &[-0.1], &[0.9], 1).unwrap();
        assert_eq!(cells.len(), 1);
        let direct_cfg = OptimizerConfig {
            bounds: Bounds {
                lower: -0.1,
                upper: 0.9,
            },
            ..c
        };
        let (_, direct) = forge_image(&enc, &init, &prompts(), &direct_cfg).unwrap();
        assert_eq!(cells[0].mean_score, Some(direct.last().mean_sim()));
    }

    #[test]
    fn sweep_rejects_out_of_range_grid() {
        let enc = toy();
        let init = ImageTensor::zeros(8, 8);
        match bound_sweep(&enc, &init, &prompts(), &cfg(0.5, 1), &[0.5, -2.0], &[1.5], 1) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sweep_is_reproducible_and_parallel_order_stable() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 9);
        let c = cfg(0.5, 40);
        let grid_l = [-0.5, -0.2, 0.0];
        let grid_u = [0.5, 0.8, 1.0];
        let a = bound_sweep(&enc, &init, &prompts(), &c, &grid_l, &grid_u, 1).unwrap();
        let b = bound_sweep(&enc, &init, &prompts(), &c, &grid_l, &grid_u, 4).unwrap();
        assert_eq!(a.len(), 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.run_id, y.run_id);
            assert_eq!(x.mean_score.unwrap().to_bits(), y.mean_score.unwrap().to_bits());
            assert_eq!(
                x.record.as_ref().unwrap().final_image,
                y.record.as_ref().unwrap().final_image
            );
        }
    }

    #[test]
    fn ablation_arms_record_every_term() {
        let enc = toy();
        let init = uniform_noise(8, 8, &Bounds::default(), 10);
        let abl = ablate(&enc, &init, &prompts(), &cfg(0.5, 50), 2).unwrap();
        assert_eq!(abl.runs.len(), 4);
        let only = abl.get(AblationArm::AlignmentOnly);
        assert_eq!(only.config.weights, LossWeights { alpha: 0.0, beta: 0.0 });
        let last = only.last();
        assert_eq!(last.total, last.align);
        assert!(last.var >= 0.0 && last.pixel >= 0.0);
        for (arm, rec) in &abl.runs {
            assert_eq!(rec.initial, init, "{arm:?}");
            assert_eq!(rec.config.seed, 0);
        }
    }

    #[test]
    fn extended_stage_settings() {
        let c = OptimizerConfig::default().extended_stage();
        assert_eq!((c.learning_rate, c.iterations, c.momentum), (0.1, 50_000, 0.5));
    }
}
