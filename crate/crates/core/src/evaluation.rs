//! Metrics, candidate scoring, the trajectory-mismatch diagnostic, and the
//! experiment drivers built on them. Only distortion metrics (MSE, PSNR) are
//! computed; any ordering claimed by these drivers is an ordering in MSE.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::bridges::{Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompts::{encode, Conditioner, PromptBank, VariantTag};
use crate::sampler::{restore, Conditioned, SamplerConfig};
use crate::toyworld::{make_pairs, Degradation, PairedSample};
use crate::training::{train_prompt, TrainConfig, TrainReport, TrainingDraw};

/// `(mse, psnr)` with peak 1. `psnr` is `+∞` when `mse` is exactly zero.
pub fn mse_psnr(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let diff = pred.sub(target)?;
    if diff.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let mse = diff.norm_sq() / diff.len() as f64;
    Ok((mse, psnr_from_mse(mse)))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean of the finite entries; `+∞` sentinels are excluded. `None` if none
/// are finite.
pub fn mean_finite(values: &[f64]) -> Option<f64> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricColumn {
    pub name: String,
    pub orientation: Orientation,
}

impl MetricColumn {
    pub fn new(name: impl Into<String>, orientation: Orientation) -> Self {
        Self {
            name: name.into(),
            orientation,
        }
    }
}

/// Candidates by metrics, no missing cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    columns: Vec<MetricColumn>,
    labels: Vec<String>,
    cells: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn new(columns: Vec<MetricColumn>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("metric table needs at least one column"));
        }
        Ok(Self {
            columns,
            labels: Vec::new(),
            cells: Vec::new(),
        })
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} cells, table has {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric table cell".into()));
        }
        self.labels.push(label.into());
        self.cells.push(values);
        Ok(())
    }

    pub fn columns(&self) -> &[MetricColumn] {
        &self.columns
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub scores: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Scores {
    /// Index of the highest score; the first one on ties.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Min-max normalizes every column across rows (flipping lower-better
/// columns), then averages columns with equal weight. A constant column
/// scores 0.5 for every row and adds a warning.
pub fn t0_score(table: &MetricTable) -> Result<Scores> {
    let rows = table.cells.len();
    if rows < 2 {
        return Err(Error::invalid("normalization needs at least two candidates"));
    }
    let mut scores = vec![0.0; rows];
    let mut warnings = Vec::new();
    let weight = 1.0 / table.columns.len() as f64;
    for (j, col) in table.columns.iter().enumerate() {
        let values: Vec<f64> = table.cells.iter().map(|r| r[j]).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (score, &v) in scores.iter_mut().zip(&values) {
            let normalized = if hi > lo {
                let n = (v - lo) / (hi - lo);
                match col.orientation {
                    Orientation::HigherBetter => n,
                    Orientation::LowerBetter => 1.0 - n,
                }
            } else {
                0.5
            };
            *score += weight * normalized;
        }
        if hi <= lo {
            warnings.push(format!("column `{}` is constant; scored 0.5 for every row", col.name));
        }
    }
    Ok(Scores { scores, warnings })
}

/// Minimum Monte Carlo draws for a marginal estimate.
pub const MIN_MONTE_CARLO: usize = 30;
pub const DEFAULT_MONTE_CARLO: usize = 256;
const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-dimension mean and variance of training states at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub time: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Marginal {
    /// Monte Carlo estimate over `draws` (pair, noise) draws from `pool`.
    pub fn estimate<R: Rng + ?Sized>(
        trajectory: &Trajectory,
        pool: &[PairedSample],
        t: f64,
        draws: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if draws < MIN_MONTE_CARLO {
            return Err(Error::invalid(format!(
                "marginal estimate needs at least {MIN_MONTE_CARLO} draws, got {draws}"
            )));
        }
        let first = pool.first().ok_or_else(|| Error::invalid("empty sample pool"))?;
        let n = first.clean.len();
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for k in 0..draws {
            let pair = &pool[rng.random_range(0..pool.len())];
            let noise = Tensor::randn(vec![n], 1.0, rng);
            let (state, _) = trajectory.state(&pair.clean, &pair.degraded, t, &noise)?;
            let count = (k + 1) as f64;
            for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(state.data()) {
                let delta = x - *m;
                *m += delta / count;
                *s += delta * (x - *m);
            }
        }
        let variance = m2.iter().map(|s| s / (draws - 1) as f64 + VARIANCE_FLOOR).collect();
        Ok(Self { time: t, mean, variance })
    }

    /// Mean over dimensions of `|x − μ| / σ`.
    pub fn mean_abs_z(&self, state: &Tensor) -> Result<f64> {
        if state.len() != self.mean.len() {
            return Err(Error::Shape {
                op: "mean_abs_z",
                lhs: vec![self.mean.len()],
                rhs: state.shape().to_vec(),
            });
        }
        let total: f64 = state
            .data()
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| (x - m).abs() / v.sqrt())
            .sum();
        Ok(total / self.mean.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticConfig {
    pub sampler: SamplerConfig,
    pub monte_carlo: usize,
    pub seed: u64,
}

/// Mean `|z|` of visited sampler states per grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceCurve {
    pub trajectory: TrajectoryKind,
    pub times: Vec<f64>,
    pub divergence: Vec<f64>,
}

impl DivergenceCurve {
    pub fn mean(&self) -> f64 {
        self.divergence.iter().sum::<f64>() / self.divergence.len() as f64
    }
}

/// Scores each visited sampler state against the marginal of the training
/// states the same trajectory produces at that time, averaged over `inputs`.
pub fn mismatch_diagnostic(
    config: &DiagnosticConfig,
    backbone: &Backbone,
    context: &Tensor,
    pool: &[PairedSample],
    inputs: &[PairedSample],
) -> Result<DivergenceCurve> {
    if config.monte_carlo < MIN_MONTE_CARLO {
        return Err(Error::invalid(format!(
            "monte_carlo must be >= {MIN_MONTE_CARLO}, got {}",
            config.monte_carlo
        )));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("mismatch diagnostic needs at least one input"));
    }
    let trajectory = config.sampler.trajectory;
    let grid = config.sampler.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let marginals: Vec<Marginal> = grid[..grid.len() - 1]
        .iter()
        .map(|&t| Marginal::estimate(&trajectory, pool, t, config.monte_carlo, &mut rng))
        .collect::<Result<_>>()?;

    let field = Conditioned::single(backbone, context.clone())?;
    let mut divergence = vec![0.0; marginals.len()];
    for (i, input) in inputs.iter().enumerate() {
        let mut sampler = config.sampler.clone();
        sampler.seed = sample_seed(config.sampler.seed, i);
        let run = restore(&input.degraded, &field, &sampler)?;
        for (d, (step, marginal)) in divergence.iter_mut().zip(run.trace.iter().zip(&marginals)) {
            *d += marginal.mean_abs_z(&step.state)? / inputs.len() as f64;
        }
    }
    Ok(DivergenceCurve {
        trajectory: trajectory.kind(),
        times: marginals.iter().map(|m| m.time).collect(),
        divergence,
    })
}

/// Mean `|z|` of fresh training states at time `t` against a marginal
/// estimated from independent draws. Near `√(2/π) ≈ 0.798` when the marginal
/// is close to Gaussian.
pub fn training_state_self_score(
    trajectory: &Trajectory,
    pool: &[PairedSample],
    t: f64,
    monte_carlo: usize,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let marginal = Marginal::estimate(trajectory, pool, t, monte_carlo, &mut rng)?;
    let mut total = 0.0;
    for _ in 0..probes {
        let pair = &pool[rng.random_range(0..pool.len())];
        let noise = Tensor::randn(vec![pair.clean.len()], 1.0, &mut rng);
        let (state, _) = trajectory.state(&pair.clean, &pair.degraded, t, &noise)?;
        total += marginal.mean_abs_z(&state)?;
    }
    Ok(total / probes as f64)
}

/// Distinct sampler seed per input index.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Per-sample quality of a restoration run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleQuality {
    pub mse: f64,
    pub psnr: f64,
    pub input_mse: f64,
}

/// Restores every test input with `contexts` (averaged when more than one)
/// and scores it against its clean target.
pub fn evaluate_restoration(
    backbone: &Backbone,
    contexts: Vec<Tensor>,
    sampler: &SamplerConfig,
    test_set: &[PairedSample],
) -> Result<Vec<SampleQuality>> {
    let field = Conditioned::new(backbone, contexts)?;
    test_set
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut cfg = sampler.clone();
            cfg.seed = sample_seed(sampler.seed, i);
            let out = restore(&pair.degraded, &field, &cfg)?;
            let (mse, psnr) = mse_psnr(&out.output, &pair.clean)?;
            let (input_mse, _) = mse_psnr(&pair.degraded, &pair.clean)?;
            Ok(SampleQuality { mse, psnr, input_mse })
        })
        .collect()
}

/// A shared setup for experiments that train and evaluate prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub degradation: Degradation,
    pub variant: VariantTag,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t0: f64,
    pub eta: f64,
    pub steps: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
}

impl Experiment {
    fn side(backbone: &Backbone) -> usize {
        (backbone.config().input_dim as f64).sqrt().round() as usize
    }

    /// Training and held-out pairs for one seed.
    pub fn data(&self, backbone: &Backbone, seed: u64) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
        let side = Self::side(backbone);
        let train = make_pairs(self.degradation, side, self.train_size, seed)?;
        let test = make_pairs(self.degradation, side, self.test_size, seed ^ 0x7E57_0000_0000_0000)?;
        Ok((train, test))
    }

    pub fn train_config(&self, trajectory: TrajectoryKind, t0: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            trajectory,
            variant: self.variant,
            degradation: self.degradation.kind(),
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            t0,
            eta: self.eta,
            seed,
        }
    }

    /// Trains one arm and evaluates it on the held-out set.
    pub fn run_arm(
        &self,
        backbone: &Backbone,
        conditioner: &Conditioner,
        trajectory: TrajectoryKind,
        t0: f64,
        seed: u64,
    ) -> Result<ArmResult> {
        let (train, test) = self.data(backbone, seed)?;
        let config = self.train_config(trajectory, t0, seed);
        let mut bank = PromptBank::new();
        let report = train_prompt(&config, &train, &mut bank, backbone, conditioner)?;
        let context = encode(&report.prompt, conditioner, backbone.e_null())?;
        let sampler = SamplerConfig::from_kind(trajectory, t0, self.eta, self.steps, seed)?;
        let quality = evaluate_restoration(backbone, vec![context], &sampler, &test)?;
        Ok(ArmResult::new(trajectory, seed, &config, self.steps, &quality, report))
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub trajectory: TrajectoryKind,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub mse: f64,
    pub psnr: f64,
    pub input_mse: f64,
    pub report: Option<TrainReport>,
}

impl ArmResult {
    fn new(
        trajectory: TrajectoryKind,
        seed: u64,
        config: &TrainConfig,
        steps: usize,
        quality: &[SampleQuality],
        report: TrainReport,
    ) -> Self {
        let n = quality.len() as f64;
        let psnr: Vec<f64> = quality.iter().map(|q| q.psnr).collect();
        Self {
            trajectory,
            seed,
            iterations: config.iterations,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            steps,
            mse: quality.iter().map(|q| q.mse).sum::<f64>() / n,
            psnr: mean_finite(&psnr).unwrap_or(f64::INFINITY),
            input_mse: quality.iter().map(|q| q.input_mse).sum::<f64>() / n,
            report: Some(report),
        }
    }

    fn budget(&self) -> (usize, usize, u64, usize) {
        (self.iterations, self.batch_size, self.learning_rate.to_bits(), self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub trajectory: TrajectoryKind,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeReport {
    pub summaries: Vec<ArmSummary>,
    /// Per seed: whether MSE(EBR) < MSE(naive) held.
    pub per_seed: Vec<(u64, bool)>,
    pub ebr_beats_naive: bool,
    pub ebr_at_most_ddbm: bool,
}

impl BridgeReport {
    pub fn summary(&self, kind: TrajectoryKind) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.trajectory == kind)
    }
}

impl fmt::Display for BridgeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.summaries {
            writeln!(
                f,
                "{:<6} mse {:.6}  psnr {:.3} dB  ({} seeds)",
                s.trajectory, s.mean_mse, s.mean_psnr, s.seeds
            )?;
        }
        for (seed, held) in &self.per_seed {
            writeln!(f, "seed {seed}: mse(ebr) < mse(naive) {}", if *held { "held" } else { "failed" })?;
        }
        write!(
            f,
            "verdict: ebr < naive {}, ebr <= ddbm {}",
            self.ebr_beats_naive, self.ebr_at_most_ddbm
        )
    }
}

/// Aggregates three-arm results. Every arm must share one budget and every
/// seed must cover all three trajectories.
pub fn compare_bridges(arms: &[ArmResult]) -> Result<BridgeReport> {
    let first = arms.first().ok_or_else(|| Error::invalid("no arms to compare"))?;
    if let Some(bad) = arms.iter().find(|a| a.budget() != first.budget()) {
        return Err(Error::invalid(format!(
            "budget mismatch: {} seed {} differs from {} seed {}",
            bad.trajectory, bad.seed, first.trajectory, first.seed
        )));
    }
    let mut by_seed: BTreeMap<u64, BTreeMap<TrajectoryKind, &ArmResult>> = BTreeMap::new();
    for a in arms {
        if by_seed.entry(a.seed).or_default().insert(a.trajectory, a).is_some() {
            return Err(Error::invalid(format!("duplicate arm {} for seed {}", a.trajectory, a.seed)));
        }
    }
    for (seed, arms) in &by_seed {
        if arms.len() != TrajectoryKind::ALL.len() {
            return Err(Error::invalid(format!("seed {seed} is missing an arm")));
        }
    }
    let summaries: Vec<ArmSummary> = TrajectoryKind::ALL
        .iter()
        .map(|&kind| {
            let rows: Vec<&ArmResult> = by_seed.values().map(|m| m[&kind]).collect();
            let n = rows.len() as f64;
            ArmSummary {
                trajectory: kind,
                mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
                mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                seeds: rows.len(),
            }
        })
        .collect();
    let per_seed = by_seed
        .iter()
        .map(|(seed, m)| (*seed, m[&TrajectoryKind::Ebr].mse < m[&TrajectoryKind::Naive].mse))
        .collect();
    let mse = |k| summaries.iter().find(|s: &&ArmSummary| s.trajectory == k).map(|s| s.mean_mse);
    let (naive, ddbm, ebr) = (
        mse(TrajectoryKind::Naive).expect("all arms present"),
        mse(TrajectoryKind::Ddbm).expect("all arms present"),
        mse(TrajectoryKind::Ebr).expect("all arms present"),
    );
    Ok(BridgeReport {
        summaries,
        per_seed,
        ebr_beats_naive: ebr < naive,
        ebr_at_most_ddbm: ebr <= ddbm,
    })
}

/// Trains and evaluates all three trajectories for every seed, one thread
/// per arm.
pub fn bridge_comparison(
    experiment: &Experiment,
    backbone: &Backbone,
    conditioner: &Conditioner,
) -> Result<(BridgeReport, Vec<ArmResult>)> {
    if experiment.seeds.is_empty() {
        return Err(Error::invalid("bridge comparison needs at least one seed"));
    }
    let jobs: Vec<(TrajectoryKind, u64)> = experiment
        .seeds
        .iter()
        .flat_map(|&s| TrajectoryKind::ALL.iter().map(move |&k| (k, s)))
        .collect();
    let arms = run_parallel(&jobs, |&(kind, seed)| {
        experiment.run_arm(backbone, conditioner, kind, experiment.t0, seed)
    })?;
    Ok((compare_bridges(&arms)?, arms))
}

pub const T0_CANDIDATES: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub table: MetricTable,
    pub scores: Scores,
    pub arms: Vec<ArmResult>,
}

impl SweepResult {
    pub fn best_t0(&self) -> f64 {
        self.table.labels()[self.scores.best()]
            .parse()
            .expect("labels are formatted numbers")
    }
}

/// Trains one EBR prompt per candidate horizon (first seed only) and ranks
/// candidates by normalized MSE and PSNR.
pub fn t0_sweep(
    experiment: &Experiment,
    candidates: &[f64],
    backbone: &Backbone,
    conditioner: &Conditioner,
) -> Result<SweepResult> {
    if candidates.len() < 2 {
        return Err(Error::invalid("a T0 sweep needs at least two candidates"));
    }
    let seed = *experiment
        .seeds
        .first()
        .ok_or_else(|| Error::invalid("sweep needs a seed"))?;
    for &t0 in candidates {
        crate::bridges::EbrSchedule::new(t0)?;
    }
    let arms = run_parallel(candidates, |&t0| {
        experiment.run_arm(backbone, conditioner, TrajectoryKind::Ebr, t0, seed)
    })?;
    let mut table = MetricTable::new(vec![
        MetricColumn::new("mse", Orientation::LowerBetter),
        MetricColumn::new("psnr", Orientation::HigherBetter),
    ])?;
    for (t0, arm) in candidates.iter().zip(&arms) {
        table.push_row(format!("{t0}"), vec![arm.mse, arm.psnr])?;
    }
    let scores = t0_score(&table)?;
    Ok(SweepResult { table, scores, arms })
}

fn run_parallel<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|j| scope.spawn(|| f(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    })
}

/// Mean prompt loss on a fixed set of draws, for comparing prompts on equal
/// footing after training.
pub fn held_out_loss(
    config: &TrainConfig,
    pool: &[PairedSample],
    prompt: &crate::prompts::Prompt,
    backbone: &Backbone,
    conditioner: &Conditioner,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let trajectory = config.trajectory()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = backbone.config().input_dim;
    let mut total = 0.0;
    for _ in 0..draws {
        let sample = &pool[rng.random_range(0..pool.len())];
        let draw = TrainingDraw::sample(&trajectory, dim, &mut rng);
        total += crate::training::prompt_loss(&trajectory, &[sample], &[draw], prompt, backbone, conditioner)?;
    }
    Ok(total / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    #[test]
    fn mse_psnr_examples() {
        let a = v(&[0.2, 0.4, 0.6]);
        let (mse, psnr) = mse_psnr(&a, &a).unwrap();
        assert_eq!(mse, 0.0);
        assert!(psnr.is_infinite() && psnr > 0.0);

        let b = a.map("offset", |x| x + 0.1).unwrap();
        let (mse, psnr) = mse_psnr(&b, &a).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
        assert!((psnr - 20.0).abs() < 1e-9);
        assert_eq!(mse_psnr(&a, &b).unwrap().0, mse);
        assert!(mse_psnr(&a, &v(&[1.0])).is_err());
    }

    #[test]
    fn mean_finite_skips_sentinels() {
        assert_eq!(mean_finite(&[10.0, f64::INFINITY, 20.0]), Some(15.0));
        assert_eq!(mean_finite(&[f64::INFINITY]), None);
    }

    fn table(rows: &[(&str, [f64; 2])]) -> MetricTable {
        let mut t = MetricTable::new(vec![
            MetricColumn::new("psnr", Orientation::HigherBetter),
            MetricColumn::new("mse", Orientation::LowerBetter),
        ])
        .unwrap();
        for (label, vals) in rows {
            t.push_row(*label, vals.to_vec()).unwrap();
        }
        t
    }

    #[test]
    fn single_metric_endpoints() {
        let mut t = MetricTable::new(vec![MetricColumn::new("m", Orientation::HigherBetter)]).unwrap();
        t.push_row("a", vec![1.0]).unwrap();
        t.push_row("b", vec![3.0]).unwrap();
        assert_eq!(t0_score(&t).unwrap().scores, vec![0.0, 1.0]);
    }

    #[test]
    fn dominance_and_constant_columns() {
        let t = table(&[("a", [30.0, 0.1]), ("b", [20.0, 0.2])]);
        let s = t0_score(&t).unwrap();
        assert!(s.scores[0] > s.scores[1]);
        assert!(s.warnings.is_empty());

        let t = table(&[("a", [30.0, 0.1]), ("b", [30.0, 0.2])]);
        let s = t0_score(&t).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert_eq!(s.scores, vec![0.75, 0.25]);
    }

    #[test]
    fn rejects_degenerate_tables() {
        let t = table(&[("a", [1.0, 1.0])]);
        assert!(t0_score(&t).is_err());
        let mut t = table(&[]);
        assert!(t.push_row("x", vec![1.0]).is_err());
        assert!(t.push_row("x", vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn marginal_needs_enough_draws() {
        let pool = make_pairs(Degradation::Veil { alpha: 0.6 }, 4, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Marginal::estimate(&Trajectory::Naive, &pool, 0.5, 29, &mut rng).is_err());
        let m = Marginal::estimate(&Trajectory::Naive, &pool, 0.5, 30, &mut rng).unwrap();
        let at_mean = Tensor::vector(m.mean.clone()).unwrap();
        assert_eq!(m.mean_abs_z(&at_mean).unwrap(), 0.0);
    }

    fn arm(kind: TrajectoryKind, seed: u64, mse: f64, iterations: usize) -> ArmResult {
        ArmResult {
            trajectory: kind,
            seed,
            iterations,
            batch_size: 2,
            learning_rate: 5e-4,
            steps: 10,
            mse,
            psnr: psnr_from_mse(mse),
            input_mse: 0.1,
            report: None,
        }
    }

    #[test]
    fn compare_bridges_orders_and_checks_budgets() {
        let mut arms = Vec::new();
        for seed in 0..3 {
            arms.push(arm(TrajectoryKind::Naive, seed, 0.05, 10));
            arms.push(arm(TrajectoryKind::Ddbm, seed, 0.03, 10));
            arms.push(arm(TrajectoryKind::Ebr, seed, 0.01, 10));
        }
        let report = compare_bridges(&arms).unwrap();
        assert!(report.ebr_beats_naive && report.ebr_at_most_ddbm);
        assert!(report.per_seed.iter().all(|(_, held)| *held));
        assert_eq!(report.summary(TrajectoryKind::Ebr).unwrap().seeds, 3);

        arms.push(arm(TrajectoryKind::Ebr, 9, 0.01, 11));
        assert!(compare_bridges(&arms).is_err());
        arms.pop();
        arms.pop();
        assert!(compare_bridges(&arms).is_err());
    }
}
