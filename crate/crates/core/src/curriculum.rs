//! Task scheduling for curriculum training.
//!
//! Two schedulers are provided. The softmax sampler draws task `t` at step
//! `s` with probability `exp(-d_t/τ(s)) / Σ_i exp(-d_i/τ(s))` where
//! `τ(s) = τ0 / (1 + λ·s/S)`. The epoch-mix plan instead fixes, per epoch,
//! how many atomic samples and how many multitask samples are shown, ramping
//! linearly from all-atomic in the first epoch to a configured floor in the
//! last.
//!
//! Note the literal softmax concentrates mass on the *smallest* difficulty as
//! τ shrinks. `invert_difficulty` flips the sign of `d_t` for consumers who
//! want mass to move toward the hardest task instead.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{QASample, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Defaults to the task's 1-based rank when absent from a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, difficulty: f64) -> Self {
        Self {
            name: name.into(),
            difficulty: Some(difficulty),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub tau0: f64,
    pub lambda: f64,
    pub steps: u64,
}

impl Schedule {
    pub fn new(tau0: f64, lambda: f64, steps: u64) -> Result<Self> {
        if !(tau0 > 0.0 && tau0.is_finite()) {
            return Err(Error::InvalidSchedule(format!("tau0 must be > 0, got {tau0}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidSchedule(format!("lambda must be ≥ 0, got {lambda}")));
        }
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be ≥ 1".into()));
        }
        Ok(Self { tau0, lambda, steps })
    }

    /// `τ(s) = τ0 / (1 + λ·s/S)`; steps past `S` are clamped to `S`.
    pub fn temperature(&self, step: u64) -> f64 {
        let s = step.min(self.steps) as f64;
        self.tau0 / (1.0 + self.lambda * s / self.steps as f64)
    }
}

/// Difficulties in registration order, with rank defaults filled in.
pub fn difficulties(tasks: &[TaskSpec]) -> Vec<f64> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| t.difficulty.unwrap_or((i + 1) as f64))
        .collect()
}

/// Checks that difficulties are strictly increasing, as a curriculum requires.
pub fn validate_curriculum(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidSchedule("curriculum needs at least one task".into()));
    }
    let d = difficulties(tasks);
    if d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidSchedule("difficulties must be positive".into()));
    }
    if d.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSchedule(
            "difficulties must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Temperature-scaled softmax over negated difficulties.
pub fn softmax_probs(difficulties: &[f64], tau: f64, invert: bool) -> Vec<f64> {
    let logits: Vec<f64> = difficulties
        .iter()
        .map(|&d| if invert { d / tau } else { -d / tau })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

pub fn task_probs(tasks: &[TaskSpec], sched: &Schedule, step: u64, invert: bool) -> Vec<f64> {
    softmax_probs(&difficulties(tasks), sched.temperature(step), invert)
}

/// Seeded categorical sampler over tasks.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    tasks: Vec<TaskSpec>,
    schedule: Schedule,
    invert: bool,
}

impl TaskSampler {
    pub fn new(tasks: Vec<TaskSpec>, schedule: Schedule, invert: bool) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidSchedule("no tasks".into()));
        }
        Ok(Self {
            tasks,
            schedule,
            invert,
        })
    }

    pub fn probs(&self, step: u64) -> Vec<f64> {
        task_probs(&self.tasks, &self.schedule, step, self.invert)
    }

    /// Index of the drawn task.
    pub fn sample_index<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> usize {
        let probs = self.probs(step);
        // Weights are a softmax output, so at least one is positive.
        WeightedIndex::new(&probs)
            .expect("softmax yields a positive total")
            .sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> &TaskSpec {
        &self.tasks[self.sample_index(step, rng)]
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }
}

/// Per-epoch sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochMix {
    pub atomic: u64,
    pub multitask: u64,
}

/// Linear ramp from `atomic_start` atomic samples in the first epoch down to
/// `atomic_end` in the last; the remainder of each epoch is multitask data.
pub fn epoch_mix_plan(
    total_per_epoch: u64,
    epochs: u32,
    atomic_start: u64,
    atomic_end: u64,
) -> Result<Vec<EpochMix>> {
    if epochs < 2 {
        return Err(Error::InvalidPlan(format!("need at least 2 epochs, got {epochs}")));
    }
    if atomic_start > total_per_epoch || atomic_end > total_per_epoch {
        return Err(Error::InvalidPlan(format!(
            "atomic counts ({atomic_start}, {atomic_end}) exceed the epoch size {total_per_epoch}"
        )));
    }
    if atomic_end > atomic_start {
        return Err(Error::InvalidPlan(
            "atomic count must not grow across epochs".into(),
        ));
    }
    let span = atomic_start - atomic_end;
    let last = u64::from(epochs - 1);
    Ok((0..u64::from(epochs))
        .map(|e| {
            // Nearest integer on the linear ramp, halves rounded up.
            let drop = (2 * span * e + last) / (2 * last);
            let atomic = atomic_start - drop;
            EpochMix {
                atomic,
                multitask: total_per_epoch - atomic,
            }
        })
        .collect())
}

/// Shuffles images once, then emits each image's CoT sample immediately
/// followed by its direct-labeling sample.
pub fn multitask_interleave<R: Rng + ?Sized>(
    samples: &[QASample],
    rng: &mut R,
) -> Result<Vec<QASample>> {
    let mut order: Vec<&str> = Vec::new();
    let mut pairs: HashMap<&str, (Option<&QASample>, Option<&QASample>)> = HashMap::new();
    for sample in samples {
        let entry = pairs.entry(sample.image_id.as_str()).or_insert_with(|| {
            order.push(sample.image_id.as_str());
            (None, None)
        });
        let slot = if sample.task.is_cot() {
            &mut entry.0
        } else if sample.task.is_direct() {
            &mut entry.1
        } else {
            return Err(Error::InvalidPlan(format!(
                "{} sample for `{}` is not multitask data",
                sample.task.as_str(),
                sample.image_id
            )));
        };
        if slot.is_some() {
            return Err(Error::InvalidPlan(format!(
                "image `{}` has two {} samples",
                sample.image_id,
                sample.task.as_str()
            )));
        }
        *slot = Some(sample);
    }
    let mut images = Vec::with_capacity(order.len());
    for id in order {
        match pairs[id] {
            (Some(cot), Some(direct)) => images.push((cot, direct)),
            _ => return Err(Error::MissingPair(id.to_owned())),
        }
    }
    images.shuffle(rng);
    Ok(images
        .into_iter()
        .flat_map(|(cot, direct)| [cot.clone(), direct.clone()])
        .collect())
}

/// Assembles one epoch: `mix.atomic` atomic samples drawn without
/// replacement, followed by `mix.multitask` samples taken from freshly
/// shuffled multitask interleavings repeated as often as needed.
pub fn build_epoch<R: Rng + ?Sized>(
    mix: EpochMix,
    atomic: &[QASample],
    multitask: &[QASample],
    rng: &mut R,
) -> Result<Vec<QASample>> {
    if mix.atomic as usize > atomic.len() {
        return Err(Error::InvalidPlan(format!(
            "epoch needs {} atomic samples, pool has {}",
            mix.atomic,
            atomic.len()
        )));
    }
    if mix.multitask > 0 && multitask.is_empty() {
        return Err(Error::InvalidPlan("epoch needs multitask samples, pool is empty".into()));
    }
    let mut epoch: Vec<QASample> = atomic
        .choose_multiple(rng, mix.atomic as usize)
        .cloned()
        .collect();
    let mut remaining = mix.multitask as usize;
    while remaining > 0 {
        let stream = multitask_interleave(multitask, rng)?;
        let take = remaining.min(stream.len());
        epoch.extend(stream.into_iter().take(take));
        remaining -= take;
    }
    Ok(epoch)
}

/// Schedule configuration as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub tau0: f64,
    pub lambda: f64,
    pub steps: u64,
    pub tasks: Vec<TaskSpec>,
    pub mode: SchedulerMode,
    pub seed: u64,
    #[serde(default)]
    pub invert_difficulty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    Softmax,
    EpochMix,
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.tau0, self.lambda, self.steps)
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        validate_curriculum(&self.tasks)?;
        TaskSampler::new(self.tasks.clone(), self.schedule()?, self.invert_difficulty)
    }
}

/// The default task ladder: atomic generation before multitask reasoning.
pub fn default_tasks() -> Vec<TaskSpec> {
    [TaskKind::DepthGen, TaskKind::DepthCot]
        .iter()
        .enumerate()
        .map(|(i, k)| TaskSpec::new(k.as_str(), (i + 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::datagen::SampleMeta;

    #[test]
    fn temperature_closed_form() {
        let flat = Schedule::new(1.0, 0.0, 100).unwrap();
        assert!((0..=100).all(|s| flat.temperature(s) == 1.0));
        let one = Schedule::new(1.0, 1.0, 100).unwrap();
        assert_eq!(one.temperature(100), 0.5);
        let s = Schedule::new(2.0, 3.0, 100).unwrap();
        assert!((s.temperature(50) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn temperature_is_strictly_decreasing_with_annealing() {
        let s = Schedule::new(1.5, 0.7, 1000).unwrap();
        for step in 0..1000 {
            assert!(s.temperature(step + 1) < s.temperature(step));
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(Schedule::new(0.0, 1.0, 10).is_err());
        assert!(Schedule::new(1.0, -1.0, 10).is_err());
        assert!(Schedule::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn softmax_values() {
        let p = softmax_probs(&[3.0, 3.0, 3.0], 0.7, false);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        // Oracle: 1/(1+e^{-1}) and e^{-1}/(1+e^{-1}).
        let e = (-1.0f64).exp();
        let p = softmax_probs(&[1.0, 2.0], 1.0, false);
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.731059).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);

        let cold = softmax_probs(&[1.0, 2.0, 3.0], 1e-6, false);
        assert_eq!(cold, vec![1.0, 0.0, 0.0]);
        let inverted = softmax_probs(&[1.0, 2.0, 3.0], 1e-6, true);
        assert_eq!(inverted, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn harder_tasks_are_never_more_probable() {
        let tasks: Vec<TaskSpec> = [0.5, 1.0, 2.5, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| TaskSpec::new(format!("t{i}"), d))
            .collect();
        let sched = Schedule::new(2.0, 5.0, 1000).unwrap();
        for step in (0..=1000).step_by(37) {
            let p = task_probs(&tasks, &sched, step, false);
            assert!(p.windows(2).all(|w| w[0] >= w[1]), "{p:?}");
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_frequencies_and_degenerate_cases() {
        let single = TaskSampler::new(
            vec![TaskSpec::new("only", 1.0)],
            Schedule::new(1.0, 0.0, 1).unwrap(),
            false,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| single.sample_index(0, &mut rng) == 0));

        let cold = TaskSampler::new(
            vec![TaskSpec::new("a", 1.0), TaskSpec::new("b", 2.0)],
            Schedule::new(1e-6, 0.0, 1).unwrap(),
            false,
        )
        .unwrap();
        assert!((0..10_000).all(|_| cold.sample_index(0, &mut rng) == 0));
    }

    #[test]
    fn rank_difficulties_by_default() {
        let tasks = vec![
            TaskSpec {
                name: "a".into(),
                difficulty: None,
            },
            TaskSpec {
                name: "b".into(),
                difficulty: None,
            },
        ];
        assert_eq!(difficulties(&tasks), vec![1.0, 2.0]);
        assert!(validate_curriculum(&tasks).is_ok());
        assert!(validate_curriculum(&[TaskSpec::new("x", 2.0), TaskSpec::new("y", 1.0)]).is_err());
    }

    #[test]
    fn paper_epoch_plan() {
        let plan = epoch_mix_plan(20_000, 10, 20_000, 2_000).unwrap();
        assert_eq!(plan.len(), 10);
        assert_eq!(plan[0], EpochMix { atomic: 20_000, multitask: 0 });
        assert_eq!(plan[1], EpochMix { atomic: 18_000, multitask: 2_000 });
        assert_eq!(plan[9], EpochMix { atomic: 2_000, multitask: 18_000 });
        for (e, mix) in plan.iter().enumerate() {
            assert_eq!(mix.atomic, 20_000 - 2_000 * e as u64);
        }
    }

    #[test]
    fn two_epoch_plan_and_errors() {
        let plan = epoch_mix_plan(20_000, 2, 20_000, 2_000).unwrap();
        assert_eq!(
            plan,
            vec![
                EpochMix { atomic: 20_000, multitask: 0 },
                EpochMix { atomic: 2_000, multitask: 18_000 }
            ]
        );
        assert!(matches!(
            epoch_mix_plan(100, 5, 100, 101),
            Err(Error::InvalidPlan(_))
        ));
        assert!(epoch_mix_plan(100, 1, 100, 0).is_err());
    }

    #[test]
    fn odd_plans_sum_and_ramp() {
        for (n, e, start, end) in [(7u64, 4u32, 7u64, 1u64), (1000, 7, 900, 13), (3, 3, 3, 0)] {
            let plan = epoch_mix_plan(n, e, start, end).unwrap();
            assert_eq!(plan.first().unwrap().atomic, start);
            assert_eq!(plan.last().unwrap().atomic, end);
            assert!(plan.iter().all(|m| m.atomic + m.multitask == n));
            assert!(plan.windows(2).all(|w| w[1].multitask >= w[0].multitask));
        }
    }

    fn sample(image: &str, task: TaskKind) -> QASample {
        QASample {
            image_id: image.into(),
            task,
            prompt: String::new(),
            response: vec![],
            meta: SampleMeta::default(),
        }
    }

    #[test]
    fn interleave_keeps_pairs_together() {
        let mut input = Vec::new();
        for id in ["a", "b", "c"] {
            input.push(sample(id, TaskKind::DepthDirect));
            input.push(sample(id, TaskKind::DepthCot));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stream = multitask_interleave(&input, &mut rng).unwrap();
        assert_eq!(stream.len(), 6);
        for pair in stream.chunks(2) {
            assert_eq!(pair[0].image_id, pair[1].image_id);
            assert!(pair[0].task.is_cot() && pair[1].task.is_direct());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(multitask_interleave(&input, &mut rng).unwrap(), stream);

        let key = |s: &QASample| (s.image_id.clone(), s.task);
        let mut a: Vec<_> = input.iter().map(key).collect();
        let mut b: Vec<_> = stream.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn interleave_requires_both_samples() {
        let input = vec![
            sample("a", TaskKind::CountCot),
            sample("a", TaskKind::CountDirect),
            sample("b", TaskKind::CountCot),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            multitask_interleave(&input, &mut rng),
            Err(Error::MissingPair(id)) if id == "b"
        ));
    }

    #[test]
    fn epoch_assembly_counts() {
        let atomic: Vec<QASample> = (0..50)
            .map(|i| sample(&format!("g{i}"), TaskKind::DepthGen))
            .collect();
        let mut multi = Vec::new();
        for i in 0..4 {
            multi.push(sample(&format!("m{i}"), TaskKind::DepthCot));
            multi.push(sample(&format!("m{i}"), TaskKind::DepthDirect));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let epoch = build_epoch(EpochMix { atomic: 30, multitask: 20 }, &atomic, &multi, &mut rng)
            .unwrap();
        assert_eq!(epoch.len(), 50);
        assert!(epoch[..30].iter().all(|s| s.task == TaskKind::DepthGen));
        assert!(epoch[30..].chunks(2).all(|p| p[0].image_id == p[1].image_id));
    }

    #[test]
    fn config_round_trip() {
        let config = ScheduleConfig {
            tau0: 1.0,
            lambda: 2.0,
            steps: 100,
            tasks: default_tasks(),
            mode: SchedulerMode::Softmax,
            seed: 3,
            invert_difficulty: false,
        };
        let text = serde_json::to_string(&config).unwrap();
        assert!(text.contains("\"mode\":\"softmax\""));
        let back: ScheduleConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert!(back.sampler().is_ok());
    }
}
