//! The evolving system, its toy task suite, meta-actions and the episode loop.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::discover::{discover_primitive, DiscoveryConfig};
use super::perf_graph::{update_perf_graph, PerfBatch, PerfCausalGraph, PerfGraphConfig, PerfVariable, VarKind};
use super::policy::{update_meta_policy, Duals, PolicyConfig, PolicyStep, TabularPolicy};
use super::{MetaError, N_COSTS};
use crate::numerics::{rng, rng_stream, OptimizerConfig};
use crate::primitives::{fit_primitive, softmax, Executor, Layer, Nonlinearity, Primitive, PrimitiveSpec};
use crate::routing::{EdgeLabel, KnowledgeGraph};
use crate::types::{CausalType, TypeSig};

pub const FAMILIES: [&str; 4] = ["scale", "squash", "shift", "square"];
/// Family whose mechanism the seed library lacks.
pub const WITHHELD_FAMILY: &str = "square";
/// Library-size buckets × score deciles × failure families.
pub const BIN_COUNT: usize = 8 * 10 * FAMILIES.len();
const CALIB_POINTS: usize = 16;
const VALID_POINTS: usize = 33;
const EXPLORE_POINTS: usize = 64;
const RESIDUAL_THRESHOLD: f64 = 0.05;
const RESIDUAL_CAP: usize = 512;
const PARAM_BUDGET: f64 = 1000.0;
const EDGE_BUDGET: f64 = 20_000.0;
/// Largest validation drop an accepted step may cause.
const ACCEPT_TOL: f64 = 1e-3;
const LOG_BETA_RANGE: (f64, f64) = (-0.7, 7.0);
const HISTORY_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mechanism {
    Scale(f64),
    Squash(f64),
    Shift(f64),
    Square,
}

impl Mechanism {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Mechanism::Scale(a) => a * x,
            Mechanism::Squash(a) => (a * x).tanh(),
            Mechanism::Shift(b) => x + b,
            Mechanism::Square => x * x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub family: String,
    pub mechanism: Mechanism,
    pub domain: (f64, f64),
}

impl Task {
    fn new(id: &str, family: &str, mechanism: Mechanism, domain: (f64, f64)) -> Self {
        Task {
            id: id.into(),
            family: family.into(),
            mechanism,
            domain,
        }
    }

    fn grid(&self, n: usize, offset: f64) -> Vec<f64> {
        let (lo, hi) = self.domain;
        (0..n).map(|i| lo + (hi - lo) * (i as f64 + offset) / n as f64).collect()
    }

    pub fn calibration(&self) -> Vec<(f64, f64)> {
        self.grid(CALIB_POINTS, 0.5).into_iter().map(|x| (x, self.mechanism.apply(x))).collect()
    }

    pub fn validation(&self) -> Vec<(f64, f64)> {
        self.grid(VALID_POINTS, 0.25).into_iter().map(|x| (x, self.mechanism.apply(x))).collect()
    }
}

pub fn toy_tasks() -> Vec<Task> {
    use Mechanism::*;
    let full = (-1.0, 1.0);
    vec![
        Task::new("scale_half", "scale", Scale(0.5), full),
        Task::new("scale_double", "scale", Scale(2.0), full),
        Task::new("scale_flip", "scale", Scale(-1.0), full),
        Task::new("squash_2", "squash", Squash(2.0), full),
        Task::new("squash_3", "squash", Squash(3.0), full),
        Task::new("shift_up", "shift", Shift(0.5), full),
        Task::new("shift_down", "shift", Shift(-0.5), full),
        Task::new("square_full", "square", Square, full),
        Task::new("square_pos", "square", Square, (0.0, 1.0)),
        Task::new("square_neg", "square", Square, (-1.0, 0.0)),
    ]
}

fn scalar_sig(name: &str) -> TypeSig {
    TypeSig::of(&[(name, CausalType::PHYS)])
}

fn linear_prim(id: &str, w: f64, b: f64) -> Primitive {
    Primitive::linear(id, Layer::Phys, scalar_sig("x"), scalar_sig("y"), &[w], &[b]).expect("scalar linear map")
}

fn squash_prim(id: &str, a: f64) -> Primitive {
    let spec = PrimitiveSpec {
        squash: false,
        ..PrimitiveSpec::new(
            id,
            Layer::Phys,
            scalar_sig("x"),
            scalar_sig("y"),
            Executor::AffineNet {
                widths: vec![1, 1, 1],
                nonlinearity: Nonlinearity::Tanh,
            },
        )
    };
    crate::primitives::make_primitive(spec, &mut rng(0))
        .and_then(|p| p.with_params(&[a, 0.0, 1.0, 0.0]))
        .expect("scalar tanh map")
}

/// Mechanism primitives for every family except the withheld one, plus
/// two distractors no task needs.
pub fn seed_meta_library() -> Vec<Primitive> {
    vec![
        linear_prim("scale_half", 0.5, 0.0),
        linear_prim("scale_double", 2.0, 0.0),
        linear_prim("scale_flip", -1.0, 0.0),
        linear_prim("scale_triple", 3.0, 0.0),
        squash_prim("squash_2", 2.0),
        squash_prim("squash_3", 3.0),
        squash_prim("squash_flip", -1.0),
        linear_prim("shift_up", 1.0, 0.5),
        linear_prim("shift_down", 1.0, -0.5),
    ]
}

/// Experience the current system explains poorly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub family: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// The object of meta-evolution: a primitive library routed per task by a
/// softmax over calibration error, with knowledge-graph exclusions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSystem {
    pub library: Vec<Primitive>,
    /// Routing sharpness `β = exp(log_beta)`.
    pub log_beta: f64,
    /// `family --incompatible--> primitive` edges exclude a primitive.
    pub kg: KnowledgeGraph,
    pub tasks: Vec<Task>,
    pub residuals: Vec<Residual>,
    pub explorations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task: Vec<f64>,
    pub validation: f64,
    pub core: f64,
    pub family_scores: BTreeMap<String, f64>,
    /// Mean absolute validation error per family.
    pub family_residual: BTreeMap<String, f64>,
    /// Primitive evaluations performed.
    pub executed: usize,
    /// Largest routing weight each primitive receives on any task.
    pub usage: Vec<f64>,
}

impl Evaluation {
    pub fn worst_task(&self) -> usize {
        (0..self.per_task.len())
            .min_by(|&a, &b| self.per_task[a].total_cmp(&self.per_task[b]))
            .expect("suite is nonempty")
    }
}

fn scalar_eval(p: &Primitive, params: &[f64], x: f64) -> f64 {
    p.eval(params, &[x]).y[0]
}

/// Per-task routing over the allowed primitives.
struct Routed {
    allowed: Vec<usize>,
    weights: Vec<f64>,
    nmse: Vec<f64>,
}

impl MetaSystem {
    pub fn toy() -> Self {
        let mut kg = KnowledgeGraph::new();
        for f in FAMILIES {
            kg.add_entity(f);
        }
        MetaSystem {
            library: seed_meta_library(),
            log_beta: 20f64.ln(),
            kg,
            tasks: toy_tasks(),
            residuals: vec![],
            explorations: 0,
        }
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn task(&self, id: &str) -> Result<&Task, MetaError> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| MetaError::UnknownTask(id.into()))
    }

    fn route(&self, task: &Task) -> Routed {
        let calib = task.calibration();
        let mean = calib.iter().map(|p| p.1).sum::<f64>() / calib.len() as f64;
        let var = (calib.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / calib.len() as f64).max(1e-3);
        let allowed: Vec<usize> = (0..self.library.len())
            .filter(|&i| !self.kg.is_incompatible(&task.family, &self.library[i].id))
            .collect();
        let nmse: Vec<f64> = allowed
            .iter()
            .map(|&i| {
                let p = &self.library[i];
                let params = p.params();
                calib.iter().map(|&(x, y)| (scalar_eval(p, &params, x) - y).powi(2)).sum::<f64>() / calib.len() as f64 / var
            })
            .collect();
        let logits: Vec<f64> = nmse.iter().map(|e| -self.beta() * e).collect();
        let weights = if allowed.is_empty() { vec![] } else { softmax(&logits) };
        Routed { allowed, weights, nmse }
    }

    fn predict(&self, routed: &Routed, xs: &[f64]) -> Vec<f64> {
        let params: Vec<Vec<f64>> = routed.allowed.iter().map(|&i| self.library[i].params()).collect();
        xs.iter()
            .map(|&x| {
                routed
                    .allowed
                    .iter()
                    .zip(&routed.weights)
                    .zip(&params)
                    .map(|((&i, w), p)| w * scalar_eval(&self.library[i], p, x))
                    .sum()
            })
            .collect()
    }

    pub fn evaluate(&self) -> Evaluation {
        let mut per_task = Vec::new();
        let mut usage = vec![0.0f64; self.library.len()];
        let mut executed = 0;
        let mut fam: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for task in &self.tasks {
            let routed = self.route(task);
            for (&i, &w) in routed.allowed.iter().zip(&routed.weights) {
                usage[i] = usage[i].max(w);
            }
            let val = task.validation();
            let xs: Vec<f64> = val.iter().map(|p| p.0).collect();
            let pred = self.predict(&routed, &xs);
            executed += routed.allowed.len() * (CALIB_POINTS + VALID_POINTS);
            let mean = val.iter().map(|p| p.1).sum::<f64>() / val.len() as f64;
            let var = (val.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / val.len() as f64).max(1e-3);
            let mse = pred.iter().zip(&val).map(|(p, v)| (p - v.1).powi(2)).sum::<f64>() / val.len() as f64;
            let mae = pred.iter().zip(&val).map(|(p, v)| (p - v.1).abs()).sum::<f64>() / val.len() as f64;
            let score = 1.0 / (1.0 + mse / var);
            per_task.push(score);
            let e = fam.entry(task.family.clone()).or_default();
            e.0 += score;
            e.1 += mae;
            e.2 += 1;
        }
        let core_scores: Vec<f64> = self
            .tasks
            .iter()
            .zip(&per_task)
            .filter(|(t, _)| t.family != WITHHELD_FAMILY)
            .map(|(_, s)| *s)
            .collect();
        Evaluation {
            validation: per_task.iter().sum::<f64>() / per_task.len() as f64,
            core: core_scores.iter().sum::<f64>() / core_scores.len().max(1) as f64,
            family_scores: fam.iter().map(|(f, v)| (f.clone(), v.0 / v.2 as f64)).collect(),
            family_residual: fam.iter().map(|(f, v)| (f.clone(), v.1 / v.2 as f64)).collect(),
            per_task,
            executed,
            usage,
        }
    }

    pub fn kg_exclusions(&self) -> usize {
        self.kg.edges().iter().filter(|e| e.label == EdgeLabel::Incompatible).count()
    }
}

fn hash_f64s(h: &mut FnvHasher, xs: &[f64]) {
    for x in xs {
        h.write_u64(x.to_bits());
    }
}

/// Observable summary of the system used by the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    /// Primitive ids with parameter hashes.
    pub fingerprint: Vec<(String, u64)>,
    pub routing_hash: u64,
    pub history: Vec<(String, f64)>,
    /// Mean absolute residual per task family.
    pub failure: BTreeMap<String, f64>,
    pub bin: usize,
}

impl MetaState {
    pub fn of(sys: &MetaSystem, eval: &Evaluation) -> Self {
        let fingerprint = sys
            .library
            .iter()
            .map(|p| {
                let mut h = FnvHasher::default();
                hash_f64s(&mut h, &p.params());
                (p.id.clone(), h.finish())
            })
            .collect();
        let mut h = FnvHasher::default();
        hash_f64s(&mut h, &[sys.log_beta]);
        for e in sys.kg.edges() {
            h.write(e.src.as_bytes());
            h.write(e.dst.as_bytes());
        }
        let history = sys
            .tasks
            .iter()
            .zip(&eval.per_task)
            .take(HISTORY_WINDOW)
            .map(|(t, s)| (t.id.clone(), *s))
            .collect();
        MetaState {
            fingerprint,
            routing_hash: h.finish(),
            history,
            failure: eval.family_residual.clone(),
            bin: bin_of(sys, eval),
        }
    }
}

/// Codebook index from (library size bucket, core score decile, dominant
/// failure family).
pub fn bin_of(sys: &MetaSystem, eval: &Evaluation) -> usize {
    let size = (sys.library.len() / 4).min(7);
    let decile = ((eval.core * 10.0).floor() as usize).min(9);
    let family = FAMILIES
        .iter()
        .enumerate()
        .max_by(|a, b| {
            let ra = eval.family_residual.get(*a.1).copied().unwrap_or(0.0);
            let rb = eval.family_residual.get(*b.1).copied().unwrap_or(0.0);
            ra.total_cmp(&rb)
        })
        .map_or(0, |(i, _)| i);
    (size * 10 + decile) * FAMILIES.len() + family
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgOp {
    Exclude { family: String, prim: String },
    Include { family: String, prim: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaAction {
    AddPrimitive(Box<Primitive>),
    RemovePrimitive(String),
    RefinePrimitive { id: String, budget: usize },
    AdjustRouting { delta: f64 },
    UpdateKg(KgOp),
    Explore { task: String, domain: (f64, f64) },
}

impl MetaAction {
    pub fn name(&self) -> String {
        match self {
            MetaAction::AddPrimitive(p) => format!("add_primitive({})", p.id),
            MetaAction::RemovePrimitive(id) => format!("remove_primitive({id})"),
            MetaAction::RefinePrimitive { id, budget } => format!("refine_primitive({id},{budget})"),
            MetaAction::AdjustRouting { delta } => format!("adjust_routing({delta:+.3})"),
            MetaAction::UpdateKg(KgOp::Exclude { family, prim }) => format!("kg_exclude({family},{prim})"),
            MetaAction::UpdateKg(KgOp::Include { family, prim }) => format!("kg_include({family},{prim})"),
            MetaAction::Explore { task, .. } => format!("explore({task})"),
        }
    }
}

/// Policy-level action templates, instantiated against the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Explore,
    AddDiscovered,
    Refine,
    Remove,
    Sharpen,
    Soften,
    KgExclude,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Explore,
        ActionKind::AddDiscovered,
        ActionKind::Refine,
        ActionKind::Remove,
        ActionKind::Sharpen,
        ActionKind::Soften,
        ActionKind::KgExclude,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRewardConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma: f64,
    /// Core-score floor; `None` means 0.9 × the initial core score.
    pub eta_min: Option<f64>,
    pub p_max: usize,
    /// Cap on primitive evaluations per step.
    pub time_max: f64,
    pub refine_budget: usize,
}

impl Default for MetaRewardConfig {
    fn default() -> Self {
        MetaRewardConfig {
            alpha1: 1.0,
            alpha2: 0.1,
            alpha3: 0.05,
            gamma: 0.95,
            eta_min: None,
            p_max: 64,
            time_max: 100_000.0,
            refine_budget: 200,
        }
    }
}

impl MetaRewardConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(MetaError::Config(format!("γ = {} must lie in [0,1)", self.gamma)));
        }
        if [self.alpha1, self.alpha2, self.alpha3, self.time_max].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetaError::Config("reward weights and time cap must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Result of one sandboxed meta-step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: MetaSystem,
    pub eval: Evaluation,
    pub delta_perf: f64,
    pub cost: f64,
    pub novelty: f64,
    pub reward: f64,
    pub costs: [f64; N_COSTS],
    pub accepted: bool,
    pub bin: usize,
}

struct Applied {
    param_updates: usize,
    extra_evals: usize,
}

fn normalized_cost(param_updates: usize, evals: usize) -> f64 {
    0.5 * (param_updates as f64 / PARAM_BUDGET).min(1.0) + 0.5 * (evals as f64 / EDGE_BUDGET).min(1.0)
}

impl MetaSystem {
    fn apply(&mut self, action: &MetaAction, cfg: &MetaRewardConfig) -> Result<Applied, MetaError> {
        let none = Applied {
            param_updates: 0,
            extra_evals: 0,
        };
        match action {
            MetaAction::AddPrimitive(p) => {
                if self.library.iter().any(|q| q.id == p.id) {
                    return Err(MetaError::Inapplicable(format!("primitive `{}` already present", p.id)));
                }
                if p.in_dim() != 1 || p.out_dim() != 1 {
                    return Err(MetaError::Inapplicable("toy tasks are scalar".into()));
                }
                self.library.push((**p).clone());
                Ok(Applied {
                    param_updates: p.n_params(),
                    ..none
                })
            }
            MetaAction::RemovePrimitive(id) => {
                let i = self.library.iter().position(|p| &p.id == id).ok_or_else(|| MetaError::Inapplicable(format!("no primitive `{id}`")))?;
                if self.library.len() == 1 {
                    return Err(MetaError::Inapplicable("cannot remove the last primitive".into()));
                }
                self.library.remove(i);
                Ok(none)
            }
            MetaAction::RefinePrimitive { id, budget } => {
                let i = self.library.iter().position(|p| &p.id == id).ok_or_else(|| MetaError::Inapplicable(format!("no primitive `{id}`")))?;
                if *budget == 0 {
                    return Ok(none);
                }
                // Fit on the calibration data of tasks this primitive dominates.
                let mut data = Vec::new();
                for task in &self.tasks {
                    let r = self.route(task);
                    let best = r.allowed.iter().zip(&r.weights).max_by(|a, b| a.1.total_cmp(b.1)).map(|(&j, _)| j);
                    if best == Some(i) {
                        data.extend(task.calibration().into_iter().map(|(x, y)| (vec![x], vec![y])));
                    }
                }
                if data.is_empty() {
                    return Err(MetaError::Inapplicable(format!("`{id}` leads no task")));
                }
                let (fitted, _) = fit_primitive(&self.library[i], &data, &OptimizerConfig::adam(0.01, *budget))?;
                let n = fitted.n_params();
                self.library[i] = fitted;
                Ok(Applied {
                    param_updates: n,
                    extra_evals: data.len() * budget,
                })
            }
            MetaAction::AdjustRouting { delta } => {
                self.log_beta = (self.log_beta + delta).clamp(LOG_BETA_RANGE.0, LOG_BETA_RANGE.1);
                Ok(Applied {
                    param_updates: 1,
                    ..none
                })
            }
            MetaAction::UpdateKg(op) => {
                match op {
                    KgOp::Exclude { family, prim } => {
                        if !self.library.iter().any(|p| &p.id == prim) {
                            return Err(MetaError::Inapplicable(format!("no primitive `{prim}`")));
                        }
                        self.kg.add_edge(family, prim, EdgeLabel::Incompatible, 1.0)?;
                    }
                    KgOp::Include { family, prim } => {
                        if !self.kg.remove_edge(family, prim, EdgeLabel::Incompatible) {
                            return Err(MetaError::Inapplicable(format!("`{prim}` is not excluded for `{family}`")));
                        }
                    }
                }
                Ok(Applied {
                    param_updates: 1,
                    ..none
                })
            }
            MetaAction::Explore { task, domain } => {
                let t = self.task(task)?.clone();
                let routed = self.route(&t);
                let mut r = rng_stream(self.explorations, 11);
                self.explorations += 1;
                let (lo, hi) = *domain;
                if !(lo < hi) {
                    return Err(MetaError::Inapplicable("empty exploration domain".into()));
                }
                let xs: Vec<f64> = (0..EXPLORE_POINTS).map(|_| r.random_range(lo..hi)).collect();
                let pred = self.predict(&routed, &xs);
                for (x, p) in xs.iter().zip(pred) {
                    let y = t.mechanism.apply(*x);
                    if (y - p).abs() > RESIDUAL_THRESHOLD && self.residuals.len() < RESIDUAL_CAP {
                        self.residuals.push(Residual {
                            family: t.family.clone(),
                            x: vec![*x],
                            y: vec![y],
                        });
                    }
                }
                let _ = cfg;
                Ok(Applied {
                    param_updates: 0,
                    extra_evals: routed.allowed.len() * EXPLORE_POINTS,
                })
            }
        }
    }

    /// Concrete action for a template, or an error when none applies.
    pub fn instantiate(&self, kind: ActionKind, eval: &Evaluation, cfg: &MetaRewardConfig, disc: &DiscoveryConfig) -> Result<MetaAction, MetaError> {
        let worst = &self.tasks[eval.worst_task()];
        match kind {
            ActionKind::Explore => Ok(MetaAction::Explore {
                task: worst.id.clone(),
                domain: worst.domain,
            }),
            ActionKind::AddDiscovered => {
                let (cand, report) = discover_primitive(self, &self.residuals, disc)
                    .ok_or_else(|| MetaError::Inapplicable("no candidate mined from residuals".into()))?;
                if !report.accepted {
                    return Err(MetaError::Inapplicable(format!("candidate rejected: Δ{} = {:.4}", report.family, report.delta_family)));
                }
                Ok(MetaAction::AddPrimitive(Box::new(cand.prim)))
            }
            ActionKind::Refine => {
                let r = self.route(worst);
                let (&i, _) = r
                    .allowed
                    .iter()
                    .zip(&r.weights)
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .ok_or_else(|| MetaError::Inapplicable("worst task has no primitives".into()))?;
                Ok(MetaAction::RefinePrimitive {
                    id: self.library[i].id.clone(),
                    budget: cfg.refine_budget,
                })
            }
            ActionKind::Remove => {
                let i = (0..self.library.len())
                    .min_by(|&a, &b| eval.usage[a].total_cmp(&eval.usage[b]))
                    .ok_or_else(|| MetaError::Inapplicable("empty library".into()))?;
                Ok(MetaAction::RemovePrimitive(self.library[i].id.clone()))
            }
            ActionKind::Sharpen => Ok(MetaAction::AdjustRouting { delta: std::f64::consts::LN_2 }),
            ActionKind::Soften => Ok(MetaAction::AdjustRouting { delta: -std::f64::consts::LN_2 }),
            ActionKind::KgExclude => {
                let r = self.route(worst);
                let best = (0..r.allowed.len()).min_by(|&a, &b| r.nmse[a].total_cmp(&r.nmse[b]));
                let harm = (0..r.allowed.len())
                    .filter(|&k| Some(k) != best)
                    .max_by(|&a, &b| (r.weights[a] * r.nmse[a]).total_cmp(&(r.weights[b] * r.nmse[b])))
                    .ok_or_else(|| MetaError::Inapplicable("nothing to exclude".into()))?;
                Ok(MetaAction::UpdateKg(KgOp::Exclude {
                    family: worst.family.clone(),
                    prim: self.library[r.allowed[harm]].id.clone(),
                }))
            }
        }
    }
}

fn constraint_costs(sys: &MetaSystem, eval: &Evaluation, evals: usize, eta_min: f64, cfg: &MetaRewardConfig) -> [f64; N_COSTS] {
    [
        if eval.core < eta_min { 1.0 } else { 0.0 },
        sys.library.len().saturating_sub(cfg.p_max) as f64,
        ((evals as f64 - cfg.time_max) / cfg.time_max).max(0.0),
    ]
}

/// Applies `action` to a sandbox copy, evaluates it, and commits only if the
/// hard constraints hold and validation does not drop. A failing action
/// leaves the state unchanged and earns `−α2·Cost` of the evaluation alone.
pub fn meta_step(
    sys: &MetaSystem,
    before: &Evaluation,
    action: &MetaAction,
    cfg: &MetaRewardConfig,
    eta_min: f64,
    visited: &BTreeSet<usize>,
) -> StepOutcome {
    let mut sandbox = sys.clone();
    match sandbox.apply(action, cfg) {
        Err(_) => failed_step(sys, before, cfg, eta_min),
        Ok(applied) => {
            let eval = sandbox.evaluate();
            let delta_perf = eval.validation - before.validation;
            let evals = eval.executed + applied.extra_evals;
            let cost = normalized_cost(applied.param_updates, evals);
            let bin = bin_of(&sandbox, &eval);
            let novelty = if visited.contains(&bin) { 0.0 } else { 1.0 };
            let costs = constraint_costs(&sandbox, &eval, evals, eta_min, cfg);
            let reward = cfg.alpha1 * delta_perf - cfg.alpha2 * cost + cfg.alpha3 * novelty;
            let accepted = costs.iter().all(|&c| c <= 0.0) && delta_perf >= -ACCEPT_TOL;
            let (next, eval) = if accepted { (sandbox, eval) } else { (sys.clone(), before.clone()) };
            StepOutcome {
                next,
                eval,
                delta_perf,
                cost,
                novelty,
                reward,
                costs,
                accepted,
                bin,
            }
        }
    }
}

fn failed_step(sys: &MetaSystem, before: &Evaluation, cfg: &MetaRewardConfig, eta_min: f64) -> StepOutcome {
    let cost = normalized_cost(0, before.executed);
    StepOutcome {
        next: sys.clone(),
        eval: before.clone(),
        delta_perf: 0.0,
        cost,
        novelty: 0.0,
        reward: -cfg.alpha2 * cost,
        costs: constraint_costs(sys, before, before.executed, eta_min, cfg),
        accepted: false,
        bin: bin_of(sys, before),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRunConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Sandbox-only ablation: nothing is ever committed.
    pub frozen: bool,
    pub reward: MetaRewardConfig,
    pub policy: PolicyConfig,
    pub perf: PerfGraphConfig,
    pub discovery: DiscoveryConfig,
    /// Episodes between performance-graph updates.
    pub perf_every: usize,
}

impl Default for MetaRunConfig {
    fn default() -> Self {
        MetaRunConfig {
            episodes: 200,
            horizon: 5,
            seed: 0,
            frozen: false,
            reward: MetaRewardConfig::default(),
            policy: PolicyConfig::default(),
            perf: PerfGraphConfig::default(),
            discovery: DiscoveryConfig::default(),
            perf_every: 25,
        }
    }
}

/// One line of the append-only episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub step: usize,
    pub bin: usize,
    pub action: String,
    pub reward: f64,
    pub costs: [f64; N_COSTS],
    pub accepted: bool,
    pub validation: f64,
    pub core: f64,
    pub library_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRunReport {
    pub initial: Evaluation,
    pub final_eval: Evaluation,
    pub relative_improvement: f64,
    pub eta_min: f64,
    /// Accepted steps that broke the core floor or the library cap.
    pub violations: usize,
    pub accepted: usize,
    pub log: Vec<LogRecord>,
    pub system: MetaSystem,
    pub policy: TabularPolicy,
    pub duals: Duals,
    pub perf_graph: PerfCausalGraph,
}

impl MetaRunReport {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

fn perf_variables() -> Vec<PerfVariable> {
    let mut v: Vec<PerfVariable> = ["library_size", "log_beta", "kg_exclusions", "residual_buffer"]
        .iter()
        .map(|n| PerfVariable {
            name: n.to_string(),
            kind: VarKind::Meta,
        })
        .collect();
    v.extend(["validation", "core"].iter().map(|n| PerfVariable {
        name: n.to_string(),
        kind: VarKind::Performance,
    }));
    v
}

/// Runs the episode loop on the toy suite from a fresh system.
pub fn meta_run(cfg: &MetaRunConfig) -> Result<MetaRunReport, MetaError> {
    cfg.reward.validate()?;
    cfg.policy.validate()?;
    if cfg.horizon == 0 || cfg.perf_every == 0 {
        return Err(MetaError::Config("horizon and performance-graph period must be positive".into()));
    }
    let mut sys = MetaSystem::toy();
    let initial = sys.evaluate();
    let eta_min = cfg.reward.eta_min.unwrap_or(0.9 * initial.core);
    let mut eval = initial.clone();
    let mut policy = TabularPolicy::uniform(BIN_COUNT, ActionKind::ALL.len());
    let mut duals = Duals::default();
    let mut visited = BTreeSet::from([bin_of(&sys, &eval)]);
    let mut r = rng(cfg.seed);
    let mut log = Vec::new();
    let mut perf_graph = PerfCausalGraph::new(perf_variables());
    let mut perf_rows = Vec::new();
    let (mut violations, mut accepted_count) = (0, 0);
    for episode in 0..cfg.episodes {
        let mut traj = Vec::with_capacity(cfg.horizon);
        for step in 0..cfg.horizon {
            let bin = bin_of(&sys, &eval);
            let a = policy.sample(bin, &mut r);
            let kind = ActionKind::ALL[a];
            let (name, out) = match sys.instantiate(kind, &eval, &cfg.reward, &cfg.discovery) {
                Ok(action) => (action.name(), meta_step(&sys, &eval, &action, &cfg.reward, eta_min, &visited)),
                Err(e) => (format!("{kind:?}: {e}"), failed_step(&sys, &eval, &cfg.reward, eta_min)),
            };
            if kind == ActionKind::AddDiscovered && !cfg.frozen {
                // Mining consumes the residual buffer whatever the outcome.
                sys.residuals.clear();
            }
            visited.insert(out.bin);
            let committed = out.accepted && !cfg.frozen;
            if committed {
                accepted_count += 1;
                let mut next = out.next;
                if kind == ActionKind::AddDiscovered {
                    next.residuals.clear();
                }
                sys = next;
                eval = out.eval;
                if eval.core < eta_min || sys.library.len() > cfg.reward.p_max {
                    violations += 1;
                }
            }
            traj.push(PolicyStep {
                bin,
                action: a,
                reward: out.reward,
                costs: out.costs,
            });
            log.push(LogRecord {
                episode,
                step,
                bin,
                action: name,
                reward: out.reward,
                costs: out.costs,
                accepted: committed,
                validation: eval.validation,
                core: eval.core,
                library_size: sys.library.len(),
            });
        }
        if !cfg.frozen {
            (policy, duals) = update_meta_policy(&policy, &[traj], &duals, &cfg.policy)?;
        }
        perf_rows.push(vec![
            sys.library.len() as f64,
            sys.log_beta,
            sys.kg_exclusions() as f64,
            sys.residuals.len() as f64,
            eval.validation,
            eval.core,
        ]);
        if (episode + 1) % cfg.perf_every == 0 {
            perf_graph = update_perf_graph(&perf_graph, &PerfBatch { rows: perf_rows.clone() }, &cfg.perf)?.0;
        }
    }
    let final_eval = sys.evaluate();
    Ok(MetaRunReport {
        relative_improvement: (final_eval.validation - initial.validation) / initial.validation,
        initial,
        final_eval,
        eta_min,
        violations,
        accepted: accepted_count,
        log,
        system: sys,
        policy,
        duals,
        perf_graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn withheld_family_is_the_weak_spot() {
        let sys = MetaSystem::toy();
        let e = sys.evaluate();
        assert!(e.family_scores["scale"] > 0.99);
        assert!(e.family_scores["square"] < 0.7);
        assert!(bin_of(&sys, &e) < BIN_COUNT);
        assert_eq!(MetaState::of(&sys, &e).bin, bin_of(&sys, &e));
    }

    #[test]
    fn zero_budget_refine_is_a_costed_noop() {
        let sys = MetaSystem::toy();
        let e = sys.evaluate();
        let cfg = MetaRewardConfig::default();
        let visited = BTreeSet::from([bin_of(&sys, &e)]);
        let a = MetaAction::RefinePrimitive {
            id: "scale_half".into(),
            budget: 0,
        };
        let out = meta_step(&sys, &e, &a, &cfg, 0.9 * e.core, &visited);
        assert_eq!(out.delta_perf, 0.0);
        assert_eq!(out.novelty, 0.0);
        let cost0 = normalized_cost(0, e.executed);
        assert!((out.reward + cfg.alpha2 * cost0).abs() < 1e-15);
    }

    #[test]
    fn removing_an_unused_primitive_is_harmless() {
        let sys = MetaSystem::toy();
        let e = sys.evaluate();
        let cfg = MetaRewardConfig::default();
        let out = meta_step(&sys, &e, &MetaAction::RemovePrimitive("scale_triple".into()), &cfg, 0.9 * e.core, &BTreeSet::new());
        assert!((out.eval.core - e.core).abs() < 1e-4);
        assert!(out.costs.iter().all(|&c| c <= 0.0));
        assert!(out.accepted);
    }

    #[test]
    fn adding_the_withheld_mechanism_helps_its_family() {
        let sys = MetaSystem::toy();
        let e = sys.evaluate();
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..41).map(|i| {
            let x = -1.0 + i as f64 / 20.0;
            (vec![x], vec![x * x])
        }).collect();
        let cand = super::super::discover::fit_candidate("sq", &data, &DiscoveryConfig::default()).unwrap().0;
        let out = meta_step(&sys, &e, &MetaAction::AddPrimitive(Box::new(cand)), &MetaRewardConfig::default(), 0.9 * e.core, &BTreeSet::new());
        assert!(out.eval.family_scores["square"] > e.family_scores["square"] + 0.2);
        assert!(out.delta_perf > 0.0 && out.accepted);
    }

    #[test]
    fn failed_action_leaves_state() {
        let sys = MetaSystem::toy();
        let e = sys.evaluate();
        let out = meta_step(&sys, &e, &MetaAction::RemovePrimitive("nope".into()), &MetaRewardConfig::default(), 0.0, &BTreeSet::new());
        assert!(!out.accepted);
        assert_eq!(out.next, sys);
    }
}
