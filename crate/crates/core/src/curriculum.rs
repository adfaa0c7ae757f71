//! Curriculum state machine: σ-level scheduling, per-iteration student
//! sampling, best-student tracking, and threshold-gated promotion.
//!
//! The perturbation level grows in stages: within the window
//! `[start_iter, end_iter)` the active level is
//! `min(σ_max, σ_min + k·⌊(t − start_iter)/T_s⌋)`; before the window the
//! curriculum is inactive, after it the level holds at `σ_max`. Each
//! (teacher, level) group keeps the best-scoring student seen so far; when a
//! stage finishes, each teacher's best student at the finished level is
//! promoted into the training set iff its no-reference quality cleared the
//! promotion threshold, with the cached best render frozen as its
//! pseudo-reference. Levels whose stage is cut off by a short window are
//! never unlocked and never promote.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::ImageRgb;
use crate::metrics::MetricReport;
use crate::training::{TrainView, ViewKind};

/// Tolerance for matching a scheduled σ against the configured level list.
const LEVEL_EPS: f64 = 1e-9;

/// Staged schedule of perturbation levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// First level unlocked, in degrees.
    pub sigma_min: f64,
    /// Final level, in degrees.
    pub sigma_max: f64,
    /// Level increment per stage, in degrees.
    pub k: f64,
    /// Iterations per stage.
    pub t_s: u64,
    /// First iteration of the curriculum window (inclusive).
    pub start_iter: u64,
    /// End of the curriculum window (exclusive).
    pub end_iter: u64,
}

impl ScheduleParams {
    /// Builds a schedule whose stage length divides the window evenly over
    /// the level count: `T_s = ⌊(end − start) / levels⌋`.
    pub fn with_default_stage(
        sigma_min: f64,
        sigma_max: f64,
        k: f64,
        start_iter: u64,
        end_iter: u64,
    ) -> Result<Self> {
        let mut params = Self { sigma_min, sigma_max, k, t_s: 1, start_iter, end_iter };
        params.validate()?;
        let n = params.levels().len() as u64;
        params.t_s = ((end_iter - start_iter) / n).max(1);
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::Config(format!(
                "schedule requires 0 <= sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("schedule step k must be > 0, got {}", self.k)));
        }
        if self.t_s < 1 {
            return Err(Error::Config("stage length T_s must be >= 1".into()));
        }
        if self.start_iter >= self.end_iter {
            return Err(Error::Config(format!(
                "curriculum window must be nonempty, got [{}, {})",
                self.start_iter, self.end_iter
            )));
        }
        Ok(())
    }

    /// The distinct levels this schedule walks through: σ_min, σ_min + k, …
    /// capped by (and always ending at) σ_max.
    pub fn levels(&self) -> Vec<f64> {
        let mut levels = Vec::new();
        let mut i = 0u32;
        loop {
            let s = self.sigma_min + self.k * f64::from(i);
            if s >= self.sigma_max - LEVEL_EPS {
                break;
            }
            levels.push(s);
            i += 1;
        }
        levels.push(self.sigma_max);
        levels
    }
}

/// Active perturbation level at iteration `t`: `None` before the window,
/// the staged value inside it, σ_max from `end_iter` on.
pub fn active_sigma(t: u64, params: &ScheduleParams) -> Option<f64> {
    if t < params.start_iter {
        return None;
    }
    if t >= params.end_iter {
        return Some(params.sigma_max);
    }
    let stage = (t - params.start_iter) / params.t_s;
    Some((params.sigma_min + params.k * stage as f64).min(params.sigma_max))
}

/// One candidate pseudo-view plus its best evaluation so far.
#[derive(Clone, Debug)]
pub struct StudentView {
    pub id: usize,
    pub teacher_id: usize,
    pub level_idx: usize,
    /// Perturbation level in degrees.
    pub level: f64,
    pub pose: CameraPose,
    pub best_composite: Option<f64>,
    pub best_nr: Option<f64>,
    pub best_render: Option<ImageRgb>,
}

impl StudentView {
    pub fn new(id: usize, teacher_id: usize, level_idx: usize, level: f64, pose: CameraPose) -> Self {
        Self {
            id,
            teacher_id,
            level_idx,
            level,
            pose,
            best_composite: None,
            best_nr: None,
            best_render: None,
        }
    }
}

/// All students, grouped by (teacher, level index).
#[derive(Clone, Debug, Default)]
pub struct StudentPool {
    levels: Vec<f64>,
    views: Vec<StudentView>,
    groups: BTreeMap<(usize, usize), Vec<usize>>,
    id_index: BTreeMap<usize, usize>,
}

impl StudentPool {
    pub fn new(levels: Vec<f64>) -> Self {
        Self { levels, views: Vec::new(), groups: BTreeMap::new(), id_index: BTreeMap::new() }
    }

    /// Configured σ levels, ascending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn push(&mut self, view: StudentView) {
        assert!(view.level_idx < self.levels.len(), "level index out of range");
        assert!(
            self.id_index.insert(view.id, self.views.len()).is_none(),
            "duplicate student id {}",
            view.id
        );
        self.groups.entry((view.teacher_id, view.level_idx)).or_default().push(self.views.len());
        self.views.push(view);
    }

    pub fn total_students(&self) -> usize {
        self.views.len()
    }

    /// Students in insertion order.
    pub fn students(&self) -> impl Iterator<Item = &StudentView> {
        self.views.iter()
    }

    pub fn get(&self, id: usize) -> Option<&StudentView> {
        self.id_index.get(&id).map(|&i| &self.views[i])
    }

    fn get_mut(&mut self, id: usize) -> Option<&mut StudentView> {
        let i = *self.id_index.get(&id)?;
        Some(&mut self.views[i])
    }

    /// Distinct teacher ids present, ascending.
    pub fn teacher_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.groups.keys().map(|&(t, _)| t).collect();
        set.into_iter().collect()
    }

    fn group(&self, teacher_id: usize, level_idx: usize) -> Option<&[usize]> {
        self.groups.get(&(teacher_id, level_idx)).map(Vec::as_slice)
    }

    fn level_index(&self, sigma: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - sigma).abs() < LEVEL_EPS)
    }
}

/// Event-log record; one JSON object per line in `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumEvent {
    pub iter: u64,
    pub event: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_id: Option<usize>,
    pub level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composite: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Unlocked,
    Evaluated,
    Promoted,
}

/// A freshly promoted pseudo-view together with its provenance.
#[derive(Clone, Debug)]
pub struct PromotedView {
    pub teacher_id: usize,
    pub level: f64,
    pub iter: u64,
    pub view: TrainView,
}

/// Single-writer curriculum state driven by the training loop.
#[derive(Clone, Debug)]
pub struct CurriculumState {
    params: ScheduleParams,
    pool: StudentPool,
    promotion_threshold: f64,
    /// (teacher, level) pairs already promoted — at most one each.
    promoted_keys: BTreeSet<(usize, usize)>,
    /// Best student per (teacher, level).
    best: BTreeMap<(usize, usize), usize>,
    /// All promotions so far, in emission order.
    promoted: Vec<PromotedView>,
    events: Vec<CurriculumEvent>,
    last_sigma: Option<f64>,
    window_closed: bool,
}

impl CurriculumState {
    pub fn new(params: ScheduleParams, pool: StudentPool, promotion_threshold: f64) -> Result<Self> {
        params.validate()?;
        if !(0.0..=1.0).contains(&promotion_threshold) {
            return Err(Error::Config(format!(
                "promotion threshold must lie in [0,1], got {promotion_threshold}"
            )));
        }
        Ok(Self {
            params,
            pool,
            promotion_threshold,
            promoted_keys: BTreeSet::new(),
            best: BTreeMap::new(),
            promoted: Vec::new(),
            events: Vec::new(),
            last_sigma: None,
            window_closed: false,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn pool(&self) -> &StudentPool {
        &self.pool
    }

    pub fn promotion_threshold(&self) -> f64 {
        self.promotion_threshold
    }

    /// All promotions emitted so far.
    pub fn promoted(&self) -> &[PromotedView] {
        &self.promoted
    }

    /// Whether students should still be drawn at iteration `t`.
    pub fn sampling_active(&self, t: u64) -> bool {
        t >= self.params.start_iter && t < self.params.end_iter
    }

    pub fn active_sigma(&self, t: u64) -> Option<f64> {
        active_sigma(t, &self.params)
    }

    /// Uniform draw from the (teacher, active level) group at iteration `t`.
    pub fn sample_student(&self, teacher_id: usize, t: u64, rng: &mut impl Rng) -> Result<&StudentView> {
        let sigma = self.active_sigma(t).ok_or(Error::InactiveCurriculum(t))?;
        let level_idx = self.pool.level_index(sigma).ok_or(Error::MissingLevel { sigma })?;
        let group = self
            .pool
            .group(teacher_id, level_idx)
            .filter(|g| !g.is_empty())
            .ok_or(Error::MissingLevel { sigma })?;
        let pick = group[rng.gen_range(0..group.len())];
        Ok(&self.pool.views[pick])
    }

    /// Records one evaluation; keeps it iff the composite strictly improves
    /// on the stored best. Returns whether the best was replaced.
    pub fn record_evaluation(
        &mut self,
        t: u64,
        student_id: usize,
        report: &MetricReport,
        render: &ImageRgb,
    ) -> Result<bool> {
        let view = self.pool.get_mut(student_id).ok_or(Error::UnknownStudent(student_id))?;
        let improved = view.best_composite.map_or(true, |best| report.composite < best);
        if improved {
            view.best_composite = Some(report.composite);
            view.best_nr = Some(report.nr_quality);
            view.best_render = Some(render.clone());
        }
        let (teacher_id, level_idx, level) = (view.teacher_id, view.level_idx, view.level);
        if improved {
            // The group best is the minimum over its students' bests, which
            // this strict improvement may or may not beat.
            let key = (teacher_id, level_idx);
            let current = self.best.get(&key).and_then(|&id| self.pool.get(id)).and_then(|v| v.best_composite);
            if current.map_or(true, |c| report.composite < c) {
                self.best.insert(key, student_id);
            }
        }
        self.events.push(CurriculumEvent {
            iter: t,
            event: EventKind::Evaluated,
            teacher_id: Some(teacher_id),
            level,
            student_id: Some(student_id),
            composite: Some(report.composite),
            nr: Some(report.nr_quality),
        });
        Ok(improved)
    }

    /// Promotes, for each teacher, the best student at `finished_level`
    /// whose no-reference score clears the threshold. Unknown levels and
    /// teachers without evaluated students are skipped. At most one
    /// promotion per (teacher, level) is ever emitted.
    pub fn on_level_transition(&mut self, t: u64, finished_level: f64) -> Vec<PromotedView> {
        let Some(level_idx) = self.pool.level_index(finished_level) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let candidates: Vec<(usize, usize)> = self
            .best
            .iter()
            .filter(|((_, l), _)| *l == level_idx)
            .map(|((teacher, _), &sid)| (*teacher, sid))
            .collect();
        for (teacher_id, student_id) in candidates {
            if self.promoted_keys.contains(&(teacher_id, level_idx)) {
                continue;
            }
            let view = self.pool.get(student_id).expect("best pointer refers to pool");
            let (Some(nr), Some(composite), Some(render)) =
                (view.best_nr, view.best_composite, view.best_render.as_ref())
            else {
                continue;
            };
            if nr < self.promotion_threshold {
                continue;
            }
            let promoted = PromotedView {
                teacher_id,
                level: finished_level,
                iter: t,
                view: TrainView {
                    pose: view.pose.clone(),
                    reference: render.clone(),
                    kind: ViewKind::PromotedStudent,
                    mask: None,
                },
            };
            self.promoted_keys.insert((teacher_id, level_idx));
            self.promoted.push(promoted.clone());
            self.events.push(CurriculumEvent {
                iter: t,
                event: EventKind::Promoted,
                teacher_id: Some(teacher_id),
                level: finished_level,
                student_id: Some(student_id),
                composite: Some(composite),
                nr: Some(nr),
            });
            out.push(promoted);
        }
        out
    }

    /// Advances the state machine to iteration `t`; call once per iteration.
    /// Emits unlock events at stage boundaries and returns any views
    /// promoted by a finished stage (including the final stage when the
    /// window closes).
    pub fn advance(&mut self, t: u64) -> Vec<PromotedView> {
        if self.window_closed {
            return Vec::new();
        }
        if t >= self.params.end_iter {
            self.window_closed = true;
            let finished = self.last_sigma;
            self.last_sigma = Some(self.params.sigma_max);
            return match finished {
                Some(sigma) => self.on_level_transition(t, sigma),
                None => Vec::new(),
            };
        }
        let now = self.active_sigma(t);
        if now == self.last_sigma {
            return Vec::new();
        }
        let finished = self.last_sigma;
        self.last_sigma = now;
        let mut promoted = Vec::new();
        if let Some(sigma) = finished {
            promoted = self.on_level_transition(t, sigma);
        }
        if let Some(sigma) = now {
            self.events.push(CurriculumEvent {
                iter: t,
                event: EventKind::Unlocked,
                teacher_id: None,
                level: sigma,
                student_id: None,
                composite: None,
                nr: None,
            });
        }
        promoted
    }

    /// Drains the accumulated event log.
    pub fn take_events(&mut self) -> Vec<CurriculumEvent> {
        std::mem::take(&mut self.events)
    }

    /// Read-only view of pending (undrained) events.
    pub fn events(&self) -> &[CurriculumEvent] {
        &self.events
    }
}
