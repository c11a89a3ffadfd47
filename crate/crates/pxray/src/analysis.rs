//! Experiment drivers: relevance-ratio summaries over policy rollouts, the
//! target-change experiment, and the CSV/PGM emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::{attribute, AttributionResult, Method};
use crate::env::{env_step, observe, Scene};
use crate::error::{Error, Result};
use crate::kinematics::{importance_factors, AlphaMode};
use crate::network::{network_forward, PolicyNetwork};

/// Fixed column order of the series CSV.
pub const GROUP_COLUMNS: [&str; 5] = ["image", "joint_pos", "joint_vel", "ee_pos", "ee_vel"];

/// Relevance ratios per group at one rollout step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePoint {
    pub t: usize,
    /// Absolute relevance mass per group (the raw totals the ratios are
    /// computed from).
    pub group_totals: BTreeMap<String, f64>,
    /// Share of the absolute relevance mass per group; sums to 1 whenever
    /// any mass survived, each entry in [0, 1].
    pub ratios: BTreeMap<String, f64>,
    /// Signed total relevance over all inputs.
    pub total: f64,
    /// Mass dropped at zero-denominator or sign-tie columns.
    pub dropped: f64,
    /// sum_j alpha_j |tau_j| at this step.
    pub output_total: f64,
}

/// Ratio trajectory for one method over one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTimeSeries {
    pub method: Method,
    pub alpha_mode: AlphaMode,
    pub points: Vec<TimePoint>,
    /// Step at which the target was swapped, when this series came from the
    /// target-change experiment.
    pub change_step: Option<usize>,
}

/// Signed group ratios: ratio_g = total_g / sum of totals. All zero when no
/// relevance survived.
pub fn group_ratios(result: &AttributionResult) -> BTreeMap<String, f64> {
    normalize(&result.group_totals)
}

/// Group ratios over absolute relevance mass; always in [0, 1].
pub fn group_ratios_abs(result: &AttributionResult) -> BTreeMap<String, f64> {
    normalize(&result.group_totals_abs)
}

fn normalize(totals: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let sum: f64 = totals.values().sum();
    totals
        .iter()
        .map(|(k, v)| (k.clone(), if sum == 0.0 { 0.0 } else { v / sum }))
        .collect()
}

/// Population mean and standard deviation of each group's ratio over the
/// series.
pub fn static_summary(series: &RelevanceTimeSeries) -> BTreeMap<String, (f64, f64)> {
    let mut out = BTreeMap::new();
    let n = series.points.len();
    if n == 0 {
        return out;
    }
    for name in series.points[0].ratios.keys() {
        let values: Vec<f64> = series.points.iter().map(|p| p.ratios[name]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        out.insert(name.clone(), (mean, var.sqrt()));
    }
    out
}

/// Rule for picking the replacement target mid-rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetChange {
    /// Keep the current target (control case).
    Same,
    /// Move to a fixed world point.
    Point(f64, f64),
    /// Seeded random convex combination of the given (trained) targets.
    RandomBetween { targets: Vec<[f64; 2]>, seed: u64 },
}

/// Resolves the rule to a concrete reachable point for the given scene.
pub fn resolve_target_change(rule: &TargetChange, scene: &Scene) -> Result<(f64, f64)> {
    match rule {
        TargetChange::Same => Ok(scene.target),
        TargetChange::Point(x, y) => {
            check_reachable(scene, (*x, *y))?;
            Ok((*x, *y))
        }
        TargetChange::RandomBetween { targets, seed } => {
            if targets.is_empty() {
                return Err(Error::config("target-change rule needs at least one target"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for _ in 0..100 {
                let mut weights: Vec<f64> = (0..targets.len()).map(|_| rng.gen::<f64>()).collect();
                let sum: f64 = weights.iter().sum();
                if sum == 0.0 {
                    continue;
                }
                weights.iter_mut().for_each(|w| *w /= sum);
                let x: f64 = targets.iter().zip(&weights).map(|(t, w)| t[0] * w).sum();
                let y: f64 = targets.iter().zip(&weights).map(|(t, w)| t[1] * w).sum();
                if check_reachable(scene, (x, y)).is_ok() {
                    return Ok((x, y));
                }
            }
            Err(Error::config("no reachable point between the given targets after 100 draws"))
        }
    }
}

fn check_reachable(scene: &Scene, p: (f64, f64)) -> Result<()> {
    let d = ((p.0 - scene.arm.base_pose.0).powi(2) + (p.1 - scene.arm.base_pose.1).powi(2)).sqrt();
    if d < scene.arm.min_reach() || d > scene.arm.total_reach() {
        return Err(Error::config(format!(
            "replacement target at distance {d:.3} outside the reachable annulus"
        )));
    }
    Ok(())
}

/// Rolls the policy out in the environment, computing one attribution per
/// requested method at every step.
///
/// Kinematic importance factors are recomputed from the arm state at each
/// step unless `freeze_alpha` pins the step-0 factors for the whole run.
pub fn run_trajectory_analysis(
    net: &PolicyNetwork,
    scene: &Scene,
    alpha_mode: AlphaMode,
    methods: &[Method],
    steps: usize,
    freeze_alpha: bool,
) -> Result<Vec<RelevanceTimeSeries>> {
    rollout_series(net, scene, alpha_mode, methods, steps, None, freeze_alpha)
}

/// As [`run_trajectory_analysis`], but swaps the scene's target at
/// `change_step` according to the rule; the change step is recorded in the
/// output series.
pub fn target_change_experiment(
    net: &PolicyNetwork,
    scene: &Scene,
    alpha_mode: AlphaMode,
    methods: &[Method],
    steps: usize,
    change_step: usize,
    rule: &TargetChange,
    freeze_alpha: bool,
) -> Result<Vec<RelevanceTimeSeries>> {
    rollout_series(
        net,
        scene,
        alpha_mode,
        methods,
        steps,
        Some((change_step, rule.clone())),
        freeze_alpha,
    )
}

fn rollout_series(
    net: &PolicyNetwork,
    scene: &Scene,
    alpha_mode: AlphaMode,
    methods: &[Method],
    steps: usize,
    change: Option<(usize, TargetChange)>,
    freeze_alpha: bool,
) -> Result<Vec<RelevanceTimeSeries>> {
    let change_step = change.as_ref().map(|(k, _)| *k).filter(|&k| k < steps);
    let mut series: Vec<RelevanceTimeSeries> = methods
        .iter()
        .map(|&m| RelevanceTimeSeries {
            method: m,
            alpha_mode,
            points: Vec::with_capacity(steps),
            change_step,
        })
        .collect();

    let mut scene = scene.clone();
    let mut obs = observe(&scene);
    let frozen = freeze_alpha.then(|| importance_factors(&scene.arm, &scene.state, alpha_mode));

    for t in 0..steps {
        if let Some((k, rule)) = &change {
            if t == *k {
                scene.target = resolve_target_change(rule, &scene)?;
                obs = observe(&scene);
            }
        }
        let alpha = match &frozen {
            Some(a) => a.clone(),
            None => importance_factors(&scene.arm, &scene.state, alpha_mode),
        };
        for (s, &method) in series.iter_mut().zip(methods) {
            let result = attribute(method, net, &obs.image, &obs.config, &alpha)?;
            s.points.push(TimePoint {
                t,
                group_totals: result.group_totals_abs.clone(),
                ratios: group_ratios_abs(&result),
                total: result.total_relevance(),
                dropped: result.drops.mass,
                output_total: result.output_total,
            });
        }
        let (torques, _) = network_forward(net, &obs.image, &obs.config)?;
        let (next, next_obs, _) = env_step(&scene, torques.data())?;
        scene = next;
        obs = next_obs;
    }
    Ok(series)
}

/// Formats a float with 9 significant digits, the CSV convention.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Serializes series to the CSV schema
/// `t,method,alpha_mode,image,joint_pos,joint_vel,ee_pos,ee_vel,total,dropped`,
/// one row per (t, method). A target change is recorded as a leading
/// `# change_step=k` comment line.
pub fn series_to_csv(series: &[RelevanceTimeSeries]) -> String {
    let mut out = String::new();
    if let Some(k) = series.iter().find_map(|s| s.change_step) {
        let _ = writeln!(out, "# change_step={k}");
    }
    let _ = writeln!(out, "t,method,alpha_mode,{},total,dropped", GROUP_COLUMNS.join(","));
    let steps = series.iter().map(|s| s.points.len()).max().unwrap_or(0);
    for t in 0..steps {
        for s in series {
            let Some(p) = s.points.get(t) else { continue };
            let _ = write!(out, "{},{},{}", p.t, s.method.as_str(), s.alpha_mode.as_str());
            for g in GROUP_COLUMNS {
                let v = p.ratios.get(g).copied().unwrap_or(0.0);
                let _ = write!(out, ",{}", sig9(v));
            }
            let _ = writeln!(out, ",{},{}", sig9(p.total), sig9(p.dropped));
        }
    }
    out
}

/// Writes the series CSV to a file.
pub fn write_series_csv(series: &[RelevanceTimeSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, series_to_csv(series)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Which half of an attribution result to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    Image,
    Config,
}

/// Emits a heatmap as ASCII PGM (P2), scaled so the maximum relevance maps
/// to 255 and the minimum to 0.
///
/// For the config heatmap a companion CSV of `(feature_name, relevance)` is
/// written next to the PGM with extension `.csv`.
pub fn emit_heatmap(
    result: &AttributionResult,
    which: HeatmapKind,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    match which {
        HeatmapKind::Image => {
            let shape = result.image_relevance.shape();
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            // Sum channels into one plane.
            let mut plane = vec![0.0; h * w];
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        plane[r * w + col] +=
                            result.image_relevance.data()[result.image_relevance.idx3(r, col, ch)];
                    }
                }
            }
            write_pgm(path, w, h, &plane)
        }
        HeatmapKind::Config => {
            let values = result.config_relevance.data();
            write_pgm(path, values.len(), 1, values)?;
            let mut csv = String::from("feature,relevance\n");
            for (i, v) in values.iter().enumerate() {
                let name = result
                    .input_groups
                    .iter()
                    .find(|g| g.lo <= i && i < g.hi)
                    .map(|g| format!("{}[{}]", g.name, i - g.lo))
                    .unwrap_or_else(|| format!("config[{i}]"));
                let _ = writeln!(csv, "{name},{}", sig9(*v));
            }
            let csv_path = path.with_extension("csv");
            std::fs::write(&csv_path, csv)
                .map_err(|e| Error::io(csv_path.display().to_string(), e))
        }
    }
}

fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in 0..height {
        let line: Vec<String> = (0..width)
            .map(|col| {
                let v = values[row * width + col];
                let scaled = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u32 } else { 0 };
                scaled.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses an ASCII PGM back into (width, height, values).
pub fn parse_pgm(source: &str) -> Result<(usize, usize, Vec<u32>)> {
    let mut tokens = source
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    let magic = tokens.next().unwrap_or_default();
    if magic != "P2" {
        return Err(Error::Parse { path: "pgm".to_string(), detail: format!("bad magic {magic:?}") });
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse { path: "pgm".to_string(), detail: format!("missing {what}") })
    };
    let width = next_num("width")?;
    let height = next_num("height")?;
    let _maxval = next_num("maxval")?;
    let values: Vec<u32> = tokens.filter_map(|t| t.parse().ok()).collect();
    if values.len() != width * height {
        return Err(Error::Parse {
            path: "pgm".to_string(),
            detail: format!("expected {} values, got {}", width * height, values.len()),
        });
    }
    Ok((width, height, values))
}

/// A qualitative observation reported for human review, never asserted.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub name: String,
    pub observed: f64,
    pub reference: f64,
    pub expected: &'static str,
    pub matches_expectation: bool,
}

impl Diagnostic {
    pub fn render(&self) -> String {
        format!(
            "[DIAG] {}: observed {:.4} vs reference {:.4} (expected {}) -> {}",
            self.name,
            self.observed,
            self.reference,
            self.expected,
            if self.matches_expectation { "as expected" } else { "NOT as expected" }
        )
    }
}

/// Checks whether the image ratio at t = 0 exceeds its trajectory mean.
pub fn initial_image_diagnostic(series: &RelevanceTimeSeries) -> Option<Diagnostic> {
    let first = series.points.first()?.ratios.get("image").copied()?;
    let mean = series.points.iter().filter_map(|p| p.ratios.get("image")).sum::<f64>()
        / series.points.len() as f64;
    Some(Diagnostic {
        name: format!("{}: image ratio at t=0 vs trajectory mean", series.method.as_str()),
        observed: first,
        reference: mean,
        expected: "observed > reference",
        matches_expectation: first > mean,
    })
}

/// Checks whether the ratio profile jumps at the target-change step more
/// than it did over the steps just before the change.
pub fn target_change_diagnostic(series: &RelevanceTimeSeries) -> Option<Diagnostic> {
    let k = series.change_step?;
    if k == 0 || k + 1 > series.points.len() {
        return None;
    }
    let jump = |a: &TimePoint, b: &TimePoint| -> f64 {
        GROUP_COLUMNS
            .iter()
            .map(|g| {
                (b.ratios.get(*g).copied().unwrap_or(0.0) - a.ratios.get(*g).copied().unwrap_or(0.0))
                    .abs()
            })
            .sum()
    };
    let at_change = jump(&series.points[k - 1], &series.points[k]);
    // Local baseline: the typical step-to-step drift in the window leading
    // up to the change (the early transient would otherwise dominate).
    let window_start = k.saturating_sub(10).max(1);
    let mut baseline = Vec::new();
    for t in window_start..k {
        baseline.push(jump(&series.points[t - 1], &series.points[t]));
    }
    let reference = if baseline.is_empty() {
        0.0
    } else {
        baseline.iter().sum::<f64>() / baseline.len() as f64
    };
    Some(Diagnostic {
        name: format!("{}: ratio jump at the target change", series.method.as_str()),
        observed: at_change,
        reference,
        expected: "observed > reference",
        matches_expectation: at_change > reference,
    })
}
