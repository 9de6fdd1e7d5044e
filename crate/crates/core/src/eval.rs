//! Node error and uniformity metrics, and the evaluation sweeps over
//! occlusion ratio, fusion threshold and jitter.

use std::fmt::Write as _;

use numkit::ParamStore;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{DloError, Result};
use crate::fusion::{fuse, FusionConfig, FusionStatus};
use crate::geometry::NodeSequence;
use crate::model::{BranchOutputs, Model};
use crate::par::Exec;
use crate::sample::{item_rng, prepare_input, PreparedInput};
use crate::synth::AugmentConfig;

/// Mean Euclidean node errors, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeErrors {
    pub all: f64,
    /// Absent when every node is occluded.
    pub unoccluded: Option<f64>,
    /// Absent when no node is occluded.
    pub occluded: Option<f64>,
    /// The prediction matched the ground truth in reversed order.
    pub reversed: bool,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Errors against whichever ground-truth order (forward or reversed) fits
/// `pred` better over all nodes. `mask[j]` marks node j of `gt` occluded.
pub fn node_error(pred: &NodeSequence, gt: &NodeSequence, mask: &[bool]) -> Result<NodeErrors> {
    let m = gt.len();
    if pred.len() != m || mask.len() != m || m == 0 {
        return Err(DloError::Invalid(format!(
            "node error needs equal non-empty sizes: {} predicted, {m} ground truth, {} mask",
            pred.len(),
            mask.len()
        )));
    }
    let dists = |rev: bool| -> Vec<f64> {
        (0..m)
            .map(|j| {
                let p = if rev { pred.0[m - 1 - j] } else { pred.0[j] };
                (p - gt.0[j]).norm()
            })
            .collect()
    };
    let fwd = dists(false);
    let rev = dists(true);
    let (fa, ra) = (mean(fwd.iter().copied()).unwrap(), mean(rev.iter().copied()).unwrap());
    let (d, reversed) = if ra < fa { (rev, true) } else { (fwd, false) };
    let pick = |occ: bool| mean(d.iter().zip(mask).filter(|(_, &o)| o == occ).map(|(x, _)| *x));
    Ok(NodeErrors {
        all: fa.min(ra),
        unoccluded: pick(false),
        occluded: pick(true),
        reversed,
    })
}

/// Population standard deviation of the adjacent node distances.
pub fn uniformity(nodes: &NodeSequence) -> Result<f64> {
    if nodes.len() < 3 {
        return Err(DloError::Invalid(format!("uniformity needs at least 3 nodes, got {}", nodes.len())));
    }
    let s = nodes.spacings();
    let n = s.len() as f64;
    let mu = s.iter().sum::<f64>() / n;
    Ok((s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Regression,
    Voting,
    Fusion,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Regression, Method::Voting, Method::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Method::Regression => "regression",
            Method::Voting => "voting",
            Method::Fusion => "fusion",
        }
    }
}

/// One method on one frame under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub sweep: String,
    pub sequence: usize,
    pub frame: usize,
    pub occlusion_ratio: f64,
    pub jitter: f64,
    pub threshold: f64,
    pub method: Method,
    pub errors: NodeErrors,
    pub uniformity: f64,
    pub occluded_nodes: usize,
    /// Fusion only: whether the fit ran or fell back to regression.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionStatus>,
}

/// Mean metrics of one method under one condition. Each mean runs over
/// the frames where the per-frame value exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sweep: String,
    pub occlusion_ratio: f64,
    pub jitter: f64,
    pub threshold: f64,
    pub method: Method,
    pub frames: usize,
    pub all: f64,
    pub unoccluded: Option<f64>,
    pub occluded: Option<f64>,
    pub uniformity: f64,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    /// Occlusion ratios of the main table.
    pub ratios: Vec<f64>,
    /// Ratio at which fusion thresholds are swept.
    pub threshold_ratio: f64,
    pub thresholds: Vec<f64>,
    /// Ratio at which jitter levels are swept.
    pub noise_ratio: f64,
    /// Jitter standard deviations, meters.
    pub noise_levels: Vec<f64>,
    pub fusion: FusionConfig,
    /// Evaluate only the first this many validation frames.
    pub max_frames: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratios: vec![0.0, 0.1, 0.2, 0.4],
            threshold_ratio: 0.2,
            thresholds: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            noise_ratio: 0.0,
            noise_levels: vec![0.0, 0.001, 0.002, 0.004],
            fusion: FusionConfig::default(),
            max_frames: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        let ratio_ok = |r: &f64| (0.0..=0.8).contains(r);
        if !self.ratios.iter().all(ratio_ok) || !ratio_ok(&self.threshold_ratio) || !ratio_ok(&self.noise_ratio) {
            return Err(DloError::Config("occlusion ratios must lie in [0, 0.8]".into()));
        }
        if !self.thresholds.iter().all(|t| (0.0..=1.0).contains(t)) {
            return Err(DloError::Config("fusion thresholds must lie in [0, 1]".into()));
        }
        if !self.noise_levels.iter().all(|s| *s >= 0.0) {
            return Err(DloError::Config("jitter levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// One inference under one condition, shared by every fusion threshold.
struct Run {
    input: PreparedInput,
    out: BranchOutputs,
}

fn condition_rng(seed: u64, tag: u64, condition: usize, frame: &Frame) -> rand_chacha::ChaCha8Rng {
    item_rng(seed ^ frame.meta.seed, tag * 1000 + condition as u64, frame.meta.sequence as u64 * 10_000 + frame.meta.frame as u64)
}

fn run_condition(model: &Model, store: &ParamStore<f32>, frame: &Frame, aug: &AugmentConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Run> {
    let cfg = &model.config;
    let input = prepare_input(frame, aug, cfg.points(), cfg.radius, rng)?;
    let out = model.infer(store, &input.cloud)?;
    Ok(Run { input, out })
}

fn results_for(run: &Run, frame: &Frame, sweep: &str, aug: &AugmentConfig, fusion: &FusionConfig, methods: &[Method]) -> Result<Vec<FrameResult>> {
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let (nodes, status) = match method {
            Method::Regression => (run.out.reg.clone(), None),
            Method::Voting => (run.out.vot.clone(), None),
            Method::Fusion => {
                let f = fuse(&run.out.reg, &run.out.vot, &run.out.visibility, fusion)?;
                (f.nodes, Some(f.status))
            }
        };
        out.push(FrameResult {
            sweep: sweep.to_string(),
            sequence: frame.meta.sequence,
            frame: frame.meta.frame,
            occlusion_ratio: aug.occlusion_ratio,
            jitter: aug.jitter,
            threshold: fusion.threshold,
            method,
            errors: node_error(&nodes, &run.input.nodes, &run.input.mask)?,
            uniformity: uniformity(&nodes)?,
            occluded_nodes: run.input.occluded(),
            fusion: status,
        });
    }
    Ok(out)
}

/// Every record of one frame, in a fixed order: the occlusion table, the
/// threshold sweep, then the noise sweep.
fn evaluate_frame(model: &Model, store: &ParamStore<f32>, frame: &Frame, cfg: &EvalConfig) -> Result<Vec<FrameResult>> {
    let mut out = Vec::new();
    for (c, &ratio) in cfg.ratios.iter().enumerate() {
        let aug = AugmentConfig { jitter: 0.0, rotation: false, occlusion_ratio: ratio };
        let run = run_condition(model, store, frame, &aug, &mut condition_rng(cfg.seed, 1, c, frame))?;
        out.extend(results_for(&run, frame, "occlusion", &aug, &cfg.fusion, &Method::ALL)?);
    }
    if !cfg.thresholds.is_empty() {
        let aug = AugmentConfig { jitter: 0.0, rotation: false, occlusion_ratio: cfg.threshold_ratio };
        let run = run_condition(model, store, frame, &aug, &mut condition_rng(cfg.seed, 2, 0, frame))?;
        for &t in &cfg.thresholds {
            let fusion = FusionConfig { threshold: t, ..cfg.fusion.clone() };
            out.extend(results_for(&run, frame, "threshold", &aug, &fusion, &[Method::Fusion])?);
        }
    }
    for &sigma in &cfg.noise_levels {
        let aug = AugmentConfig { jitter: sigma, rotation: false, occlusion_ratio: cfg.noise_ratio };
        // same occlusion draw at every noise level, only the jitter differs
        let mut rng = condition_rng(cfg.seed, 3, 0, frame);
        let run = run_condition(model, store, frame, &aug, &mut rng)?;
        out.extend(results_for(&run, frame, "noise", &aug, &cfg.fusion, &Method::ALL)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<FrameResult>,
    pub summaries: Vec<Summary>,
    /// Frames skipped because an occlusion left too few points.
    pub skipped: usize,
}

/// Evaluates `frames` (normally the validation split). Frames that an
/// occlusion condition would leave unusable are skipped as a whole so every
/// condition averages over the same frames.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, frames: &[Frame], cfg: &EvalConfig, exec: Exec) -> Result<EvalReport> {
    cfg.validate()?;
    let frames = &frames[..cfg.max_frames.unwrap_or(frames.len()).min(frames.len())];
    let per_frame = exec.map(frames, |f| match evaluate_frame(model, store, f, cfg) {
        Err(DloError::Unusable(_)) => Ok(None),
        other => other.map(Some),
    });
    let mut records = Vec::new();
    let mut skipped = 0;
    for r in per_frame {
        match r? {
            Some(v) => records.extend(v),
            None => skipped += 1,
        }
    }
    let summaries = summarize(&records);
    Ok(EvalReport { records, summaries, skipped })
}

/// Groups records by (sweep, condition, method) in first-seen order.
pub fn summarize(records: &[FrameResult]) -> Vec<Summary> {
    let key = |r: &FrameResult| (r.sweep.clone(), r.occlusion_ratio.to_bits(), r.jitter.to_bits(), r.threshold.to_bits(), r.method);
    let mut keys = Vec::new();
    for r in records {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&FrameResult> = records.iter().filter(|r| key(r) == k).collect();
            let first = group[0];
            Summary {
                sweep: first.sweep.clone(),
                occlusion_ratio: first.occlusion_ratio,
                jitter: first.jitter,
                threshold: first.threshold,
                method: first.method,
                frames: group.len(),
                all: mean(group.iter().map(|r| r.errors.all)).unwrap_or(0.0),
                unoccluded: mean(group.iter().filter_map(|r| r.errors.unoccluded)),
                occluded: mean(group.iter().filter_map(|r| r.errors.occluded)),
                uniformity: mean(group.iter().map(|r| r.uniformity)).unwrap_or(0.0),
                fallbacks: group.iter().filter(|r| matches!(r.fusion, Some(FusionStatus::Fallback { .. }))).count(),
            }
        })
        .collect()
}

impl EvalReport {
    pub fn find(&self, sweep: &str, method: Method, pick: impl Fn(&Summary) -> bool) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.sweep == sweep && s.method == method && pick(s))
    }

    /// Per-frame records as JSON lines.
    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).map_err(|e| DloError::Format(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }

    /// The occlusion sweep as a wide table: one row per
    /// method, four columns (all, unoccluded, occluded, uniformity) per
    /// ratio, millimeters, empty cells where a value does not exist.
    pub fn table_csv(&self) -> String {
        let ratios: Vec<f64> = {
            let mut v: Vec<f64> = Vec::new();
            for s in self.summaries.iter().filter(|s| s.sweep == "occlusion") {
                if !v.contains(&s.occlusion_ratio) {
                    v.push(s.occlusion_ratio);
                }
            }
            v
        };
        let mut out = String::from("method");
        for r in &ratios {
            let p = (r * 100.0).round();
            let _ = write!(out, ",occ{p}_all_mm,occ{p}_unoccluded_mm,occ{p}_occluded_mm,occ{p}_uniformity_mm");
        }
        out.push('\n');
        let mm = |v: Option<f64>| v.map(|x| format!("{:.3}", x * 1000.0)).unwrap_or_default();
        for m in Method::ALL {
            out.push_str(m.name());
            for r in &ratios {
                match self.find("occlusion", m, |s| s.occlusion_ratio == *r) {
                    Some(s) => {
                        let _ = write!(out, ",{},{},{},{}", mm(Some(s.all)), mm(s.unoccluded), mm(s.occluded), mm(Some(s.uniformity)));
                    }
                    None => out.push_str(",,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Every summary as one CSV row, for plotting.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sweep,method,occlusion_ratio,jitter_m,threshold,frames,all_m,unoccluded_m,occluded_m,uniformity_m,fallbacks\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.9},{},{},{:.9},{}",
                s.sweep,
                s.method.name(),
                s.occlusion_ratio,
                s.jitter,
                s.threshold,
                s.frames,
                s.all,
                opt(s.unoccluded),
                opt(s.occluded),
                s.uniformity,
                s.fallbacks
            );
        }
        out
    }
}
