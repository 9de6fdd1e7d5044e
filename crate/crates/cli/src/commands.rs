//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use dlo::dataset::{generate, Dataset};
use dlo::eval::evaluate;
use dlo::fusion::{fuse, FusionOutcome};
use dlo::heads::{gt_voting_field, vote};
use dlo::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use dlo::synth::{fps_sample, MIN_POINTS};
use dlo::train::{overfit, train, TrainOutputs};
use dlo::{NodeSequence, PointCloud};
use numkit::ParamStore;
use serde::Serialize;

use crate::config::RunConfig;
use crate::errors::Category;
use crate::nodes_io::{encode_nodes, read_cloud, read_nodes, read_visibility, visibility_text, xyz_text};

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(anyhow::anyhow!("{what} {} does not exist", path.display()).context(Category::Input));
    }
    Ok(())
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = cfg.data();
    let m = generate(&data, out, cfg.exec())?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    Ok(format!(
        "wrote {} train and {} validation frames ({} sequences, {} validation) to {}\nconfig hash {}",
        m.train_frames,
        m.val_frames,
        data.sequences,
        m.val_sequences.len(),
        out.display(),
        m.config_hash
    ))
}

fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    require(dir, "dataset")?;
    let ds = Dataset::open(dir, cfg.exec())?;
    if ds.manifest.config.nodes != cfg.nodes {
        return Err(anyhow::anyhow!(
            "dataset has {} nodes per frame but the config asks for {}",
            ds.manifest.config.nodes,
            cfg.nodes
        )
        .context(Category::Config));
    }
    Ok(ds)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: bool,
    /// Overfit this many training frames instead of a normal run.
    pub overfit: Option<usize>,
    pub steps: usize,
}

pub fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<String> {
    let ds = open_dataset(cfg, args.data)?;
    let model_cfg = cfg.model()?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(model_cfg.clone(), &mut store, cfg.init_seed)?;
    if let Some(n) = args.overfit {
        ensure!(n > 0 && n <= ds.train.len(), "overfit needs between 1 and {} frames", ds.train.len());
        let curve = overfit(&model, &mut store, &ds.train[..n], args.steps, cfg.learning_rate, cfg.exec())?;
        let mut log = String::new();
        for (step, (l, r, v)) in curve.iter().enumerate() {
            let _ = writeln!(log, "{{\"step\":{step},\"loss\":{l},\"loss_reg\":{r},\"loss_vot\":{v}}}");
        }
        write(&args.out.with_extension("overfit.jsonl"), log)?;
        let meta = CheckpointMeta {
            model: model_cfg,
            init_seed: cfg.init_seed,
            epoch: 0,
            adam_step: args.steps as u64,
            best_val_error: None,
            run: cfg.json(),
        };
        save_checkpoint(args.out, &store, None, &meta)?;
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        return Ok(format!(
            "overfit {n} frames, {} steps: loss {:.6} -> {:.6} ({:.2}% of initial), regression loss {:.3e} -> {:.3e}",
            args.steps,
            first.0,
            last.0,
            100.0 * last.0 / first.0,
            first.1,
            last.1
        ));
    }
    let outputs = TrainOutputs::new(args.out);
    let summary = train(
        &model,
        cfg.init_seed,
        store,
        &ds.train,
        &ds.val,
        &cfg.train(),
        &outputs,
        args.resume,
        cfg.json(),
        cfg.exec(),
    )?;
    let last = summary.history.last();
    Ok(format!(
        "trained {} epochs; best validation error {:.2} mm; last epoch: loss {:.5}, regression {:.2} mm, voting {:.2} mm\ncheckpoint {}, log {}",
        summary.epochs_run,
        summary.best_val_error * 1e3,
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.val_reg * 1e3),
        last.map_or(f64::NAN, |r| r.val_vot * 1e3),
        outputs.checkpoint.display(),
        outputs.log.display()
    ))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    /// Also run the threshold and noise sweeps.
    pub sweep: bool,
}

pub fn eval_cmd(cfg: &RunConfig, args: &EvalArgs) -> Result<String> {
    require(args.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(args.checkpoint)?;
    let ds = open_dataset(cfg, args.data)?;
    let mut ecfg = cfg.eval();
    if !args.sweep {
        ecfg.thresholds.clear();
        ecfg.noise_levels.clear();
    }
    let report = evaluate(&ck.model, &ck.store, &ds.val, &ecfg, cfg.exec())?;
    std::fs::create_dir_all(args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("records.jsonl"), report.jsonl()?)?;
    write(&args.out.join("table.csv"), report.table_csv())?;
    write(&args.out.join("summary.csv"), report.summary_csv())?;
    write(&args.out.join("summary.json"), to_json(&report.summaries))?;
    write(&args.out.join("config.toml"), cfg.to_toml())?;
    let mut s = format!(
        "evaluated {} validation frames ({} skipped as unusable) -> {}\n",
        ds.val.len().min(ecfg.max_frames.unwrap_or(usize::MAX)) - report.skipped,
        report.skipped,
        args.out.display()
    );
    s.push_str(&report.table_csv());
    Ok(s)
}

#[derive(Serialize)]
struct InferReport<'a> {
    mode: &'a str,
    points: usize,
    nodes: usize,
    visibility: &'a [f64],
    fusion: &'a dlo::fusion::FusionStatus,
    /// Indices into the regression sequence.
    selected: &'a [usize],
    voting_reversed: bool,
}

pub struct InferArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub cloud: &'a Path,
    pub out: &'a Path,
    /// Vote on the exact ground-truth field of a frame record instead of
    /// running the network.
    pub gt_replay: bool,
}

pub fn infer_cmd(cfg: &RunConfig, args: &InferArgs) -> Result<String> {
    require(args.cloud, "cloud file")?;
    let (cloud, frame) = read_cloud(args.cloud)?;
    if cloud.len() < MIN_POINTS {
        return Err(anyhow::anyhow!("cloud has {} points, at least {MIN_POINTS} required", cloud.len())
            .context(Category::Input));
    }
    let fusion_cfg = cfg.fusion();
    let (mode, reg, vot, visibility, points) = if args.gt_replay {
        let Some(frame) = frame else {
            return Err(anyhow::anyhow!("ground-truth replay needs a frame record with nodes").context(Category::Input));
        };
        let r = cfg.radius;
        let field = gt_voting_field(&frame.cloud.0, &frame.nodes.0, r)?;
        let k = cfg.top_k.min(frame.cloud.len());
        let v = vote(&frame.cloud.0, &field, r, k)?;
        ("gt-replay", v.nodes.clone(), v.nodes, v.visibility, frame.cloud.len())
    } else {
        let Some(ck) = args.checkpoint else {
            return Err(anyhow::anyhow!("--checkpoint is required unless --gt-replay is set").context(Category::Config));
        };
        require(ck, "checkpoint")?;
        let ck = load_checkpoint(ck)?;
        let n = ck.model.config.points();
        let cloud: PointCloud = fps_sample(&cloud, n, 0)?;
        let out = ck.model.infer(&ck.store, &cloud)?;
        ("network", out.reg, out.vot, out.visibility, n)
    };
    let fused: FusionOutcome = fuse(&reg, &vot, &visibility, &fusion_cfg)?;
    std::fs::create_dir_all(args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let source = format!("source={}", args.cloud.display());
    let save = |name: &str, nodes: &NodeSequence| -> Result<()> {
        write(&args.out.join(format!("{name}.nodes")), encode_nodes(nodes))?;
        let header = [format!("method={name} nodes={} mode={mode}", nodes.len()), source.clone()];
        write(&args.out.join(format!("{name}.xyz")), xyz_text(&nodes.0, &header))
    };
    save("regression", &reg)?;
    save("voting", &vot)?;
    save("fusion", &fused.nodes)?;
    write(
        &args.out.join("visibility.txt"),
        visibility_text(&visibility, &[format!("per-node visibility (max heat), nodes={}", visibility.len()), source.clone()]),
    )?;
    let report = InferReport {
        mode,
        points,
        nodes: fused.nodes.len(),
        visibility: &visibility,
        fusion: &fused.status,
        selected: &fused.selected,
        voting_reversed: fused.voting_reversed,
    };
    write(&args.out.join("infer.json"), to_json(&report))?;
    Ok(format!(
        "{mode}: {} nodes, {} selected for fusion ({}) -> {}",
        fused.nodes.len(),
        fused.selected.len(),
        if fused.is_fallback() { "fell back to regression" } else { "fused" },
        args.out.display()
    ))
}

pub struct FuseArgs<'a> {
    pub reg: &'a Path,
    pub vot: &'a Path,
    pub visibility: &'a Path,
    pub out: &'a Path,
}

pub fn fuse_cmd(cfg: &RunConfig, args: &FuseArgs) -> Result<String> {
    for (p, what) in [(args.reg, "regression nodes"), (args.vot, "voting nodes"), (args.visibility, "visibility")] {
        require(p, what)?;
    }
    let reg = read_nodes(args.reg).context(Category::Format)?;
    let vot = read_nodes(args.vot).context(Category::Format)?;
    let vis = read_visibility(args.visibility).context(Category::Format)?;
    let out = fuse(&reg, &vot, &vis, &cfg.fusion())?;
    write(args.out, encode_nodes(&out.nodes))?;
    let status = serde_json::to_string(&out.status).expect("serializable");
    write(
        &args.out.with_extension("xyz"),
        xyz_text(&out.nodes.0, &[format!("method=fusion nodes={}", out.nodes.len()), format!("status={status}")]),
    )?;
    Ok(format!("{} nodes, {} selected, {status} -> {}", out.nodes.len(), out.selected.len(), args.out.display()))
}

pub struct GradcheckOutcome {
    pub text: String,
    pub passed: bool,
}

/// Every numkit layer plus the composed toy network. `corrupt` names one
/// check whose analytic gradient gets perturbed.
pub fn gradcheck_cmd(seed: u64, corrupt: Option<&str>) -> Result<GradcheckOutcome> {
    if let Some(c) = corrupt {
        if c != "network" && !numkit::gradcheck::LAYER_NAMES.contains(&c) {
            return Err(anyhow::anyhow!(
                "unknown check `{c}`; expected `network` or one of {}",
                numkit::gradcheck::LAYER_NAMES.join(", ")
            )
            .context(Category::Config));
        }
    }
    let mut reports = numkit::gradcheck::layer_suite(seed, corrupt)?;
    reports.push(dlo::check::composed_network(seed, corrupt == Some("network"))?);
    let mut text = format!("{:<20} {:>8} {:>8} {:>12}  result\n", "check", "coords", "refined", "max rel err");
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max_rel_error);
        let _ = writeln!(
            text,
            "{:<20} {:>8} {:>8} {:>12.3e}  {}",
            r.name,
            r.checked,
            r.refined,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let passed = failed.is_empty();
    if passed {
        let _ = write!(text, "all {} checks passed, max relative error {worst:.3e}", reports.len());
    } else {
        let _ = write!(text, "FAILED: {}", failed.join(", "));
    }
    Ok(GradcheckOutcome { text, passed })
}

pub fn check_failed(names: &str) -> anyhow::Error {
    anyhow::anyhow!("gradient check failed: {names}").context(Category::Check)
}
