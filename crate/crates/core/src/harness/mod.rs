//! Experiment orchestration behind the CLI.
//!
//! A run goes through two phases. [`prepare`] loads and checks everything the
//! config refers to and reports every problem at once; nothing is written
//! until it succeeds. [`run_experiment`] then creates
//! `<out>/<kind>-<seed>-<timestamp>/` with `config.json`, `images/`,
//! `records/`, `tables/` and a `report.json` bundle.

pub mod cli;
mod config;
pub mod tables;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{CalibrateSpec, DetectSpec, ExperimentConfig, ExperimentKind, GradcheckSpec, SweepSpec};

use crate::detect::{
    self, calibrate, calibrate_thresholds, detect_stats, grayscale_sensitivity, score_images, synthetic_drop_set,
    Calibration, ConfusionMatrix, DetectionThresholds, Label, LabeledSample,
};
use crate::embedding::{
    load_backend, load_png, save_png, BackendDescriptor, EncoderBackend, ImageTensor, Preprocessing, PromptSet,
};
use crate::forge::{
    ablate, bound_sweep, check_master, forge_image, out_of_bounds_fraction, uniform_noise, InitMode, MasterCheckResult,
    RunRecord,
};
use crate::gradcheck::{self, GradCheckReport};
use crate::rng::{self, Stream};
use crate::{Error, Result};
use tables::{emit_density_data, emit_heatmap_data, emit_rows, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub record_id: String,
    pub prompt: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub record_id: String,
    pub original: f64,
    pub gray: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub record_id: String,
    pub prompt: String,
    pub method: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub record_id: String,
    pub align: f64,
    pub var: f64,
    pub pixel: f64,
    pub total: f64,
    pub mean_sim: f64,
    pub out_of_bounds_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub record_id: String,
    pub label: Option<Label>,
    pub d: f64,
    pub s: f64,
    pub ratio: Option<f64>,
    pub flagged: bool,
}

/// Every number a run produced, each row tagged with the record it came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub scores: Vec<ScoreRow>,
    pub density: Vec<DensityRow>,
    pub heatmap: Vec<HeatmapEntry>,
    pub sweep: Vec<SweepRow>,
    pub ablation: Vec<AblationRow>,
    pub verdicts: Vec<VerdictRow>,
    pub master_check: Option<MasterCheckResult>,
    pub thresholds: Option<DetectionThresholds>,
    pub confusion: Option<ConfusionMatrix>,
    pub gradcheck: Option<GradCheckReport>,
}

impl ReportBundle {
    /// Short human-readable digest for the terminal.
    pub fn summary(&self) -> String {
        let mut out = Vec::new();
        if let Some(kind) = self.kind {
            out.push(format!("kind: {}  seed: {}", kind.name(), self.seed));
        }
        let mut ids: Vec<&str> = self.scores.iter().map(|r| r.record_id.as_str()).collect();
        ids.dedup();
        for id in ids {
            let rows: Vec<_> = self.scores.iter().filter(|r| r.record_id == id).collect();
            let n = rows.len() as f64;
            let before = rows.iter().map(|r| r.before).sum::<f64>() / n;
            let after = rows.iter().map(|r| r.after).sum::<f64>() / n;
            out.push(format!("{id}: mean score {before:.4} -> {after:.4}"));
        }
        for r in &self.density {
            out.push(format!(
                "{}: score {:.4}, grayscale {:.4}",
                r.record_id, r.original, r.gray
            ));
        }
        if let Some(m) = &self.master_check {
            out.push(format!(
                "master check: {} (margins {:?})",
                if m.all_satisfied() {
                    "satisfied"
                } else {
                    "not satisfied"
                },
                m.margins
            ));
        }
        for r in &self.sweep {
            match r.mean_score {
                Some(s) => out.push(format!("[{:.3}, {:.3}] -> {s:.4}", r.lower, r.upper)),
                None => out.push(format!("[{:.3}, {:.3}] -> failed", r.lower, r.upper)),
            }
        }
        for r in &self.ablation {
            out.push(format!(
                "{:<15} align {:.4} var {:.5} pixel {:.5} mean sim {:.4}",
                r.record_id, r.align, r.var, r.pixel, r.mean_sim
            ));
        }
        let flagged = self.verdicts.iter().filter(|v| v.flagged).count();
        if !self.verdicts.is_empty() {
            out.push(format!("flagged {flagged} of {}", self.verdicts.len()));
        }
        if let Some(t) = &self.thresholds {
            out.push(format!("tau1 {} tau2 {}", t.tau1, t.tau2));
        }
        if let Some(c) = &self.confusion {
            out.push(format!(
                "tp {} fp {} tn {} fn {}  accuracy {:.4} precision {:.4} recall {:.4}",
                c.tp, c.fp, c.tn, c.fn_, c.accuracy, c.precision, c.recall
            ));
        }
        if let Some(g) = &self.gradcheck {
            out.push(format!(
                "gradcheck: {} images, max relative error {:e}",
                g.images, g.max_rel_error
            ));
        }
        out.join("\n")
    }
}

/// Everything a run needs, loaded and validated.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub kind: ExperimentKind,
    pub backend: Box<dyn EncoderBackend>,
    pub prompts: Option<PromptSet>,
    pub init: Option<ImageTensor>,
    pub stand_ins: Vec<ImageTensor>,
    pub detect_images: Vec<(String, ImageTensor)>,
    pub thresholds: Option<DetectionThresholds>,
    pub labeled: Vec<LabeledSample>,
}

fn collect<T>(errs: &mut Vec<String>, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(Error::Config(list)) => {
            errs.extend(list);
            None
        }
        Err(e) => {
            errs.push(e.to_string());
            None
        }
    }
}

fn check_writable(out: &Path, errs: &mut Vec<String>) {
    let mut probe = out;
    loop {
        if probe.exists() {
            match fs::metadata(probe) {
                Ok(m) if !m.is_dir() => errs.push(format!("output path {} is not a directory", probe.display())),
                Ok(m) if m.permissions().readonly() => {
                    errs.push(format!("output directory {} is read-only", probe.display()))
                }
                Ok(_) => {}
                Err(e) => errs.push(format!("output directory {}: {e}", probe.display())),
            }
            return;
        }
        match probe.parent() {
            Some(p) if !p.as_os_str().is_empty() => probe = p,
            _ => return,
        }
    }
}

/// Load and validate everything referenced by `config`, listing every
/// problem found. Performs no writes.
pub fn prepare(config: ExperimentConfig) -> Result<Prepared> {
    let mut errs = Vec::new();
    let kind = config.kind;
    if kind.is_none() {
        errs.push("experiment kind is not set".into());
    }
    if config.workers == 0 {
        errs.push("workers must be >= 1".into());
    }
    errs.extend(config.optimizer.validate());
    check_writable(&config.resolve(&config.out), &mut errs);

    let desc = match &config.backend {
        Some(p) => collect(&mut errs, BackendDescriptor::from_file(&config.resolve(p))),
        None => Some(BackendDescriptor::toy()),
    };
    let backend = desc.and_then(|d| collect(&mut errs, load_backend(&d)));

    let needs_prompts = !matches!(
        kind,
        Some(ExperimentKind::Calibrate) if config.calibrate.synthetic_samples.is_some()
    );
    let prompts = if needs_prompts {
        match (&config.prompt_file, config.prompts.is_empty()) {
            (Some(_), false) => {
                errs.push("give prompts inline or via prompt_file, not both".into());
                None
            }
            (Some(p), true) => {
                let path = config.resolve(p);
                match fs::read_to_string(&path) {
                    Ok(text) => collect(&mut errs, PromptSet::parse(&text)),
                    Err(e) => {
                        errs.push(format!("prompt file {}: {e}", path.display()));
                        None
                    }
                }
            }
            (None, false) => collect(&mut errs, PromptSet::new(&config.prompts)),
            (None, true) => {
                errs.push("no prompts given".into());
                None
            }
        }
    } else {
        None
    };

    let mut init = None;
    let mut stand_ins = Vec::new();
    let mut detect_images = Vec::new();
    let mut thresholds = None;
    let mut labeled = Vec::new();

    if let (Some(kind), Some(backend)) = (kind, backend.as_deref()) {
        let desc = backend.descriptor();
        let load = |errs: &mut Vec<String>, p: &Path| collect(errs, load_png(&config.resolve(p), desc));
        match kind {
            ExperimentKind::Forge | ExperimentKind::Sweep | ExperimentKind::Ablate => {
                init = match (config.optimizer.init_mode, &config.init_image) {
                    (InitMode::FromImage, Some(p)) => load(&mut errs, p),
                    (InitMode::FromImage, None) => {
                        errs.push("init_mode from_image needs init_image".into());
                        None
                    }
                    (InitMode::UniformNoise, Some(_)) => {
                        errs.push("init_image is set but init_mode is uniform_noise".into());
                        None
                    }
                    (InitMode::UniformNoise, None) => Some(uniform_noise(
                        desc.resolution,
                        desc.resolution,
                        &config.optimizer.bounds,
                        config.optimizer.seed,
                    )),
                };
            }
            _ => {}
        }
        match kind {
            ExperimentKind::Forge => {
                if !config.stand_ins.is_empty() && config.random_stand_ins {
                    errs.push("stand_ins and random_stand_ins are mutually exclusive".into());
                }
                stand_ins = config.stand_ins.iter().filter_map(|p| load(&mut errs, p)).collect();
                if let Some(p) = &prompts {
                    if !config.stand_ins.is_empty() && config.stand_ins.len() != p.len() {
                        errs.push(format!(
                            "{} stand-in images for {} prompts; need one per prompt",
                            config.stand_ins.len(),
                            p.len()
                        ));
                    }
                    if config.random_stand_ins {
                        let mut r = rng::stream(config.optimizer.seed, Stream::StandIns);
                        stand_ins = (0..p.len())
                            .map(|_| {
                                use rand::Rng;
                                let seed = r.random();
                                uniform_noise(desc.resolution, desc.resolution, &config.optimizer.bounds, seed)
                            })
                            .collect();
                    }
                }
            }
            ExperimentKind::Sweep => {
                let s = &config.sweep;
                if s.lower.is_empty() || s.upper.is_empty() {
                    errs.push("sweep needs non-empty lower and upper grids".into());
                }
                for &l in &s.lower {
                    if !(-1.0..=0.0).contains(&l) {
                        errs.push(format!("sweep lower value {l} outside [-1, 0]"));
                    }
                }
                for &u in &s.upper {
                    if !(0.0..=1.0).contains(&u) {
                        errs.push(format!("sweep upper value {u} outside [0, 1]"));
                    }
                }
            }
            ExperimentKind::Detect => {
                let d = &config.detect;
                if d.images.is_empty() {
                    errs.push("detect needs at least one image".into());
                }
                detect_images = d
                    .images
                    .iter()
                    .filter_map(|p| load(&mut errs, p).map(|img| (p.display().to_string(), img)))
                    .collect();
                thresholds = match (&d.thresholds, &d.thresholds_file) {
                    (Some(_), Some(_)) => {
                        errs.push("give thresholds inline or via thresholds_file, not both".into());
                        None
                    }
                    (Some(t), None) => Some(*t),
                    (None, Some(p)) => {
                        let path = config.resolve(p);
                        match fs::read_to_string(&path) {
                            Ok(text) => collect(&mut errs, serde_json::from_str(&text).map_err(Error::from)),
                            Err(e) => {
                                errs.push(format!("thresholds file {}: {e}", path.display()));
                                None
                            }
                        }
                    }
                    (None, None) => {
                        errs.push("detect needs thresholds or thresholds_file".into());
                        None
                    }
                };
                if let Some(t) = &thresholds {
                    errs.extend(t.validate());
                }
            }
            ExperimentKind::Calibrate => {
                let c = &config.calibrate;
                match (&c.manifest, c.synthetic_samples) {
                    (Some(_), Some(_)) => errs.push("give a manifest or synthetic_samples, not both".into()),
                    (None, None) => errs.push("calibrate needs a manifest or synthetic_samples".into()),
                    (None, Some(n)) => {
                        if n < 2 {
                            errs.push("synthetic_samples must be >= 2".into());
                        }
                        if !(c.sigma.is_finite() && c.sigma >= 0.0) {
                            errs.push(format!("sigma must be >= 0, got {}", c.sigma));
                        }
                    }
                    (Some(m), None) => {
                        labeled = load_manifest(&config.resolve(m), desc, &mut errs);
                        let has = |l: Label| labeled.iter().any(|s| s.label == l);
                        if !labeled.is_empty() && !(has(Label::Tampered) && has(Label::Original)) {
                            errs.push("manifest needs both tampered and original samples".into());
                        }
                    }
                }
            }
            ExperimentKind::Ablate => {}
            ExperimentKind::Gradcheck => {
                if config.gradcheck.images == 0 {
                    errs.push("gradcheck images must be >= 1".into());
                }
                if !(config.gradcheck.eps.is_finite() && config.gradcheck.eps > 0.0) {
                    errs.push(format!("gradcheck eps must be > 0, got {}", config.gradcheck.eps));
                }
            }
        }
    }

    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(Prepared {
        kind: kind.expect("checked"),
        backend: backend.expect("checked"),
        config,
        prompts,
        init,
        stand_ins,
        detect_images,
        thresholds,
        labeled,
    })
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_path: PathBuf,
    label: String,
    prompt_set_id: String,
}

fn load_manifest(path: &Path, desc: &BackendDescriptor, errs: &mut Vec<String>) -> Vec<LabeledSample> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = match csv::Reader::from_path(path) {
        Ok(r) => r,
        Err(e) => {
            errs.push(format!("manifest {}: {e}", path.display()));
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errs.push(format!("manifest row {}: {e}", i + 1));
                continue;
            }
        };
        let label = collect(errs, row.label.parse::<Label>());
        let img_path = base.join(&row.image_path);
        let image = collect(errs, load_png(&img_path, desc));
        if let (Some(label), Some(image)) = (label, image) {
            out.push(LabeledSample {
                id: row.image_path.display().to_string(),
                image,
                label,
                prompt_set_id: row.prompt_set_id,
            });
        }
    }
    if let Some(first) = out.first() {
        if out.iter().any(|s| s.prompt_set_id != first.prompt_set_id) {
            errs.push("manifest rows must share one prompt_set_id".into());
        }
    }
    if out.is_empty() && errs.is_empty() {
        errs.push(format!("manifest {} has no rows", path.display()));
    }
    out
}

/// Layout of one run directory.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(out: &Path, kind: ExperimentKind, seed: u64) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{seed}-{stamp}", kind.name());
        let mut root = out.join(&base);
        let mut n = 1;
        while root.exists() {
            root = out.join(format!("{base}-{n}"));
            n += 1;
        }
        for sub in ["images", "records", "tables"] {
            fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
        }
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.root.join(rel);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }

    fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_text(rel, &s)
    }

    fn write_png(&self, rel: &str, x: &ImageTensor, prep: &Preprocessing) -> Result<()> {
        save_png(&self.root.join(rel), x, prep)
    }
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub bundle: ReportBundle,
}

/// Validate, then execute one experiment and write its artifacts.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunOutput> {
    let prepared = prepare(config)?;
    let out = prepared.config.resolve(&prepared.config.out);
    let dir = RunDir::create(&out, prepared.kind, prepared.config.optimizer.seed)?;
    dir.write_json("config.json", &prepared.config.frozen())?;
    let mut bundle = ReportBundle {
        kind: Some(prepared.kind),
        seed: prepared.config.optimizer.seed,
        ..ReportBundle::default()
    };
    match prepared.kind {
        ExperimentKind::Forge => run_forge(&prepared, &dir, &mut bundle)?,
        ExperimentKind::Sweep => run_sweep(&prepared, &dir, &mut bundle)?,
        ExperimentKind::Ablate => run_ablate(&prepared, &dir, &mut bundle)?,
        ExperimentKind::Detect => run_detect(&prepared, &dir, &mut bundle)?,
        ExperimentKind::Calibrate => run_calibrate(&prepared, &dir, &mut bundle)?,
        ExperimentKind::Gradcheck => run_gradcheck(&prepared, &dir, &mut bundle)?,
    }
    write_tables(&dir, &bundle)?;
    dir.write_json("report.json", &bundle)?;
    Ok(RunOutput { dir: dir.root, bundle })
}

/// Load a run directory's `report.json`.
pub fn load_report(run_dir: &Path) -> Result<ReportBundle> {
    let p = run_dir.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_tables(dir: &RunDir, b: &ReportBundle) -> Result<()> {
    if !b.scores.is_empty() {
        dir.write_text("tables/scores.csv", &emit_rows(&b.scores)?)?;
    }
    if !b.density.is_empty() {
        let pairs: Vec<(f64, f64)> = b.density.iter().map(|r| (r.original, r.gray)).collect();
        dir.write_text("tables/density.csv", &emit_density_data(&pairs)?)?;
        let ids: Vec<_> = b.density.iter().map(|r| [r.record_id.as_str()]).collect();
        dir.write_text("tables/density_ids.csv", &emit_rows(&ids)?)?;
    }
    if !b.heatmap.is_empty() {
        let mut prompts: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        for e in &b.heatmap {
            if !prompts.contains(&e.prompt) {
                prompts.push(e.prompt.clone());
            }
            if !methods.contains(&e.method) {
                methods.push(e.method.clone());
            }
        }
        let matrix = prompts
            .iter()
            .map(|p| {
                methods
                    .iter()
                    .map(|m| {
                        b.heatmap
                            .iter()
                            .find(|e| &e.prompt == p && &e.method == m)
                            .map_or(f64::NAN, |e| e.score)
                    })
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>();
        dir.write_text("tables/heatmap.csv", &emit_heatmap_data(&prompts, &methods, &matrix)?)?;
    }
    if !b.sweep.is_empty() {
        dir.write_text("tables/sweep.csv", &emit_rows(&b.sweep)?)?;
    }
    if !b.ablation.is_empty() {
        dir.write_text("tables/ablation.csv", &emit_rows(&b.ablation)?)?;
    }
    if !b.verdicts.is_empty() {
        dir.write_text("tables/verdicts.csv", &emit_rows(&b.verdicts)?)?;
    }
    Ok(())
}

fn prompts_of(p: &Prepared) -> &PromptSet {
    p.prompts.as_ref().expect("kind requires prompts")
}

fn init_of(p: &Prepared) -> &ImageTensor {
    p.init.as_ref().expect("kind requires an init image")
}

fn push_scores(bundle: &mut ReportBundle, record: &RunRecord, prompts: &PromptSet, method: &str) {
    let first = record.first();
    let last = record.last();
    for (i, prompt) in prompts.iter().enumerate() {
        bundle.scores.push(ScoreRow {
            record_id: record.id.clone(),
            prompt: prompt.to_owned(),
            before: first.per_prompt_sims[i],
            after: last.per_prompt_sims[i],
        });
        bundle.heatmap.push(HeatmapEntry {
            record_id: record.id.clone(),
            prompt: prompt.to_owned(),
            method: method.to_owned(),
            score: last.per_prompt_sims[i],
        });
    }
}

/// Score `x` and its grayscale version; stored as `records/gray-<name>.json`.
fn push_density(bundle: &mut ReportBundle, p: &Prepared, dir: &RunDir, name: &str, x: &ImageTensor) -> Result<()> {
    let st = grayscale_sensitivity(p.backend.as_ref(), x, prompts_of(p))?;
    let record_id = format!("gray-{name}");
    dir.write_json(&format!("records/{record_id}.json"), &st)?;
    bundle.density.push(DensityRow {
        record_id,
        original: st.s,
        gray: st.mean_gray(),
    });
    Ok(())
}

fn run_forge(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let backend = p.backend.as_ref();
    let prep = backend.descriptor().preprocessing();
    let prompts = prompts_of(p);
    let init = init_of(p);
    let cfg = &p.config.optimizer;

    let (mut x, mut record) = forge_image(backend, init, prompts, cfg)?;
    record.id = "stage1".into();
    dir.write_png("images/init.png", init, &prep)?;
    dir.write_png("images/stage1.png", &x, &prep)?;
    dir.write_json("records/stage1.json", &record)?;

    // initial column of the heatmap comes from iteration 0 of stage one
    for (i, prompt) in prompts.iter().enumerate() {
        bundle.heatmap.push(HeatmapEntry {
            record_id: record.id.clone(),
            prompt: prompt.to_owned(),
            method: "initial".into(),
            score: record.first().per_prompt_sims[i],
        });
    }
    push_scores(bundle, &record, prompts, "stage1");
    push_density(bundle, p, dir, "init", init)?;
    push_density(bundle, p, dir, "stage1", &x)?;

    if p.config.extended_stage {
        let (x2, mut record2) = forge_image(backend, &x, prompts, &cfg.extended_stage())?;
        record2.id = "stage2".into();
        dir.write_png("images/stage2.png", &x2, &prep)?;
        dir.write_json("records/stage2.json", &record2)?;
        push_scores(bundle, &record2, prompts, "stage2");
        push_density(bundle, p, dir, "stage2", &x2)?;
        x = x2;
    }

    if !p.stand_ins.is_empty() {
        let pairs: Vec<(String, ImageTensor)> = prompts
            .iter()
            .map(str::to_owned)
            .zip(p.stand_ins.iter().cloned())
            .collect();
        for (i, (_, img)) in pairs.iter().enumerate() {
            dir.write_png(&format!("images/stand-in-{i:02}.png"), img, &prep)?;
        }
        let check = check_master(backend, &x, &pairs)?;
        dir.write_json("records/master_check.json", &check)?;
        bundle.master_check = Some(check);
    }
    Ok(())
}

fn run_sweep(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let backend = p.backend.as_ref();
    let prep = backend.descriptor().preprocessing();
    let cells = bound_sweep(
        backend,
        init_of(p),
        prompts_of(p),
        &p.config.optimizer,
        &p.config.sweep.lower,
        &p.config.sweep.upper,
        p.config.workers,
    )?;
    for cell in &cells {
        if let Some(rec) = &cell.record {
            dir.write_json(&format!("records/{}.json", cell.run_id), rec)?;
            dir.write_png(&format!("images/{}.png", cell.run_id), &rec.final_image, &prep)?;
        } else if let Some(err) = &cell.error {
            log::warn!("sweep cell {} failed: {err}", cell.run_id);
        }
    }
    dir.write_json("records/sweep.json", &cells)?;
    bundle.sweep = cells.iter().map(SweepRow::from).collect();
    Ok(())
}

fn run_ablate(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let backend = p.backend.as_ref();
    let prep = backend.descriptor().preprocessing();
    let prompts = prompts_of(p);
    let cfg = &p.config.optimizer;
    let abl = ablate(backend, init_of(p), prompts, cfg, p.config.workers)?;
    dir.write_png("images/init.png", init_of(p), &prep)?;
    for (arm, rec) in &abl.runs {
        dir.write_json(&format!("records/{}.json", arm.name()), rec)?;
        dir.write_png(&format!("images/{}.png", arm.name()), &rec.final_image, &prep)?;
        let last = rec.last();
        bundle.ablation.push(AblationRow {
            record_id: arm.name().into(),
            align: last.align,
            var: last.var,
            pixel: last.pixel,
            total: last.total,
            mean_sim: last.mean_sim(),
            out_of_bounds_fraction: out_of_bounds_fraction(&rec.final_image, &cfg.bounds),
        });
        push_scores(bundle, rec, prompts, arm.name());
        push_density(bundle, p, dir, arm.name(), &rec.final_image)?;
    }
    Ok(())
}

fn run_detect(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let backend = p.backend.as_ref();
    let thresholds = p.thresholds.expect("validated");
    let images: Vec<ImageTensor> = p.detect_images.iter().map(|(_, x)| x.clone()).collect();
    let stats = score_images(backend, &images, prompts_of(p), p.config.workers)?;
    for (i, ((name, _), st)) in p.detect_images.iter().zip(&stats).enumerate() {
        let id = format!("verdict-{i:03}");
        let v = detect_stats(st, &thresholds);
        dir.write_json(&format!("records/{id}.json"), &v)?;
        bundle.verdicts.push(VerdictRow {
            record_id: id.clone(),
            label: None,
            d: v.d,
            s: v.s,
            ratio: v.ratio,
            flagged: v.flagged,
        });
        bundle.density.push(DensityRow {
            record_id: id,
            original: st.s,
            gray: st.mean_gray(),
        });
        log::info!("{name}: d {:.4} s {:.4} flagged {}", v.d, v.s, v.flagged);
    }
    bundle.thresholds = Some(thresholds);
    Ok(())
}

fn run_calibrate(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let c = &p.config.calibrate;
    let cal: Calibration = match c.synthetic_samples {
        Some(n) => calibrate(&synthetic_drop_set(n, c.sigma, p.config.optimizer.seed))?,
        None => calibrate_thresholds(p.backend.as_ref(), &p.labeled, prompts_of(p), p.config.workers)?,
    };
    dir.write_json("records/thresholds.json", &cal.thresholds)?;
    dir.write_json("records/confusion.json", &cal.confusion)?;
    dir.write_json("records/calibration.json", &cal)?;
    for s in &cal.samples {
        let v = detect::detect(s.d, s.s, &cal.thresholds);
        bundle.verdicts.push(VerdictRow {
            record_id: s.id.clone(),
            label: Some(s.label),
            d: v.d,
            s: v.s,
            ratio: v.ratio,
            flagged: v.flagged,
        });
    }
    bundle.thresholds = Some(cal.thresholds);
    bundle.confusion = Some(cal.confusion);
    Ok(())
}

fn run_gradcheck(p: &Prepared, dir: &RunDir, bundle: &mut ReportBundle) -> Result<()> {
    let cfg = &p.config.optimizer;
    let report = gradcheck::run(
        p.backend.as_ref(),
        prompts_of(p),
        &cfg.bounds,
        &cfg.weights,
        p.config.gradcheck.images,
        p.config.gradcheck.eps,
        cfg.seed,
    )?;
    dir.write_json("records/gradcheck.json", &report)?;
    bundle.gradcheck = Some(report);
    Ok(())
}

pub(crate) fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
