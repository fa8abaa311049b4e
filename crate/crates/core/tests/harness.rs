use std::fs;
use std::path::{Path, PathBuf};

use masterimg::detect::grayscale_sensitivity;
use masterimg::embedding::{load_backend, save_png, BackendDescriptor, ImageTensor, Preprocessing, PromptSet};
use masterimg::forge::{forge_image, uniform_noise, InitMode, OptimizerConfig};
use masterimg::harness::tables::{parse_density_data, parse_heatmap_data};
use masterimg::harness::{
    load_report, prepare, run_experiment, CalibrateSpec, DetectSpec, ExperimentConfig, ExperimentKind, GradcheckSpec,
    ReportBundle, SweepSpec,
};
use masterimg::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn noise_cfg(kind: ExperimentKind, out: &Path, iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        kind: Some(kind),
        prompts: vec!["a photo of a red fox".into(), "a photo of a teapot".into()],
        optimizer: OptimizerConfig {
            iterations,
            init_mode: InitMode::UniformNoise,
            seed: 3,
            ..OptimizerConfig::default()
        },
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

/// Every record id in the bundle names a stored record file or appears
/// inside one.
fn assert_traceable(dir: &Path, b: &ReportBundle) {
    let records: Vec<(String, String)> = fs::read_dir(dir.join("records"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_stem().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    let ids = b
        .scores
        .iter()
        .map(|r| &r.record_id)
        .chain(b.density.iter().map(|r| &r.record_id))
        .chain(b.heatmap.iter().map(|r| &r.record_id))
        .chain(b.sweep.iter().map(|r| &r.run_id))
        .chain(b.ablation.iter().map(|r| &r.record_id))
        .chain(b.verdicts.iter().map(|r| &r.record_id));
    for id in ids {
        let quoted = format!("\"{id}\"");
        assert!(
            records.iter().any(|(stem, body)| stem == id || body.contains(&quoted)),
            "record id {id} not found under {}",
            dir.display()
        );
    }
}

#[test]
fn zero_iterations_leave_scores_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(noise_cfg(ExperimentKind::Forge, tmp.path(), 0)).unwrap();
    assert_eq!(out.bundle.scores.len(), 2);
    for row in &out.bundle.scores {
        assert_eq!(row.before, row.after);
    }
    let name = out.dir.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("forge-3-"), "{name}");
    for sub in ["images", "records", "tables"] {
        assert!(out.dir.join(sub).is_dir());
    }
    assert!(out.dir.join("images/stage1.png").is_file());
    assert_traceable(&out.dir, &out.bundle);
}

#[test]
fn forge_run_writes_traceable_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = noise_cfg(ExperimentKind::Forge, tmp.path(), 50);
    cfg.random_stand_ins = true;
    let out = run_experiment(cfg).unwrap();
    assert_traceable(&out.dir, &out.bundle);
    assert!(out.bundle.master_check.is_some());

    let heat = parse_heatmap_data(&read(&out.dir, "tables/heatmap.csv")).unwrap();
    assert_eq!(heat.len(), 4);
    assert!(heat.iter().all(|r| r.method == "initial" || r.method == "stage1"));
    let density = parse_density_data(&read(&out.dir, "tables/density.csv")).unwrap();
    assert_eq!(density.len(), 2);
    assert_eq!(read(&out.dir, "tables/density_ids.csv").lines().count(), 2);

    let frozen = ExperimentConfig::from_file(&out.dir.join("config.json")).unwrap();
    assert_eq!(frozen.optimizer.iterations, 50);
    assert_eq!(load_report(&out.dir).unwrap(), out.bundle);
}

#[test]
fn gradcheck_kind_reports_small_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = noise_cfg(ExperimentKind::Gradcheck, tmp.path(), 0);
    cfg.gradcheck = GradcheckSpec { images: 5, eps: 1e-3 };
    let out = run_experiment(cfg).unwrap();
    let g = out.bundle.gradcheck.unwrap();
    assert_eq!(g.images, 5);
    assert!(g.max_rel_error <= 1e-3, "{}", g.max_rel_error);
}

#[test]
fn synthetic_calibration_reaches_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        kind: Some(ExperimentKind::Calibrate),
        calibrate: CalibrateSpec {
            synthetic_samples: Some(200),
            ..CalibrateSpec::default()
        },
        out: tmp.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(cfg).unwrap();
    let c = out.bundle.confusion.unwrap();
    assert!(c.accuracy >= 0.9, "{c:?}");
    assert_eq!(out.bundle.verdicts.len(), 200);
    assert!(out.dir.join("records/thresholds.json").is_file());
    assert_traceable(&out.dir, &out.bundle);
}

#[test]
fn invalid_config_lists_every_problem_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("not").join("yet");
    let cfg = ExperimentConfig {
        kind: Some(ExperimentKind::Forge),
        init_image: Some(tmp.path().join("missing.png")),
        optimizer: OptimizerConfig {
            learning_rate: -1.0,
            ..OptimizerConfig::default()
        },
        workers: 0,
        out: out.clone(),
        ..ExperimentConfig::default()
    };
    let Err(Error::Config(errs)) = run_experiment(cfg) else {
        panic!("expected a config error");
    };
    assert!(errs.len() >= 4, "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("workers")));
    assert!(errs.iter().any(|e| e.contains("prompts")));
    assert!(errs.iter().any(|e| e.contains("missing.png")));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn prepare_rejects_out_of_range_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = noise_cfg(ExperimentKind::Sweep, tmp.path(), 10);
    cfg.sweep = SweepSpec {
        lower: vec![0.5],
        upper: vec![1.5, 0.2],
    };
    let Err(Error::Config(errs)) = prepare(cfg) else {
        panic!("expected a config error");
    };
    assert_eq!(errs.len(), 2, "{errs:?}");
}

#[test]
fn sweep_tables_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = noise_cfg(ExperimentKind::Sweep, tmp.path(), 30);
    cfg.sweep = SweepSpec {
        lower: vec![-0.5, 0.0],
        upper: vec![0.5, 1.0],
    };
    cfg.workers = 1;
    let a = run_experiment(cfg.clone()).unwrap();
    cfg.workers = 4;
    let b = run_experiment(cfg).unwrap();
    assert_eq!(read(&a.dir, "tables/sweep.csv"), read(&b.dir, "tables/sweep.csv"));
    assert_eq!(a.bundle.sweep.len(), 4);
    assert_traceable(&a.dir, &a.bundle);
}

#[test]
fn ablation_run_covers_all_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(noise_cfg(ExperimentKind::Ablate, tmp.path(), 40)).unwrap();
    let arms: Vec<&str> = out.bundle.ablation.iter().map(|r| r.record_id.as_str()).collect();
    assert_eq!(arms, ["full", "no_pixel_guard", "no_variance", "alignment_only"]);
    assert!(read(&out.dir, "tables/ablation.csv").starts_with("record_id,align,var,pixel,total"));
    assert_traceable(&out.dir, &out.bundle);
}

fn write_pngs(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    (0..n)
        .map(|i| {
            let x = uniform_noise(8, 8, &Default::default(), seed + i as u64);
            let p = dir.join(format!("img-{seed}-{i:02}.png"));
            save_png(&p, &x, &Preprocessing::IDENTITY).unwrap();
            p
        })
        .collect()
}

#[test]
fn detect_emits_one_density_row_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let images = write_pngs(tmp.path(), 25, 100);
    let mut cfg = noise_cfg(ExperimentKind::Detect, &tmp.path().join("runs"), 0);
    cfg.detect = DetectSpec {
        images,
        thresholds: Some(masterimg::detect::DetectionThresholds::new(0.01, 0.1).unwrap()),
        thresholds_file: None,
    };
    cfg.workers = 3;
    let out = run_experiment(cfg).unwrap();
    let density = parse_density_data(&read(&out.dir, "tables/density.csv")).unwrap();
    assert_eq!(density.len(), 25);
    assert_eq!(out.bundle.verdicts.len(), 25);
    let verdict = read(&out.dir, "records/verdict-000.json");
    for key in ["\"d\"", "\"s\"", "\"ratio\"", "\"flagged\"", "\"deltas\""] {
        assert!(verdict.contains(key), "{verdict}");
    }
    assert_traceable(&out.dir, &out.bundle);
}

#[test]
fn manifest_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let tampered = write_pngs(tmp.path(), 4, 0);
    let original = write_pngs(tmp.path(), 4, 50);
    let mut manifest = String::from("image_path,label,prompt_set_id\n");
    for p in &tampered {
        manifest += &format!("{},tampered,set-a\n", p.file_name().unwrap().to_string_lossy());
    }
    for p in &original {
        manifest += &format!("{},original,set-a\n", p.file_name().unwrap().to_string_lossy());
    }
    fs::write(tmp.path().join("manifest.csv"), &manifest).unwrap();
    let mut cfg = noise_cfg(ExperimentKind::Calibrate, &tmp.path().join("runs"), 0);
    cfg.calibrate.manifest = Some(tmp.path().join("manifest.csv"));
    let out = run_experiment(cfg.clone()).unwrap();
    assert_eq!(out.bundle.confusion.unwrap().total(), 8);

    fs::write(tmp.path().join("manifest.csv"), manifest.replacen("set-a", "set-b", 1)).unwrap();
    let Err(Error::Config(errs)) = run_experiment(cfg) else {
        panic!("mixed prompt sets must be rejected");
    };
    assert!(errs.iter().any(|e| e.contains("prompt_set_id")), "{errs:?}");
}

#[test]
fn bundled_config_and_prompt_files_load() {
    let cfg = ExperimentConfig::from_file(&data("forge_artworks.json")).unwrap();
    let p = prepare(cfg).unwrap();
    assert_eq!(p.prompts.unwrap().len(), 10);
    let classes = PromptSet::parse(&fs::read_to_string(data("class_prompts.txt")).unwrap()).unwrap();
    assert_eq!(classes.len(), 25);
    let desc = BackendDescriptor::from_file(&data("toy_backend.json")).unwrap();
    assert_eq!(desc, BackendDescriptor::toy());
}

#[test]
fn forged_images_lose_more_under_grayscale() {
    let backend = load_backend(&BackendDescriptor::toy()).unwrap();
    let prompts = PromptSet::parse(&fs::read_to_string(data("class_prompts.txt")).unwrap()).unwrap();
    let cfg = OptimizerConfig {
        iterations: 300,
        ..OptimizerConfig::default()
    };
    let (mut original, mut gray) = (0.0, 0.0);
    for k in 0..5 {
        let set = PromptSet::new(prompts.iter().skip(3 * k).take(3)).unwrap();
        let init: ImageTensor = uniform_noise(8, 8, &cfg.bounds, k as u64);
        let (x, _) = forge_image(backend.as_ref(), &init, &set, &cfg).unwrap();
        let st = grayscale_sensitivity(backend.as_ref(), &x, &set).unwrap();
        original += st.s;
        gray += st.mean_gray();
    }
    assert!(gray < original, "gray {gray} vs original {original}");
}
