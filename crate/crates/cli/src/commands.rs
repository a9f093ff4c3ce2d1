//! Subcommand implementations. Every command is deterministic given the
//! effective configuration and seed; run logs record both.

use std::fs;
use std::path::{Path, PathBuf};

use icnn_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use icnn_core::io::{self, Split};
use icnn_core::layers::ParamSet;
use icnn_core::net::{init_params, Icnn};
use icnn_core::pipeline::{
    self, assemble, calibrate_modulation, fine_label, gt_part_centers, localize, normalize_image,
    resize_labels_with, resize_to, ModulationParams, Part, PartCenter, PartNet, StageOne,
    StageTwo, PART_ORDER,
};
use icnn_core::synth::generate_synthetic;
use icnn_core::tensor::{LabelMap, Tensor3};
use icnn_core::train::{train_loop, TrainOutcome};
use icnn_core::{eval, Error, Result};

use crate::config::RunConfig;

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let summary = generate_synthetic(&cfg.synth_spec(), &cfg.data_dir)?;
    println!("manifest: {}", summary.manifest_path.display());
    println!("images: {}", summary.count);
    println!("checksum: {:08x}", summary.checksum);
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.model_dir.join(format!("{name}.ckpt"))
}

fn write_run_log(cfg: &RunConfig, name: &str, outcome: &TrainOutcome) -> Result<()> {
    let mut log = String::new();
    log.push_str(&format!("config_hash = {:08x}\n", cfg.hash()));
    log.push_str(&format!("seed = {}\n", cfg.seed));
    log.push_str(&format!("epochs_run = {}\n", outcome.epochs_run));
    let mut vals = outcome.val_losses.iter().peekable();
    for (epoch, loss) in outcome.train_losses.iter().enumerate() {
        let val = match vals.peek() {
            Some((e, v)) if *e == epoch => {
                let v = *v;
                vals.next();
                format!(" val_loss {v:.6}")
            }
            _ => String::new(),
        };
        log.push_str(&format!("epoch {epoch:03} train_loss {loss:.6}{val}\n"));
    }
    log.push_str("# effective configuration\n");
    for line in cfg.canonical().lines() {
        log.push_str(&format!("# {line}\n"));
    }
    fs::write(cfg.model_dir.join(format!("{name}.log")), log)?;
    Ok(())
}

/// Resize a full-resolution pair to the 64x64 stage-1 frame and normalize.
fn stage1_example(image: &Tensor3, labels: &LabelMap) -> Result<(Tensor3, LabelMap)> {
    let (resized, info) = resize_to(image, 64)?;
    let small_labels = resize_labels_with(labels, &info, 64);
    Ok((normalize_image(&resized), small_labels))
}

fn mean_gt_centers(pairs: &[(Tensor3, LabelMap)]) -> Result<[(f64, f64); 6]> {
    let mut sums = [(0.0, 0.0); 6];
    let mut counts = [0usize; 6];
    for (_, labels) in pairs {
        for (i, m) in gt_part_centers(labels).iter().enumerate() {
            if let Some((r, c)) = m {
                sums[i].0 += *r as f64;
                sums[i].1 += *c as f64;
                counts[i] += 1;
            }
        }
    }
    let mut out = [(0.0, 0.0); 6];
    for (i, part) in PART_ORDER.iter().enumerate() {
        out[i] = if counts[i] > 0 {
            (sums[i].0 / counts[i] as f64, sums[i].1 / counts[i] as f64)
        } else {
            part.descriptor().fallback_center
        };
    }
    Ok(out)
}

pub fn train_stage1(cfg: &RunConfig) -> Result<()> {
    let train_pairs = io::load_dataset(&cfg.manifest_path(), Split::Train)?;
    if train_pairs.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val_pairs = io::load_dataset(&cfg.manifest_path(), Split::Val)?;

    let fallback = mean_gt_centers(&train_pairs)?;
    let mut train_set = Vec::with_capacity(train_pairs.len());
    for (img, lbl) in &train_pairs {
        train_set.push(stage1_example(img, lbl)?);
    }
    drop(train_pairs);
    let mut val_set = Vec::with_capacity(val_pairs.len());
    for (img, lbl) in &val_pairs {
        val_set.push(stage1_example(img, lbl)?);
    }
    drop(val_pairs);

    let net = Icnn::new(cfg.net_config(9))?;
    let mut params = init_params(net.config(), cfg.seed)?;
    let outcome = train_loop(
        &net,
        &mut params,
        &train_set,
        if val_set.is_empty() { None } else { Some(&val_set) },
        &cfg.train_config(),
        &cfg.augment_spec(),
    )?;

    fs::create_dir_all(&cfg.model_dir)?;
    let meta = CheckpointMeta {
        epochs_trained: outcome.epochs_run as u64,
        seed: cfg.seed,
        modulation: None,
        fallback_centers: Some(fallback),
    };
    save_checkpoint(&checkpoint_path(cfg, "stage1"), net.config(), &params, &meta)?;
    write_run_log(cfg, "stage1", &outcome)?;
    println!(
        "stage1: {} epochs, final train loss {:.6}",
        outcome.epochs_run,
        outcome.train_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parts_of(net: PartNet) -> Vec<Part> {
    PART_ORDER.iter().copied().filter(|p| p.descriptor().network == net).collect()
}

fn load_stage1(cfg: &RunConfig) -> Result<StageOne> {
    let path = checkpoint_path(cfg, "stage1");
    if !path.exists() {
        return Err(Error::Config(format!("missing stage-1 checkpoint {}", path.display())));
    }
    let (net_cfg, params, meta) = load_checkpoint(&path)?;
    StageOne::new(Icnn::new(net_cfg)?, params, meta.fallback_centers)
}

fn load_part_model(cfg: &RunConfig, net: PartNet) -> Result<(Icnn, ParamSet, CheckpointMeta)> {
    let path = checkpoint_path(cfg, net.name());
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing {} checkpoint {}",
            net.name(),
            path.display()
        )));
    }
    let (net_cfg, params, meta) = load_checkpoint(&path)?;
    if net_cfg.num_labels != net.num_labels() {
        return Err(Error::Config(format!(
            "{} checkpoint has {} labels, expected {}",
            net.name(),
            net_cfg.num_labels,
            net.num_labels()
        )));
    }
    Ok((Icnn::new(net_cfg)?, params, meta))
}

fn load_stage2(cfg: &RunConfig) -> Result<StageTwo> {
    let mut models = Vec::with_capacity(4);
    for net in pipeline::PART_NETS {
        let (icnn, params, meta) = load_part_model(cfg, net)?;
        let modulation = meta
            .modulation
            .map(|(beta, beta0)| ModulationParams { beta, beta0 })
            .unwrap_or_default();
        models.push(pipeline::PartModel { net: icnn, params, modulation });
    }
    let mut it = models.into_iter();
    Ok(StageTwo {
        eyebrow: it.next().expect("four models"),
        eye: it.next().expect("four models"),
        nose: it.next().expect("four models"),
        mouth: it.next().expect("four models"),
    })
}

/// Patch centers for one image, either ground-truth medians or stage-1
/// predictions.
fn centers_for(
    cfg: &RunConfig,
    stage1: Option<&StageOne>,
    image: &Tensor3,
    truth: &LabelMap,
) -> Result<Vec<PartCenter>> {
    if cfg.centers_mode == "predicted" {
        let stage1 = stage1.ok_or_else(|| {
            Error::Config("centers_mode = predicted requires a stage-1 checkpoint".into())
        })?;
        localize(stage1, image)
    } else {
        Ok(gt_part_centers(truth)
            .iter()
            .zip(PART_ORDER)
            .map(|(m, part)| match m {
                Some((r, c)) => {
                    PartCenter { part, center: (*r as f64, *c as f64), fallback_used: false }
                }
                None => PartCenter {
                    part,
                    center: part.descriptor().fallback_center,
                    fallback_used: true,
                },
            })
            .collect())
    }
}

/// Build the patch dataset for one part network over a split. Left and
/// right instances of a shared network are merged (right ones flipped).
fn patch_dataset(
    cfg: &RunConfig,
    net: PartNet,
    split: Split,
    stage1: Option<&StageOne>,
) -> Result<Vec<(Tensor3, LabelMap)>> {
    let pairs = io::load_dataset(&cfg.manifest_path(), split)?;
    let mut out = Vec::new();
    for (image, truth) in &pairs {
        let centers = centers_for(cfg, stage1, image, truth)?;
        for part in parts_of(net) {
            let pc = centers[part.index()];
            out.push(pipeline::part_patch_example(image, truth, part, pc.center)?);
        }
    }
    Ok(out)
}

pub fn train_stage2(cfg: &RunConfig, net: PartNet) -> Result<()> {
    let stage1 = if cfg.centers_mode == "predicted" { Some(load_stage1(cfg)?) } else { None };
    let train_set = patch_dataset(cfg, net, Split::Train, stage1.as_ref())?;
    if train_set.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val_set = patch_dataset(cfg, net, Split::Val, stage1.as_ref())?;

    let icnn = Icnn::new(cfg.net_config(net.num_labels()))?;
    let mut params = init_params(icnn.config(), cfg.seed)?;
    let outcome = train_loop(
        &icnn,
        &mut params,
        &train_set,
        if val_set.is_empty() { None } else { Some(&val_set) },
        &cfg.train_config(),
        &cfg.augment_spec(),
    )?;

    fs::create_dir_all(&cfg.model_dir)?;
    let meta = CheckpointMeta {
        epochs_trained: outcome.epochs_run as u64,
        seed: cfg.seed,
        modulation: None,
        fallback_centers: None,
    };
    save_checkpoint(&checkpoint_path(cfg, net.name()), icnn.config(), &params, &meta)?;
    write_run_log(cfg, net.name(), &outcome)?;
    println!(
        "{}: {} patches, {} epochs, final train loss {:.6}",
        net.name(),
        train_set.len(),
        outcome.epochs_run,
        outcome.train_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, stage: u8, part: Option<&str>) -> Result<()> {
    match (stage, part) {
        (1, None) => train_stage1(cfg),
        (1, Some(_)) => Err(Error::Config("stage 1 takes no part network".into())),
        (2, Some(p)) => train_stage2(cfg, PartNet::parse(p)?),
        (2, None) => Err(Error::Config(
            "stage 2 requires --part (eyebrow | eye | nose | mouth)".into(),
        )),
        (s, _) => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    }
}

pub fn cmd_calibrate(cfg: &RunConfig, part: &str) -> Result<()> {
    let net = PartNet::parse(part)?;
    let stage1 = if cfg.centers_mode == "predicted" { Some(load_stage1(cfg)?) } else { None };
    let validation = patch_dataset(cfg, net, Split::Val, stage1.as_ref())?;
    if validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let (icnn, params, mut meta) = load_part_model(cfg, net)?;
    let result = calibrate_modulation(&icnn, &params, &validation)?;
    println!(
        "grid: {}x{} coarse + {}x{} refinement",
        result.coarse_grid.0, result.coarse_grid.1, result.refine_grid.0, result.refine_grid.1
    );
    println!("validation F before: {:.4}", result.f_before);
    println!(
        "validation F after:  {:.4} at beta {:.4}, beta0 {:.4}",
        result.f_after, result.modulation.beta, result.modulation.beta0
    );
    meta.modulation = Some((result.modulation.beta, result.modulation.beta0));
    save_checkpoint(&checkpoint_path(cfg, net.name()), icnn.config(), &params, &meta)?;
    Ok(())
}

/// Full two-stage prediction of one image.
pub fn predict_image(
    stage1: &StageOne,
    stage2: &StageTwo,
    image: &Tensor3,
) -> Result<LabelMap> {
    let centers = localize(stage1, image)?;
    let parts = fine_label(stage2, image, &centers)?;
    assemble(&parts, image.height(), image.width())
}

fn read_input_image(path: &Path) -> Result<Tensor3> {
    if path.extension().map(|e| e == "tns").unwrap_or(false) {
        return io::read_tensor(path);
    }
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor3::from_fn(h as usize, w as usize, 3, |r, c, ch| {
        img.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0
    }))
}

fn viz_color(class: u8) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let c = icnn_core::synth::class_color(class);
    [(c[0] * 255.0) as u8, (c[1] * 255.0) as u8, (c[2] * 255.0) as u8]
}

pub fn cmd_predict(cfg: &RunConfig, image_path: &Path, viz: bool) -> Result<()> {
    let stage1 = load_stage1(cfg)?;
    let stage2 = load_stage2(cfg)?;
    let image = read_input_image(image_path)?;
    let labels = predict_image(&stage1, &stage2, &image)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    let out_path = cfg.out_dir.join(format!("{stem}_labels.lbl"));
    io::write_labels(&out_path, &labels)?;
    println!("labels: {}", out_path.display());

    if viz {
        let mut png = image::RgbImage::new(labels.width() as u32, labels.height() as u32);
        for r in 0..labels.height() {
            for c in 0..labels.width() {
                png.put_pixel(c as u32, r as u32, image::Rgb(viz_color(labels.get(r, c))));
            }
        }
        let png_path = cfg.out_dir.join(format!("{stem}_labels.png"));
        png.save(&png_path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png write: {e}"))))?;
        println!("viz: {}", png_path.display());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, split: Split) -> Result<()> {
    let pairs = io::load_dataset(&cfg.manifest_path(), split)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("split '{}' is empty", split.name())));
    }
    let stage1 = load_stage1(cfg)?;
    let stage2 = load_stage2(cfg)?;

    let mut counts = eval::ConfusionCounts::new(pipeline::NUM_CLASSES as usize);
    for (image, truth) in &pairs {
        let pred = predict_image(&stage1, &stage2, image)?;
        counts.accumulate(&pred, truth)?;
    }
    let rows = eval::report(&counts)?;
    let text = eval::format_report(&rows);
    print!("{text}");

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(format!("report_{}.txt", split.name())), &text)?;
    fs::write(
        cfg.out_dir.join(format!("report_{}.tsv", split.name())),
        eval::format_report_tsv(&counts, &rows),
    )?;
    Ok(())
}

pub fn cmd_gradcheck(corrupt: bool) -> Result<bool> {
    let report = icnn_core::gradcheck::run_suite(corrupt)?;
    for case in &report.cases {
        println!(
            "{:<34} max rel error {:.3e}  {}",
            case.name,
            case.max_rel_error,
            if case.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("threshold: {:.0e}", icnn_core::gradcheck::THRESHOLD);
    Ok(report.all_passed)
}
