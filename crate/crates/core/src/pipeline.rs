//! End-to-end commands over an output directory. Each command reads the
//! artifacts of earlier ones, writes its own and echoes the run config.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! config.json
//! data/manifest.json, data/images/*.png, data/annotations/*.xml
//! gan/<class>.pcbd (+ .json), gan/fidelity.json
//! train/detector.pcbd (+ .json), train/thresholds.json, train/curves.csv
//! eval/report.txt, eval/report.json
//! detect/<image id>.json
//! ```
//!
//! JSON artifacts carry a `stamp` object with the config hash and master
//! seed; `curves.csv` carries it as a leading `#` comment line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::data::augment::fit_canvas;
use crate::data::manifest::{read_sample, write_sample, Manifest, Split, MANIFEST_FILE};
use crate::data::synth::{blank_board, defect_patch_batch, place};
use crate::data::{split_dataset, synth_board, AnnotatedImage, BBox, ClassMap, DefectClass, ImageSource};
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::evaluate::{curves_csv, evaluate, render_from_json, report_json, report_table, EvalReport};
use crate::gan::{
    composite_defect, gan_fidelity_stats, gan_generator_forward, sample_latent, train_gan, FidelityStats, GanConfig,
    GanLosses, GanPair,
};
use crate::postprocess::{filter_detections, ThresholdSet};
use crate::tensor::Tensor;
use crate::train::{detect_images, ground_truth, train_detector, EpochLog};

/// Patches per class compared when measuring GAN fidelity.
pub const FIDELITY_BATCH: usize = 64;

pub const CONFIG_FILE: &str = "config.json";
pub const FIDELITY_FILE: &str = "fidelity.json";
pub const DETECTOR_FILE: &str = "detector.pcbd";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Resolved artifact locations for one run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub gan: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub detect: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        let root = cfg.out_dir.clone();
        Layout {
            data: cfg.data.dataset_dir.clone().unwrap_or_else(|| root.join("data")),
            gan: root.join("gan"),
            train: root.join("train"),
            eval: root.join("eval"),
            detect: root.join("detect"),
            root,
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join(MANIFEST_FILE)
    }

    pub fn gan_checkpoint(&self, class: DefectClass) -> PathBuf {
        self.gan.join(format!("{class}.pcbd"))
    }

    pub fn detector(&self) -> PathBuf {
        self.train.join(DETECTOR_FILE)
    }
}

/// Config hash and master seed written into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        Ok(Stamp {
            config_hash: cfg.hash()?,
            seed: cfg.seed,
        })
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }

    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON of `value` with a top-level `stamp` entry added.
fn stamped_json<T: Serialize>(value: &T, stamp: &Stamp) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("stamp".into(), serde_json::to_value(stamp)?);
        }
        None => return Err(Error::Contract("only JSON objects can be stamped".into())),
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn write_stamped<T: Serialize>(path: &Path, value: &T, stamp: &Stamp) -> Result<()> {
    write_text(path, &stamped_json(value, stamp)?)
}

/// Adds the stamp to a JSON file some other writer produced.
fn stamp_file(path: &Path, stamp: &Stamp) -> Result<()> {
    let v: serde_json::Value = serde_json::from_str(&read_text(path)?)?;
    write_stamped(path, &v, stamp)
}

/// Writes the exact config into the output root.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    mkdir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join(CONFIG_FILE), &(cfg.to_json()? + "\n"))
}

fn board_seed(cfg: &RunConfig, i: usize) -> u64 {
    cfg.component_seed("data").wrapping_add(i as u64)
}

/// Generates `data.boards` synthetic boards, splits them and writes the
/// dataset with its manifest.
pub fn synth_data(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    mkdir(&layout.data)?;
    let ids: Vec<usize> = (0..cfg.data.boards).collect();
    let (train, val) = split_dataset(&ids, cfg.data.val_fraction, cfg.component_seed("split"))?;
    let mut manifest = Manifest::default();
    for (split, ids) in [(Split::Train, train), (Split::Val, val)] {
        for i in ids {
            let img = synth_board(board_seed(cfg, i), &cfg.data.synth)?;
            manifest.entries.push(write_sample(&layout.data, &img, split)?);
        }
    }
    save_manifest(&layout, &manifest, &Stamp::of(cfg)?)?;
    echo_config(cfg)?;
    Ok(manifest)
}

fn save_manifest(layout: &Layout, manifest: &Manifest, stamp: &Stamp) -> Result<()> {
    write_stamped(&layout.manifest(), manifest, stamp)
}

pub fn load_manifest(layout: &Layout) -> Result<Manifest> {
    Manifest::load(&layout.manifest())
}

/// Loads one split, cropping or padding each image to `size`.
pub fn load_split(layout: &Layout, manifest: &Manifest, split: Split, size: u32) -> Result<Vec<AnnotatedImage>> {
    let classes = ClassMap::default();
    manifest
        .ids(split)
        .map(|e| read_sample(&layout.data, e, &classes).map(|img| fit_canvas(&img, size, size)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub stats: FidelityStats,
    pub passed: bool,
    pub steps: usize,
    pub final_losses: Option<GanLosses>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub gate: f64,
    pub classes: BTreeMap<DefectClass, FidelityRecord>,
}

/// The GAN config used for one class: the run's config with its seed
/// replaced by `component_seed(master, "gan.<class>")`.
pub fn gan_config_for(cfg: &RunConfig, class: DefectClass) -> GanConfig {
    GanConfig {
        seed: cfg.component_seed(&format!("gan.{class}")),
        ..cfg.gan.clone()
    }
}

/// Generates `n` patches as `[n, 3, S, S]`, in batches of the training
/// batch size so batch-norm statistics match training conditions.
pub fn generate_patches(pair: &GanPair, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = pair.config.patch_size;
    let per = 3 * s * s;
    let chunk = pair.config.batch;
    let mut data = Vec::with_capacity(n.div_ceil(chunk) * chunk * per);
    while data.len() < n * per {
        let z = sample_latent(chunk, pair.config.latent_dim, rng)?;
        data.extend_from_slice(gan_generator_forward(&z, pair)?.data());
    }
    data.truncate(n * per);
    Tensor::new(&[n, 3, s, s], data)
}

/// Fidelity of `pair` against a fresh batch of real patches of `class`.
pub fn measure_fidelity(pair: &GanPair, class: DefectClass, seed: u64) -> Result<FidelityStats> {
    let real = defect_patch_batch(class, FIDELITY_BATCH, pair.config.patch_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1DE);
    let fake = generate_patches(pair, FIDELITY_BATCH, &mut rng)?;
    gan_fidelity_stats(&real, &fake)
}

/// Trains one GAN per enabled class and records its fidelity.
pub fn train_gans(cfg: &RunConfig, mut on_class: impl FnMut(DefectClass, &FidelityRecord)) -> Result<FidelityReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    mkdir(&layout.gan)?;
    let stamp = Stamp::of(cfg)?;
    let mut report = FidelityReport {
        gate: cfg.gan.fidelity_gate,
        classes: BTreeMap::new(),
    };
    for class in cfg.data.synth.enabled_classes() {
        let gc = gan_config_for(cfg, class);
        let (pair, history) = train_gan(&gc, class)?;
        let stats = measure_fidelity(&pair, class, cfg.component_seed(&format!("fidelity.{class}")))?;
        let record = FidelityRecord {
            passed: stats.moment_distance <= gc.fidelity_gate,
            stats,
            steps: history.len(),
            final_losses: history.last().copied(),
        };
        let path = layout.gan_checkpoint(class);
        pair.save(&path)?;
        stamp_file(&path.with_extension("json"), &stamp)?;
        on_class(class, &record);
        report.classes.insert(class, record);
    }
    write_stamped(&layout.gan.join(FIDELITY_FILE), &report, &stamp)?;
    echo_config(cfg)?;
    Ok(report)
}

/// `count` blank boards, each with `gan_defects_min..=gan_defects_max`
/// generated defects drawn uniformly from `gans`.
pub fn composite_boards(
    gans: &[(DefectClass, GanPair)],
    data: &DataConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    if gans.is_empty() || count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Patch pools, one per GAN, large enough that no board runs dry.
    let need = count * data.gan_defects_max;
    let mut pools = Vec::with_capacity(gans.len());
    for (_, pair) in gans {
        pools.push((generate_patches(pair, need, &mut rng)?, 0usize));
    }
    let (w, h) = (data.synth.width, data.synth.height);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut board = blank_board(rng.random(), w, h)?;
        let k = rng.random_range(data.gan_defects_min..=data.gan_defects_max);
        for _ in 0..k {
            let g = rng.random_range(0..gans.len());
            let (class, pair) = &gans[g];
            let s = pair.config.patch_size;
            let taken: Vec<BBox> = board.boxes.iter().map(|l| l.bbox).collect();
            let Some(at) = place(w, h, s as u32, s as u32, &taken, &mut rng) else {
                continue;
            };
            let (pool, used) = &mut pools[g];
            let per = 3 * s * s;
            let patch = Tensor::new(&[3, s, s], pool.data()[*used * per..(*used + 1) * per].to_vec())?;
            *used += 1;
            board = composite_defect(&board, &patch, at, *class)?;
        }
        board.id = format!("gan_{i:05}");
        board.source = ImageSource::GanComposited;
        out.push(board);
    }
    Ok(out)
}

/// Composites boards with every GAN that passed the fidelity gate and
/// appends them to the training split. Returns how many were added.
pub fn augment(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let report: FidelityReport = serde_json::from_str(&read_text(&layout.gan.join(FIDELITY_FILE))?)?;
    let mut manifest = load_manifest(&layout)?;
    let mut gans = Vec::new();
    for (&class, rec) in &report.classes {
        if rec.passed {
            gans.push((class, GanPair::load(&layout.gan_checkpoint(class))?));
        }
    }
    let boards = composite_boards(&gans, &cfg.data, cfg.data.gan_boards, cfg.component_seed("augment"))?;
    manifest.entries.retain(|e| e.source != ImageSource::GanComposited);
    for b in &boards {
        manifest.entries.push(write_sample(&layout.data, b, Split::Train)?);
    }
    save_manifest(&layout, &manifest, &Stamp::of(cfg)?)?;
    echo_config(cfg)?;
    Ok(boards.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub seconds: f64,
}

/// Trains the detector on the manifest's train split and calibrates
/// thresholds on its val split. On divergence the last good weights and
/// the curves so far are still written before the error is returned.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let manifest = load_manifest(&layout)?;
    let size = cfg.train.detector.input_size as u32;
    let train_set = load_split(&layout, &manifest, Split::Train, size)?;
    let val_set = load_split(&layout, &manifest, Split::Val, size)?;
    let started = std::time::Instant::now();
    let outcome = train_detector(&train_set, &val_set, &cfg.train, cfg.component_seed("train"), on_epoch)?;
    let stamp = Stamp::of(cfg)?;
    mkdir(&layout.train)?;
    outcome.detector.save(&layout.detector())?;
    stamp_file(&Detector::sidecar_path(&layout.detector()), &stamp)?;
    if !outcome.curves.is_empty() {
        let csv = format!("{}\n{}", stamp.comment(), curves_csv(&outcome.curves)?);
        write_text(&layout.train.join(CURVES_FILE), &csv)?;
    }
    echo_config(cfg)?;
    if let Some(why) = outcome.diverged {
        return Err(Error::Divergence(why));
    }
    write_stamped(&layout.train.join(THRESHOLDS_FILE), &outcome.thresholds, &stamp)?;
    Ok(TrainSummary {
        epochs_completed: outcome.curves.iter().filter(|r| r.split == "train").count(),
        train_images: train_set.len(),
        val_images: val_set.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluates the trained detector on the val split and writes both report
/// forms.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let det = Detector::load(&layout.detector())?;
    let manifest = load_manifest(&layout)?;
    let val = load_split(&layout, &manifest, Split::Val, det.config.input_size as u32)?;
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let dets = detect_images(&det, &val, cfg.train.nms_iou)?;
    let mut report = evaluate(&dets, &ground_truth(&val))?;
    report.stamp = Stamp::of(cfg)?.as_map();
    write_report(&layout.eval, &report)?;
    echo_config(cfg)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    mkdir(dir)?;
    write_text(&dir.join(REPORT_JSON), &(report_json(report)? + "\n"))?;
    write_text(&dir.join(REPORT_TXT), &report_table(report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub id: String,
    pub detections: Vec<Detection>,
}

/// Thresholded detections for the val split, one JSON file per image.
pub fn detect(cfg: &RunConfig) -> Result<Vec<ImageDetections>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let det = Detector::load(&layout.detector())?;
    let thresholds = ThresholdSet::load(&layout.train.join(THRESHOLDS_FILE))?;
    let manifest = load_manifest(&layout)?;
    let images = load_split(&layout, &manifest, Split::Val, det.config.input_size as u32)?;
    let raw = detect_images(&det, &images, thresholds.nms_iou)?;
    let stamp = Stamp::of(cfg)?;
    mkdir(&layout.detect)?;
    let mut out = Vec::with_capacity(images.len());
    for (img, dets) in images.iter().zip(&raw) {
        let rec = ImageDetections {
            id: img.id.clone(),
            detections: filter_detections(dets, &thresholds),
        };
        write_stamped(&layout.detect.join(format!("{}.json", img.id)), &rec, &stamp)?;
        out.push(rec);
    }
    echo_config(cfg)?;
    Ok(out)
}

/// Re-renders `report.txt` from `report.json` and returns the table.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let table = render_from_json(&read_text(&layout.eval.join(REPORT_JSON))?)?;
    write_text(&layout.eval.join(REPORT_TXT), &table)?;
    Ok(table)
}
