//! Study discovery, patient-disjoint splitting, and the synthetic corpus
//! generator.
//!
//! On-disk layout: `<root>/XR_<ANATOMY>/patient<id>/study<k>_<positive|negative>/image<j>.png`.
//! Labels attach at the study level; a study's views always travel together.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// The seven upper-extremity anatomy categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Anatomy {
    Elbow,
    Finger,
    Forearm,
    Hand,
    Humerus,
    Shoulder,
    Wrist,
}

pub const ALL_ANATOMIES: [Anatomy; 7] = [
    Anatomy::Elbow,
    Anatomy::Finger,
    Anatomy::Forearm,
    Anatomy::Hand,
    Anatomy::Humerus,
    Anatomy::Shoulder,
    Anatomy::Wrist,
];

impl Anatomy {
    /// Directory name under the corpus root, e.g. `XR_ELBOW`.
    pub fn dir_name(&self) -> String {
        format!("XR_{}", self.to_string().to_uppercase())
    }
}

impl fmt::Display for Anatomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Anatomy::Elbow => "elbow",
            Anatomy::Finger => "finger",
            Anatomy::Forearm => "forearm",
            Anatomy::Hand => "hand",
            Anatomy::Humerus => "humerus",
            Anatomy::Shoulder => "shoulder",
            Anatomy::Wrist => "wrist",
        };
        f.write_str(s)
    }
}

impl FromStr for Anatomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elbow" => Ok(Anatomy::Elbow),
            "finger" => Ok(Anatomy::Finger),
            "forearm" => Ok(Anatomy::Forearm),
            "hand" => Ok(Anatomy::Hand),
            "humerus" => Ok(Anatomy::Humerus),
            "shoulder" => Ok(Anatomy::Shoulder),
            "wrist" => Ok(Anatomy::Wrist),
            other => Err(Error::Data(format!("unknown anatomy '{other}'"))),
        }
    }
}

/// One radiographic study: a patient, an anatomy, a study-level label, and
/// one or more view images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyRecord {
    pub patient_id: String,
    pub anatomy: Anatomy,
    pub study_id: String,
    pub label: u8,
    pub view_paths: Vec<PathBuf>,
}

/// Scan result: parsed records plus a count of skipped entries.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub records: Vec<StudyRecord>,
    pub skipped: usize,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Walks the `XR_*/patient*/study*_{positive,negative}` tree and builds one
/// record per study. Unparsable or empty entries are skipped with a warning
/// on stderr; views are sorted lexicographically.
pub fn scan_layout(root: &Path) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} is not a directory", root.display()),
        )));
    }
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for anatomy_dir in sorted_dirs(root)? {
        let dname = file_name(&anatomy_dir);
        let Some(tag) = dname.strip_prefix("XR_") else {
            continue; // unrelated directory, not part of the layout
        };
        let anatomy = match Anatomy::from_str(tag) {
            Ok(a) => a,
            Err(_) => {
                eprintln!("warning: skipping unknown anatomy directory {dname}");
                skipped += 1;
                continue;
            }
        };
        for patient_dir in sorted_dirs(&anatomy_dir)? {
            let patient_id = file_name(&patient_dir);
            for study_dir in sorted_dirs(&patient_dir)? {
                let sname = file_name(&study_dir);
                let (stem, label) = if let Some(stem) = sname.strip_suffix("_positive") {
                    (stem, 1u8)
                } else if let Some(stem) = sname.strip_suffix("_negative") {
                    (stem, 0u8)
                } else {
                    eprintln!("warning: skipping unparsable study directory {sname}");
                    skipped += 1;
                    continue;
                };
                let mut views = Vec::new();
                for entry in fs::read_dir(&study_dir)? {
                    let path = entry?.path();
                    if path.extension().and_then(|e| e.to_str()) == Some("png") {
                        views.push(path);
                    }
                }
                views.sort();
                if views.is_empty() {
                    eprintln!("warning: skipping empty study directory {sname}");
                    skipped += 1;
                    continue;
                }
                records.push(StudyRecord {
                    patient_id: patient_id.clone(),
                    anatomy,
                    study_id: format!("{dname}/{stem}"),
                    label,
                    view_paths: views,
                });
            }
        }
    }
    Ok(ScanOutcome { records, skipped })
}

/// Split fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.val, self.test] {
            if !(0.0..1.0).contains(&f) || f == 0.0 {
                return Err(Error::Parameter(format!(
                    "split fraction {f} outside (0, 1)"
                )));
            }
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<StudyRecord>,
    pub val: Vec<StudyRecord>,
    pub test: Vec<StudyRecord>,
}

/// Shuffles patients with the seeded stream and assigns each patient's
/// studies to exactly one split. Boundaries are rounded to the nearest
/// patient, then nudged so every split keeps at least one patient.
pub fn patient_disjoint_split(records: &[StudyRecord], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut patients: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    patients.sort();
    patients.dedup();
    let p = patients.len();
    if p < 3 {
        return Err(Error::Partition(format!(
            "need at least 3 distinct patients to split, have {p}"
        )));
    }
    RngStream::new(spec.seed).shuffle(&mut patients);

    let mut c1 = (p as f64 * spec.train).round() as usize;
    let mut c2 = (p as f64 * (spec.train + spec.val)).round() as usize;
    // every split keeps at least one patient
    c1 = c1.clamp(1, p - 2);
    c2 = c2.clamp(c1 + 1, p - 1);

    let assignment: BTreeMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < c1 {
                0
            } else if i < c2 {
                1
            } else {
                2
            };
            (id.as_str(), split)
        })
        .collect();

    let mut out = Splits::default();
    for r in records {
        match assignment[r.patient_id.as_str()] {
            0 => out.train.push(r.clone()),
            1 => out.val.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    Ok(out)
}

/// Groups view paths by (patient, study); deterministic order.
pub fn group_views(records: &[StudyRecord]) -> BTreeMap<(String, String), Vec<PathBuf>> {
    let mut groups: BTreeMap<(String, String), Vec<PathBuf>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.patient_id.clone(), r.study_id.clone()))
            .or_default()
            .extend(r.view_paths.iter().cloned());
    }
    groups
}

/// Loads splits for a corpus root. A root containing official `train/` and
/// `valid/` subtrees uses them directly (the validation set doubles as the
/// test set, as is conventional for that layout); otherwise the whole tree
/// is scanned and split patient-disjointly with the seeded shuffle.
pub fn load_splits(root: &Path, spec: &SplitSpec) -> Result<Splits> {
    let train_dir = root.join("train");
    let valid_dir = root.join("valid");
    if train_dir.is_dir() && valid_dir.is_dir() {
        let train = scan_layout(&train_dir)?.records;
        let valid = scan_layout(&valid_dir)?.records;
        return Ok(Splits {
            train,
            val: valid.clone(),
            test: valid,
        });
    }
    let outcome = scan_layout(root)?;
    patient_disjoint_split(&outcome.records, spec)
}

// ── synthetic corpus ─────────────────────────────────────────────────

/// Synthetic corpus shape and difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub studies_per_patient: usize,
    pub views_per_study: usize,
    pub image_size: usize,
    pub abnormal_fraction: f64,
    pub seed: u64,
    /// Cycle the seven anatomy names across patients instead of labeling
    /// everything with the single placeholder anatomy.
    pub cycle_anatomies: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 16,
            studies_per_patient: 2,
            views_per_study: 2,
            image_size: 56,
            abnormal_fraction: 0.5,
            seed: 0,
            cycle_anatomies: false,
        }
    }
}

/// Generation result: the records as written plus the manifest path.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub records: Vec<StudyRecord>,
    pub image_count: usize,
    pub manifest_path: PathBuf,
}

const PLACEHOLDER_ANATOMY: Anatomy = Anatomy::Wrist;

/// Writes a MURA-layout PNG tree plus a `manifest.csv` recording ground
/// truth. Each view is a smooth background gradient with low-amplitude
/// noise and a bright elongated bone ellipse; abnormal studies additionally
/// carry a high-contrast circular lesion on the bone in every view.
/// Byte-identical under seed replay.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutcome> {
    if cfg.n_patients == 0 || cfg.studies_per_patient == 0 || cfg.views_per_study == 0 {
        return Err(Error::Parameter("synthetic corpus counts must be positive".into()));
    }
    if cfg.image_size < 8 {
        return Err(Error::Parameter("synthetic image size must be at least 8".into()));
    }
    if !(0.0..=1.0).contains(&cfg.abnormal_fraction) {
        return Err(Error::Parameter("abnormal fraction must be in [0, 1]".into()));
    }
    fs::create_dir_all(out_dir)?;

    let root = RngStream::new(cfg.seed);
    let total_studies = cfg.n_patients * cfg.studies_per_patient;
    let n_abnormal = (total_studies as f64 * cfg.abnormal_fraction).round() as usize;
    let mut labels: Vec<u8> = vec![1; n_abnormal];
    labels.resize(total_studies, 0);
    root.substream(0xBA5E).shuffle(&mut labels);

    let mut records = Vec::with_capacity(total_studies);
    let mut image_count = 0usize;
    for pi in 0..cfg.n_patients {
        let anatomy = if cfg.cycle_anatomies {
            ALL_ANATOMIES[pi % ALL_ANATOMIES.len()]
        } else {
            PLACEHOLDER_ANATOMY
        };
        let patient_id = format!("patient{pi:05}");
        for si in 0..cfg.studies_per_patient {
            let study_index = pi * cfg.studies_per_patient + si;
            let label = labels[study_index];
            let suffix = if label == 1 { "positive" } else { "negative" };
            let study_dir = out_dir
                .join(anatomy.dir_name())
                .join(&patient_id)
                .join(format!("study{}_{suffix}", si + 1));
            fs::create_dir_all(&study_dir)?;
            let mut views = Vec::with_capacity(cfg.views_per_study);
            for vi in 0..cfg.views_per_study {
                let image_rng = root.substream((study_index * cfg.views_per_study + vi) as u64);
                let pixels = render_view(cfg.image_size, label == 1, image_rng);
                let path = study_dir.join(format!("image{}.png", vi + 1));
                write_gray_png(&path, cfg.image_size, &pixels)?;
                views.push(path);
                image_count += 1;
            }
            records.push(StudyRecord {
                patient_id: patient_id.clone(),
                anatomy,
                study_id: format!("{}/study{}", anatomy.dir_name(), si + 1),
                label,
                view_paths: views,
            });
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = fs::File::create(&manifest_path)?;
    writeln!(manifest, "patient_id,anatomy,study_id,label,view_count")?;
    for r in &records {
        writeln!(
            manifest,
            "{},{},{},{},{}",
            r.patient_id,
            r.anatomy,
            r.study_id,
            r.label,
            r.view_paths.len()
        )?;
    }
    Ok(SynthOutcome {
        records,
        image_count,
        manifest_path,
    })
}

/// One synthetic radiograph as grayscale intensities in [0, 1].
/// Backgrounds and bone stay below ~0.65 so the +0.35 lesion contrast is
/// never lost to clamping.
fn render_view(size: usize, abnormal: bool, mut rng: RngStream) -> Vec<f32> {
    let s = size as f64;
    // scene parameters first, then a dedicated noise substream, so the
    // draw order is stable
    let base = 0.10 + rng.next_f64() * 0.12;
    let grad_angle = rng.next_f64() * std::f64::consts::TAU;
    let grad_amp = 0.03 + rng.next_f64() * 0.04;
    let theta = rng.next_f64() * std::f64::consts::PI;
    let cx = s * (0.5 + (rng.next_f64() - 0.5) * 0.12);
    let cy = s * (0.5 + (rng.next_f64() - 0.5) * 0.12);
    let semi_major = s * (0.30 + rng.next_f64() * 0.10);
    let semi_minor = s * (0.08 + rng.next_f64() * 0.05);
    let bone_gain = 0.26 + rng.next_f64() * 0.08;
    let lesion = if abnormal {
        let along = (rng.next_f64() - 0.5) * 1.2;
        let radius = s * (0.06 + rng.next_f64() * 0.04);
        let (sin_t, cos_t) = theta.sin_cos();
        Some((
            cx + along * semi_major * cos_t,
            cy + along * semi_major * sin_t,
            radius,
        ))
    } else {
        None
    };
    let mut noise = rng.substream(1);

    let (sin_t, cos_t) = theta.sin_cos();
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let xf = x as f64;
            let yf = y as f64;
            let mut v = base
                + grad_amp * ((xf / s - 0.5) * gx + (yf / s - 0.5) * gy)
                + (noise.next_f64() - 0.5) * 0.04;
            // signed ellipse coordinate: <1 inside the bone
            let dx = xf - cx;
            let dy = yf - cy;
            let u = dx * cos_t + dy * sin_t;
            let w = -dx * sin_t + dy * cos_t;
            let e = (u / semi_major).powi(2) + (w / semi_minor).powi(2);
            if e < 1.0 {
                v += bone_gain * ((1.0 - e) / 0.15).clamp(0.0, 1.0);
            }
            if let Some((lx, ly, r)) = lesion {
                let dist = ((xf - lx).powi(2) + (yf - ly).powi(2)).sqrt();
                if dist < r {
                    v += 0.35 * ((r - dist) / 1.5).clamp(0.0, 1.0);
                }
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    pixels
}

fn write_gray_png(path: &Path, size: usize, pixels: &[f32]) -> Result<()> {
    let buf: Vec<u8> = pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, buf)
        .ok_or_else(|| Error::Data("pixel buffer does not match image size".into()))?;
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
