//! Dataset-on-disk layout and preprocessing into model-ready patch grids.
//!
//! Layout: one directory per subject holding paired `face_####.ppm` and
//! `bio_####.txt` (headered signal text) plus `labels.csv` with
//! `index,valence,arousal` rows. Flat and inspectable; every file is
//! byte-deterministic given the generator seed.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_image_ppm, render_to, write_image_ppm, ImageTensor};
use crate::model::TransformerConfig;
use crate::patch::patchify;
use crate::signal::{parse_headered, Segment};
use crate::train::{PreparedExample, SynthExample};
use crate::transform::{
    cwt_scalogram, spwvd_map, toeplitz_map, CwtParams, MapKind, SmoothingWindows, TimeFreqMap,
};

/// Thread cap for preprocessing, from `PULSEMAP_THREADS` (unset or
/// unparsable = rayon default).
pub const THREADS_ENV: &str = "PULSEMAP_THREADS";

/// Knobs for the 1D-to-2D step of the preprocessing pipeline.
#[derive(Debug, Clone)]
pub struct TransformOptions {
    pub method: MapKind,
    pub windows: SmoothingWindows,
    pub n_freq_bins: usize,
    pub cwt: CwtParams,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions {
            method: MapKind::Scalogram,
            windows: SmoothingWindows::default(),
            n_freq_bins: 256,
            cwt: CwtParams::default(),
        }
    }
}

/// Apply the configured 1D-to-2D representation to one segment.
pub fn map_segment(segment: &Segment, options: &TransformOptions) -> Result<TimeFreqMap> {
    match options.method {
        MapKind::Toeplitz => toeplitz_map(segment),
        MapKind::Spwvd => spwvd_map(segment, &options.windows, options.n_freq_bins),
        MapKind::Scalogram => cwt_scalogram(segment, &options.cwt),
    }
}

fn label_file(examples: &[&SynthExample]) -> String {
    let mut out = String::from("index,valence,arousal\n");
    for ex in examples {
        out.push_str(&format!("{},{},{}\n", ex.index, ex.valence, ex.arousal));
    }
    out
}

/// Write a generated dataset in the subject-directory layout.
pub fn write_dataset(dir: &Path, examples: &[SynthExample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut subjects: Vec<&str> = examples.iter().map(|e| e.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    for subject in subjects {
        let sdir = dir.join(subject);
        std::fs::create_dir_all(&sdir)?;
        let mut subject_examples: Vec<&SynthExample> = examples
            .iter()
            .filter(|e| e.subject_id == subject)
            .collect();
        subject_examples.sort_by_key(|e| e.index);
        for ex in &subject_examples {
            write_image_ppm(&ex.face, &sdir.join(format!("face_{:04}.ppm", ex.index)))?;
            let mut bio = format!(
                "# fs {} PPG {}\n",
                ex.bio.sample_rate_hz, ex.subject_id
            );
            for v in &ex.bio.samples {
                bio.push_str(&format!("{v}\n"));
            }
            std::fs::write(sdir.join(format!("bio_{:04}.txt", ex.index)), bio)?;
        }
        std::fs::write(sdir.join("labels.csv"), label_file(&subject_examples))?;
    }
    Ok(())
}

/// Read a dataset directory back into memory (subjects and indices in
/// sorted order, so loading is deterministic).
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthExample>> {
    let mut subjects: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    subjects.sort();
    if subjects.is_empty() {
        return Err(Error::data(format!("no subject directories in {}", dir.display())));
    }
    let mut out = Vec::new();
    for subject in subjects {
        let sdir = dir.join(&subject);
        let labels = std::fs::read_to_string(sdir.join("labels.csv"))?;
        for (lineno, line) in labels.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "index,valence,arousal" {
                    return Err(Error::parse(format!(
                        "unexpected labels.csv header in {subject}: `{line}`"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::parse(format!("bad labels.csv row `{line}`")));
            }
            let parse = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::parse(format!("bad number `{s}` in labels.csv")))
            };
            let (index, valence, arousal) = (parse(cols[0])?, parse(cols[1])?, parse(cols[2])?);
            let face = read_image_ppm(&sdir.join(format!("face_{index:04}.ppm")))?;
            let bio_signal = parse_headered(&std::fs::read_to_string(
                sdir.join(format!("bio_{index:04}.txt")),
            )?)?;
            let n = bio_signal.len();
            let bio = Segment::new(
                bio_signal.samples,
                bio_signal.sample_rate_hz,
                0,
                n as f64 / bio_signal.sample_rate_hz,
            )?;
            out.push(SynthExample {
                subject_id: subject.clone(),
                index,
                face,
                bio,
                valence,
                arousal,
            });
        }
    }
    Ok(out)
}

fn preprocess_one(
    ex: &SynthExample,
    config: &TransformerConfig,
    options: &TransformOptions,
) -> Result<PreparedExample> {
    if ex.face.height != config.image_size || ex.face.width != config.image_size {
        return Err(Error::data(format!(
            "face image {}x{} does not match configured image_size {}",
            ex.face.height, ex.face.width, config.image_size
        )));
    }
    let map = map_segment(&ex.bio, options)?;
    let bio_image = render_to(&map, config.image_size, config.image_size)?;
    Ok(PreparedExample {
        subject_id: ex.subject_id.clone(),
        face: patchify(&ex.face, config.patch_size)?,
        bio: patchify(&bio_image, config.patch_size)?,
        valence: ex.valence,
        arousal: ex.arousal,
    })
}

/// Transform + render + patchify every example. Work runs on a rayon
/// pool sized by `PULSEMAP_THREADS`; output order matches input order,
/// so results are independent of the thread count.
pub fn prepare_examples(
    examples: &[SynthExample],
    config: &TransformerConfig,
    options: &TransformOptions,
) -> Result<Vec<PreparedExample>> {
    let run = || -> Result<Vec<PreparedExample>> {
        examples
            .par_iter()
            .map(|ex| preprocess_one(ex, config, options))
            .collect()
    };
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Face image of a prepared pair rendered for quick visual inspection.
pub fn bio_map_image(
    ex: &SynthExample,
    config: &TransformerConfig,
    options: &TransformOptions,
) -> Result<ImageTensor> {
    let map = map_segment(&ex.bio, options)?;
    render_to(&map, config.image_size, config.image_size)
}
