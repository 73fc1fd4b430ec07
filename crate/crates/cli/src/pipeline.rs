//! Batch pipeline: attack → uncertainty map → mask → masked encode, per image.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use uvtok_core::attack::{attack_and_mask, seeded_mask_consistency, AttackConfig};
use uvtok_core::encoder::{
    check_image, encode, init_params, load_checkpoint, masked_encode_weighted, EncoderConfig, EncoderParams,
};
use uvtok_core::mask::{layer_deviation_profile, patch_moments};
use uvtok_core::netpbm::read_image;
use uvtok_core::seed::derive_seed;
use uvtok_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const TOOL: &str = "uvtok";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Encoder geometry plus weights, from a checkpoint or a seeded init.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Model {
    pub fn load(rc: &RunConfig) -> Result<Self> {
        match &rc.checkpoint {
            Some(path) => {
                let (config, params) = load_checkpoint(path)?;
                Ok(Self { config, params })
            }
            None => Ok(Self { config: rc.encoder.clone(), params: init_params(&rc.encoder, rc.model_seed)? }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub initial: f64,
    pub final_value: f64,
    pub max: f64,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// All patch values equal (e.g. a zero-budget attack).
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub index: usize,
    pub path: String,
    pub seed: u64,
    pub objective: TraceSummary,
    pub uncertainty: MapStats,
    pub fraction_uncertain: f64,
    pub uncertain_tokens: Vec<usize>,
    /// Relative deviation per block, `1..=L`.
    pub deviation_profile: Vec<f64>,
    /// `‖masked − plain‖_F / ‖plain‖_F` of the final hidden state.
    pub masked_relative_change: f64,
    pub masked_equals_plain: bool,
    pub mask_miou: Option<f64>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ImageEntry {
    Ok(ImageRecord),
    Error { index: usize, path: String, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub images_ok: usize,
    pub images_failed: usize,
    pub mean_final_objective: Option<f64>,
    pub mean_fraction_uncertain: Option<f64>,
    pub mean_mask_miou: Option<f64>,
    /// Share of images whose last-block relative deviation exceeds the first.
    pub deviation_growth_share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub tool: String,
    pub version: String,
    /// The only field allowed to differ between identical runs.
    pub generated_at: Option<String>,
    pub config: String,
    pub notes: Vec<String>,
    pub images: Vec<ImageEntry>,
    pub aggregate: Aggregate,
}

impl PipelineReport {
    pub fn all_failed(&self) -> bool {
        self.aggregate.images_ok == 0 && self.aggregate.images_failed > 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Where image `index` writes its artifacts.
pub fn artifact_dir(out_dir: &Path, index: usize, path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    out_dir.join("images").join(format!("{index:03}_{stem}"))
}

fn process(
    rc: &RunConfig,
    model: &Model,
    index: usize,
    path: &Path,
    image: &Tensor,
    out_dir: &Path,
) -> Result<ImageRecord> {
    let (config, params) = (&model.config, &model.params);
    check_image(image, config)?;
    let seed = derive_seed(rc.seed, index as u64);
    let atk = AttackConfig { rng_seed: seed, ..rc.attack.clone() };

    let clean = encode(image, params, config)?;
    let am = attack_and_mask(image, &clean, params, config, &atk, &rc.mask)?;
    let masked =
        masked_encode_weighted(image, params, config, &am.mask.weights(rc.mask.attenuation), rc.mask.mask_layers)?;
    let (plain_final, masked_final) = (clean.final_layer(), masked.final_layer());
    let diff: f64 =
        plain_final.data().iter().zip(masked_final.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();

    let mask_miou = if rc.consistency_seeds.is_empty() {
        None
    } else {
        Some(seeded_mask_consistency(image, params, config, &atk, &rc.mask, &rc.consistency_seeds)?.mean_pairwise)
    };

    let patches = am.map.patch_values();
    let (u_mean, u_std) = patch_moments(&am.map);
    let (u_min, u_max) =
        patches.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let trace = &am.attack.objective_trace;

    let dir = artifact_dir(out_dir, index, path);
    std::fs::create_dir_all(&dir)?;
    let grid = config.grid();
    let files: [(&str, Vec<u8>); 5] = [
        ("uncertainty.pgm", am.map.to_pgm(grid)?),
        ("uncertainty.json", serde_json::to_vec_pretty(&am.map).expect("map serializes")),
        ("mask.pgm", am.mask.to_pgm(grid)?),
        ("mask.json", serde_json::to_vec_pretty(&am.mask).expect("mask serializes")),
        ("trace.csv", am.attack.trace_csv().into_bytes()),
    ];
    let mut artifacts = Vec::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
        artifacts.push(dir.strip_prefix(out_dir).unwrap_or(&dir).join(name).display().to_string());
    }

    Ok(ImageRecord {
        index,
        path: path.display().to_string(),
        seed,
        objective: TraceSummary {
            iterations: trace.len() - 1,
            initial: trace[0],
            final_value: am.attack.final_objective(),
            max: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            linf: am.attack.final_epsilon_linf,
        },
        uncertainty: MapStats { mean: u_mean, std: u_std, min: u_min, max: u_max, degenerate: u_max == u_min },
        fraction_uncertain: am.mask.fraction_uncertain,
        uncertain_tokens: am.mask.uncertain_tokens(),
        deviation_profile: layer_deviation_profile(&clean, &am.attacked_states)?,
        masked_relative_change: diff / plain_final.frobenius_norm(),
        masked_equals_plain: masked.bitwise_eq(&clean),
        mask_miou,
        artifacts,
    })
}

/// Runs the pipeline over `images` (read from disk) and writes artifacts
/// under `out_dir`. Per-image failures become error entries.
pub fn run_pipeline(
    rc: &RunConfig,
    model: &Model,
    images: &[PathBuf],
    out_dir: &Path,
    generated_at: Option<String>,
) -> Result<PipelineReport> {
    let loaded: Vec<Result<Tensor>> = images.iter().map(read_image).collect();
    run_loaded(rc, model, images, loaded, out_dir, generated_at)
}

/// [`run_pipeline`] over images that are already decoded (or failed to be).
pub fn run_loaded(
    rc: &RunConfig,
    model: &Model,
    paths: &[PathBuf],
    images: Vec<Result<Tensor>>,
    out_dir: &Path,
    generated_at: Option<String>,
) -> Result<PipelineReport> {
    if paths.len() != images.len() {
        return Err(Error::Usage("one path per image is required".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rc.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let work: Vec<(usize, &PathBuf, Result<Tensor>)> =
        paths.iter().zip(images).enumerate().map(|(i, (p, img))| (i, p, img)).collect();
    // collect() keeps input order regardless of completion order
    let entries: Vec<ImageEntry> = pool.install(|| {
        work.into_par_iter()
            .map(|(index, path, image)| match image.and_then(|img| process(rc, model, index, path, &img, out_dir)) {
                Ok(rec) => ImageEntry::Ok(rec),
                Err(e) => ImageEntry::Error { index, path: path.display().to_string(), error: e.to_string() },
            })
            .collect()
    });

    let records: Vec<&ImageRecord> = entries
        .iter()
        .filter_map(|e| match e {
            ImageEntry::Ok(r) => Some(r),
            ImageEntry::Error { .. } => None,
        })
        .collect();
    let aggregate = Aggregate {
        images_ok: records.len(),
        images_failed: entries.len() - records.len(),
        mean_final_objective: mean(records.iter().map(|r| r.objective.final_value)),
        mean_fraction_uncertain: mean(records.iter().map(|r| r.fraction_uncertain)),
        mean_mask_miou: mean(records.iter().filter_map(|r| r.mask_miou)),
        deviation_growth_share: mean(records.iter().map(|r| {
            let p = &r.deviation_profile;
            f64::from(u8::from(p[p.len() - 1] > p[0]))
        })),
    };
    Ok(PipelineReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        generated_at,
        config: rc.to_echo(),
        notes: vec![rc.scaled_layers_note()],
        images: entries,
        aggregate,
    })
}
